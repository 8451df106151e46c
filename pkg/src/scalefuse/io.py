"""Trajectory files, keyframe packet streams, loop files, run manifests and CSV reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .graph import LOOP_WEIGHTS, InformationWeights, LoopEdge
from .lie import Sim3

logger = logging.getLogger(__name__)

ORTHO_WARN = 1e-4
ORTHO_REJECT = 1e-2
SIG_DIGITS = 12


class ParseError(ValueError):
    """Malformed input; carries the file and 1-based line number."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path, self.line = str(path), line


def fmt(x):
    """Fixed 12-significant-digit float text used by every writer."""
    x = float(x)
    if x == 0.0:
        return "0"  # folds -0.0 so outputs do not depend on the sign of zero
    return format(x, f".{SIG_DIGITS}g")


def _round(x):
    return float(fmt(x))


def _numbers(path, lineno, text, count):
    parts = text.split()
    if len(parts) != count:
        raise ParseError(path, lineno, f"expected {count} fields, found {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(path, lineno, f"non-numeric field ({exc})") from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(path, lineno, "non-finite value")
    return vals


def _clean_rotation(path, lineno, R):
    drift = float(np.max(np.abs(R.T @ R - np.eye(3))))
    if drift > ORTHO_REJECT or np.linalg.det(R) <= 0:
        raise ParseError(path, lineno, f"rotation is not orthonormal (drift {drift:.3g})")
    if drift > ORTHO_WARN:
        logger.warning("%s:%d: re-orthonormalizing rotation (drift %.3g)", path, lineno, drift)
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if text and not text.startswith("#"):
                yield lineno, text


# -- KITTI ----------------------------------------------------------------

def read_kitti_poses(path):
    """Row-major 3x4 ``[R|t]`` per line; returns unit-scale :class:`Sim3` poses."""
    poses = []
    for lineno, text in _lines(path):
        v = np.array(_numbers(path, lineno, text, 12)).reshape(3, 4)
        R = _clean_rotation(path, lineno, v[:, :3])
        poses.append(Sim3(R, v[:, 3], 1.0))
    return poses


def write_kitti_poses(path, poses):
    """Rotation and translation only; any scale component is not representable."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for P in poses:
            M = np.hstack([P.rotation, P.translation[:, None]])
            fh.write(" ".join(fmt(x) for x in M.ravel()) + "\n")


# -- TUM ------------------------------------------------------------------

def _quat_to_rotation(path, lineno, q):
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if not n > 1e-12:
        raise ParseError(path, lineno, "zero quaternion")
    if abs(n - 1.0) > 1e-6:
        logger.warning("%s:%d: re-normalizing quaternion (norm %.9g)", path, lineno, n)
    return Rotation.from_quat(q / n).as_matrix()


def rotation_to_quat(R):
    """Quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    q = Rotation.from_matrix(R).as_quat()
    return -q if q[3] < 0 else q


def read_tum_poses(path):
    """``timestamp tx ty tz qx qy qz qw`` per line; returns ``(timestamps, poses)``."""
    stamps, poses = [], []
    for lineno, text in _lines(path):
        v = _numbers(path, lineno, text, 8)
        stamps.append(v[0])
        poses.append(Sim3(_quat_to_rotation(path, lineno, v[4:8]), v[1:4], 1.0))
    return stamps, poses


def write_tum_poses(path, timestamps, poses):
    if len(timestamps) != len(poses):
        raise ValueError("one timestamp per pose required")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t, P in zip(timestamps, poses):
            vals = [t, *P.translation, *rotation_to_quat(P.rotation)]
            fh.write(" ".join(fmt(x) for x in vals) + "\n")


# -- packets and loops ----------------------------------------------------

POSE_KEYS = ("qx", "qy", "qz", "qw", "tx", "ty", "tz", "s")
PACKET_KEYS = ("session_id", "keyframe_index", "timestamp", "pose")
ATTACHMENT_KEYS = ("image_path", "pointmap_path")


def pose_to_dict(P: Sim3):
    """Full float precision: translation and scale survive a roundtrip bit-exact."""
    q = rotation_to_quat(P.rotation)
    vals = [*q, *P.translation, P.scale]
    return {k: float(v) for k, v in zip(POSE_KEYS, vals)}


def pose_from_dict(path, lineno, d):
    if not isinstance(d, dict):
        raise ParseError(path, lineno, "pose must be an object")
    missing = [k for k in POSE_KEYS if k not in d]
    if missing:
        raise ParseError(path, lineno, f"pose lacks {missing}")
    try:
        v = [float(d[k]) for k in POSE_KEYS]
    except (TypeError, ValueError):
        raise ParseError(path, lineno, "pose fields must be numbers") from None
    if not all(math.isfinite(x) for x in v):
        raise ParseError(path, lineno, "non-finite pose value")
    if not v[7] > 0:
        raise ParseError(path, lineno, f"non-positive scale {v[7]}")
    return Sim3(_quat_to_rotation(path, lineno, v[:4]), v[4:7], v[7])


def _json_line(path, lineno, text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ParseError(path, lineno, "record must be an object")
    return obj


def _int_field(path, lineno, obj, key):
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise ParseError(path, lineno, f"{key} must be a non-negative integer")
    return v


def read_packets(path):
    """Stream packet records; unknown keys are ignored."""
    seen = set()
    for lineno, text in _lines(path):
        obj = _json_line(path, lineno, text)
        missing = [k for k in PACKET_KEYS if k not in obj]
        if missing:
            raise ParseError(path, lineno, f"packet lacks {missing}")
        key = (_int_field(path, lineno, obj, "session_id"),
               _int_field(path, lineno, obj, "keyframe_index"))
        if key in seen:
            raise ParseError(path, lineno, f"duplicate packet for session {key[0]} index {key[1]}")
        seen.add(key)
        try:
            stamp = float(obj["timestamp"])
        except (TypeError, ValueError):
            raise ParseError(path, lineno, "timestamp must be a number") from None
        rec = {"session_id": key[0], "keyframe_index": key[1], "timestamp": stamp,
               "pose": pose_from_dict(path, lineno, obj["pose"])}
        att = obj.get("attachments")
        if isinstance(att, dict):
            kept = {k: str(att[k]) for k in ATTACHMENT_KEYS if k in att}
            if kept:
                rec["attachments"] = kept
        yield rec


def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), sort_keys=False)


def write_packets(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            out = {"session_id": int(rec["session_id"]),
                   "keyframe_index": int(rec["keyframe_index"]),
                   "timestamp": float(rec["timestamp"]),
                   "pose": pose_to_dict(rec["pose"])}
            if rec.get("attachments"):
                out["attachments"] = {k: str(rec["attachments"][k]) for k in ATTACHMENT_KEYS
                                      if k in rec["attachments"]}
            fh.write(_dumps(out) + "\n")


def write_loops(path, edges):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in edges:
            fh.write(_dumps({"a": list(e.endpoint_a), "b": list(e.endpoint_b),
                             "pose": pose_to_dict(e.measurement),
                             "weights": {k: _round(v) for k, v in e.weights.to_dict().items()}})
                     + "\n")


def read_loops(path):
    edges = []
    for lineno, text in _lines(path):
        obj = _json_line(path, lineno, text)
        try:
            a = tuple(int(x) for x in obj["a"])
            b = tuple(int(x) for x in obj["b"])
            if len(a) != 2 or len(b) != 2:
                raise ValueError
        except (KeyError, TypeError, ValueError):
            raise ParseError(path, lineno, "loop needs endpoints a=[session, index], b=[...]") from None
        if "pose" not in obj:
            raise ParseError(path, lineno, "loop lacks pose")
        Z = pose_from_dict(path, lineno, obj["pose"])
        w = obj.get("weights")
        try:
            weights = InformationWeights(**w) if w is not None else LOOP_WEIGHTS
            edges.append(LoopEdge(a, b, Z, weights))
        except (TypeError, ValueError) as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return edges


# -- CSV ------------------------------------------------------------------

def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) if isinstance(x, float) else x for x in row])


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# -- manifests ------------------------------------------------------------

MANIFEST_KEYS = ("world", "alarm", "optimizer", "fuse", "seed", "output")


@dataclass
class RunManifest:
    world: dict
    alarm: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    fuse: dict = field(default_factory=dict)
    seed: int | None = None
    output: str | None = None

    @classmethod
    def from_dict(cls, d, source="<manifest>"):
        if not isinstance(d, dict):
            raise ValueError(f"{source}: manifest must be an object")
        unknown = sorted(set(d) - set(MANIFEST_KEYS))
        if unknown:
            raise ValueError(f"{source}: unknown manifest keys {unknown}")
        if "world" not in d:
            raise ValueError(f"{source}: manifest needs a 'world' section")
        for key in ("world", "alarm", "optimizer", "fuse"):
            if key in d and not isinstance(d[key], dict):
                raise ValueError(f"{source}: '{key}' must be an object")
        seed = d.get("seed")
        if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
            raise ValueError(f"{source}: seed must be an integer")
        return cls(dict(d["world"]), dict(d.get("alarm", {})), dict(d.get("optimizer", {})),
                   dict(d.get("fuse", {})), seed, d.get("output"))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    # typed views; each raises on unknown keys or invalid values
    def world_config(self, seed=None):
        from . import sim
        world = dict(self.world)
        name = world.pop("preset", None)
        seed = self.seed if seed is None else seed
        if seed is not None:
            world["rng_seed"] = seed
        return sim.preset(name, **world) if name else sim.WorldConfig.from_dict(world)

    def alarm_config(self):
        from .alarm import AlarmConfig
        return _typed(AlarmConfig, self.alarm, "alarm")

    def optimizer_config(self):
        from .optimizer import OptimizeConfig
        return _typed(OptimizeConfig, self.optimizer, "optimizer")

    def fuse_config(self, mode=None, alarm=None):
        from .fuse import FuseConfig
        d = dict(self.fuse)
        if mode is not None:
            d["mode"] = mode
        if alarm is not None:
            d["alarm"] = alarm
        return _typed(FuseConfig, d, "fuse")


def _typed(cls, d, section):
    unknown = sorted(set(d) - {f.name for f in fields(cls)})
    if unknown:
        raise ValueError(f"unknown {section} keys {unknown}")
    return cls(**d)


def load_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    return RunManifest.from_dict(d, str(path))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
