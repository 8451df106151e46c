"""Deterministic synthetic multi-session worlds.

A ground-truth metric trajectory is cut into contiguous sessions. Each session
is re-expressed from its own origin, scaled by a hidden per-session factor and
corrupted by compounded odometry noise. Loop candidates come from geometric
proximity in ground truth; aliased false positives can be injected on request.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import lie
from .alarm import LoopCandidate, accumulated_rotation
from .graph import LOOP_WEIGHTS, LoopEdge
from .lie import Sim3

TRAJECTORIES = ("closed-loop", "corridor", "figure-eight", "file")


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class FalsePositiveSpec:
    """``count`` aliased loops between local index ranges ``a`` and ``b``.

    Each range is ``(session, lo, hi)`` with ``hi`` inclusive.
    """

    a: tuple
    b: tuple
    count: int = 1

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["a"]), tuple(d["b"]), int(d.get("count", 1)))


@dataclass
class WorldConfig:
    trajectory: str = "closed-loop"
    # closed-loop / corridor: length, width, corner_radius, laps
    # figure-eight: radius, laps;  file: path, stride
    path_params: dict = field(default_factory=dict)
    keyframe_spacing: float = 1.0
    num_sessions: int = 1
    # explicit factors win over a log-uniform range; default is all ones
    session_scales: tuple | None = None
    scale_range: tuple | None = None
    # per step: rotation std (deg, per axis), translation std (fraction of step), log-scale std
    odometry_noise: tuple = (0.0, 0.0, 0.0)
    loop_radius: float = 2.0
    loop_min_gap: int = 30
    # rotation std (deg), translation std (m), log-scale std
    loop_noise: tuple = (0.0, 0.0, 0.0)
    max_loops_per_pair: int | None = None
    fp_injection: tuple = ()
    fp_noise: tuple = (0.5, 0.05, 0.005)
    rng_seed: int = 0

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise WorldError(f"unknown trajectory {self.trajectory!r}; choose from {TRAJECTORIES}")
        if self.num_sessions < 1:
            raise WorldError("num_sessions must be >= 1")
        if not self.keyframe_spacing > 0:
            raise WorldError("keyframe_spacing must be positive")
        if not self.loop_radius > 0:
            raise WorldError("loop_radius must be positive")
        for name in ("odometry_noise", "loop_noise", "fp_noise"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3 or min(v) < 0:
                raise WorldError(f"{name} needs three non-negative stds")
            setattr(self, name, v)
        if self.session_scales is not None:
            self.session_scales = tuple(float(s) for s in self.session_scales)
            if len(self.session_scales) != self.num_sessions:
                raise WorldError("session_scales needs one factor per session")
            if min(self.session_scales) <= 0:
                raise WorldError("session scales must be positive")
        if self.scale_range is not None:
            lo, hi = (float(x) for x in self.scale_range)
            if not 0 < lo <= hi:
                raise WorldError("scale_range must satisfy 0 < lo <= hi")
            self.scale_range = (lo, hi)
        self.fp_injection = tuple(f if isinstance(f, FalsePositiveSpec)
                                  else FalsePositiveSpec.from_dict(f) for f in self.fp_injection)

    def to_dict(self):
        d = asdict(self)
        d["fp_injection"] = [asdict(f) for f in self.fp_injection]
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise WorldError(f"unknown world keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("session_scales", "scale_range", "odometry_noise", "loop_noise", "fp_noise"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class GroundTruth:
    poses: list                  # metric world poses, scale exactly 1
    index_map: list              # global index -> (session, local index)
    session_starts: list         # global index of each session's first keyframe

    def global_index(self, session, index):
        return self.session_starts[session] + index

    def positions(self):
        return np.array([p.translation for p in self.poses])


@dataclass
class SessionData:
    session: int
    poses: list                  # session-local, scale-contaminated
    measurements: list           # relative odometry, len(poses) - 1
    scale: float                 # hidden true factor

    def true_anchor(self, gt: GroundTruth):
        """Anchor mapping this session onto ground truth when noise is zero."""
        start = gt.poses[gt.session_starts[self.session]]
        return lie.compose(start, Sim3(np.eye(3), np.zeros(3), 1.0 / self.scale))


# -- trajectory generators ------------------------------------------------

def _rounded_rectangle(length, width, corner_radius):
    """Dense closed polyline of a rounded rectangle, counter-clockwise."""
    r = min(corner_radius, width / 2.0, length / 2.0)
    a, b = length / 2.0 - r, width / 2.0 - r
    pts = []
    corners = [(a, b, 0.0), (-a, b, np.pi / 2), (-a, -b, np.pi), (a, -b, 1.5 * np.pi)]
    for cx, cy, start in corners:
        for phi in np.linspace(start, start + np.pi / 2, 200, endpoint=False):
            pts.append((cx + r * np.cos(phi), cy + r * np.sin(phi)))
        # straight edge to the next corner start is implied by the polyline
    pts = np.array(pts)
    # start mid-way along the bottom edge heading +x
    start_pt = np.array([[0.0, -width / 2.0]])
    k = int(np.argmin(np.abs(np.arctan2(pts[:, 1], pts[:, 0]) + np.pi / 2)))
    pts = np.vstack([start_pt, pts[k:], pts[:k]])
    return pts


def _figure_eight(radius):
    phi = np.linspace(0, 2 * np.pi, 4000, endpoint=False)
    return np.stack([radius * np.sin(phi), radius * np.sin(phi) * np.cos(phi)], axis=1)


def _resample(loop_pts, spacing, laps):
    """Equally spaced points along a closed polyline plus tangent headings."""
    pts = np.vstack([loop_pts, loop_pts[:1]])
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    perimeter = s[-1]
    query = np.arange(0.0, perimeter * laps + 1e-9, spacing)

    def at(q):
        q = np.mod(q, perimeter)
        return np.stack([np.interp(q, s, pts[:, 0]), np.interp(q, s, pts[:, 1])], axis=1)

    h = 1e-3 * spacing
    d = at(query + h) - at(query - h)
    yaw = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    xy = at(query)
    return np.column_stack([xy, np.zeros(len(xy))]), yaw


def _yaw_poses(xyz, yaw):
    return [Sim3(lie.so3_exp([0.0, 0.0, float(h)]), p, 1.0) for p, h in zip(xyz, yaw)]


def ground_truth_poses(config: WorldConfig):
    """Metric keyframe poses along the configured path."""
    p = dict(config.path_params)
    kind = config.trajectory
    if kind == "file":
        from .io import read_kitti_poses
        poses = read_kitti_poses(p["path"])
        stride = int(p.get("stride", 1))
        return _subsample_by_distance(poses[::stride], config.keyframe_spacing)
    if kind == "closed-loop":
        pts = _rounded_rectangle(p.get("length", 300.0), p.get("width", 200.0),
                                 p.get("corner_radius", 30.0))
    elif kind == "corridor":
        # two parallel aisles joined by semicircular turns
        sep = p.get("width", 6.0)
        pts = _rounded_rectangle(p.get("length", 50.0) + sep, sep, sep / 2.0)
    else:
        pts = _figure_eight(p.get("radius", 50.0))
    xyz, yaw = _resample(pts, config.keyframe_spacing, p.get("laps", 1.0))
    return _yaw_poses(xyz, yaw)


def _subsample_by_distance(poses, spacing):
    out = [poses[0]]
    for P in poses[1:]:
        if np.linalg.norm(P.translation - out[-1].translation) >= spacing:
            out.append(Sim3(P.rotation, P.translation, 1.0))
    return [Sim3(P.rotation, P.translation, 1.0) for P in out]


# -- corruption -----------------------------------------------------------

def session_scales(config: WorldConfig):
    if config.session_scales is not None:
        return list(config.session_scales)
    if config.scale_range is not None:
        rng = np.random.default_rng([config.rng_seed, 1_000_000])
        lo, hi = np.log(config.scale_range)
        return [float(np.exp(v)) for v in rng.uniform(lo, hi, size=config.num_sessions)]
    return [1.0] * config.num_sessions


def _noisy_relative(M: Sim3, rng, rot_deg, trans_std, log_std):
    if rot_deg == trans_std == log_std == 0.0:
        return M
    omega = np.radians(rot_deg) * rng.standard_normal(3)
    dt = trans_std * rng.standard_normal(3)
    ds = log_std * rng.standard_normal()
    noise = Sim3(lie.so3_exp(omega), dt, float(np.exp(ds)))
    return lie.compose(M, noise)


def corrupt_session(gt_segment, session, scale, noise, seed):
    """Local poses and odometry for one session; seeded by ``seed + session``."""
    rng = np.random.default_rng(seed + session)
    rot_deg, trans_frac, log_std = noise
    poses = [Sim3(np.eye(3), np.zeros(3), scale)]
    measurements = []
    for a, b in zip(gt_segment[:-1], gt_segment[1:]):
        M_true = lie.compose(a.inverse(), b)
        step = float(np.linalg.norm(M_true.translation))
        M = _noisy_relative(M_true, rng, rot_deg, trans_frac * step, log_std)
        measurements.append(M)
        poses.append(lie.compose(poses[-1], M))
    return SessionData(session, poses, measurements, scale)


def partition(num_keyframes, num_sessions):
    if num_sessions > num_keyframes:
        raise WorldError(f"{num_sessions} sessions exceed {num_keyframes} keyframes")
    bounds = np.linspace(0, num_keyframes, num_sessions + 1).round().astype(int)
    if np.any(np.diff(bounds) < 2):
        raise WorldError("each session needs at least two keyframes")
    return [int(b) for b in bounds[:-1]], [int(b) for b in bounds[1:]]


# -- loops ----------------------------------------------------------------

def _loop_edge(gt, a, b, rng, noise):
    (r, i), (s, j) = gt.index_map[a], gt.index_map[b]
    Z = lie.compose(gt.poses[a].inverse(), gt.poses[b])
    Z = _noisy_relative(Z, rng, *noise)
    return LoopEdge((r, i), (s, j), Z, LOOP_WEIGHTS)


def _candidate(edge, sessions, fp):
    (r, i), (s, j) = edge.endpoint_a, edge.endpoint_b
    if r != s or sessions is None:
        gap = abs(j - i) if r == s else 0
        return LoopCandidate(edge, gap, 0.0, fp)
    lo, hi = sorted((i, j))
    return LoopCandidate(edge, hi - lo, accumulated_rotation(sessions[r].poses, lo, hi), fp)


def propose_true_loops(gt: GroundTruth, radius, min_gap, sessions=None, max_per_pair=None,
                       noise=(0.0, 0.0, 0.0), seed=0):
    """Proximity loops; ``min_gap`` filters same-session pairs only.

    Pairs are taken closest-first per session pair, each keyframe used once,
    up to ``max_per_pair``.
    """
    if not radius > 0:
        raise WorldError("radius must be positive")
    rng = np.random.default_rng([seed, 1_000_001])
    pos = gt.positions()
    pairs = sorted(cKDTree(pos).query_pairs(radius))
    by_pair = {}
    for a, b in pairs:
        (r, i), (s, j) = gt.index_map[a], gt.index_map[b]
        if r == s and abs(j - i) <= min_gap:
            continue
        d = float(np.linalg.norm(pos[a] - pos[b]))
        by_pair.setdefault((r, s), []).append((d, a, b))
    chosen = []
    for key in sorted(by_pair):
        used, picked = set(), []
        for d, a, b in sorted(by_pair[key]):
            if a in used or b in used:
                continue
            picked.append((a, b))
            used.update((a, b))
            if max_per_pair is not None and len(picked) >= max_per_pair:
                break
        chosen.extend(sorted(picked))
    return [_candidate(_loop_edge(gt, a, b, rng, noise), sessions, False) for a, b in chosen]


def inject_false_positives(gt: GroundTruth, specs, min_distance, noise=(0.5, 0.05, 0.005),
                           sessions=None, seed=0):
    """Aliased loops between distant keyframes with near-identity measurements."""
    rng = np.random.default_rng([seed, 1_000_002])
    pos = gt.positions()
    out = []
    for spec in specs:
        ra, lo_a, hi_a = spec.a
        rb, lo_b, hi_b = spec.b
        for seg_s, lo, hi in (spec.a, spec.b):
            if seg_s >= len(gt.session_starts) or lo < 0 or hi < lo:
                raise WorldError(f"bad segment {(seg_s, lo, hi)}")
            last = (gt.session_starts[seg_s + 1] if seg_s + 1 < len(gt.session_starts)
                    else len(gt.poses)) - gt.session_starts[seg_s] - 1
            if hi > last:
                raise WorldError(f"segment {(seg_s, lo, hi)} exceeds session length {last + 1}")
        taken = set()
        for _ in range(spec.count):
            for _attempt in range(10_000):
                i = int(rng.integers(lo_a, hi_a + 1))
                j = int(rng.integers(lo_b, hi_b + 1))
                a, b = gt.global_index(ra, i), gt.global_index(rb, j)
                if a == b or (ra == rb and abs(i - j) <= 1) or (a, b) in taken:
                    continue
                if np.linalg.norm(pos[a] - pos[b]) >= min_distance:
                    break
            else:
                raise WorldError(f"no keyframe pair {min_distance} m apart in {spec}")
            taken.add((a, b))
            omega = np.radians(noise[0]) * rng.standard_normal(3)
            Z = Sim3(lie.so3_exp(omega), noise[1] * rng.standard_normal(3),
                     float(np.exp(noise[2] * rng.standard_normal())))
            edge = LoopEdge((ra, i), (rb, j), Z, LOOP_WEIGHTS)
            out.append(_candidate(edge, sessions, True))
    return out


def generate_world(config: WorldConfig):
    """Return ``(GroundTruth, [SessionData], [LoopCandidate])``."""
    poses = ground_truth_poses(config)
    starts, ends = partition(len(poses), config.num_sessions)
    index_map = [(r, k - st) for r, (st, en) in enumerate(zip(starts, ends)) for k in range(st, en)]
    gt = GroundTruth(poses, index_map, starts)
    scales = session_scales(config)
    sessions = [corrupt_session(poses[st:en], r, scales[r], config.odometry_noise, config.rng_seed)
                for r, (st, en) in enumerate(zip(starts, ends))]
    loops = propose_true_loops(gt, config.loop_radius, config.loop_min_gap, sessions,
                               config.max_loops_per_pair, config.loop_noise, config.rng_seed)
    fps = inject_false_positives(gt, config.fp_injection, 10.0 * config.loop_radius,
                                 config.fp_noise, sessions, config.rng_seed)
    return gt, sessions, loops + fps


def export_packets(sessions):
    """Packet dicts interleaved as concurrent agents would emit them."""
    records = []
    for sd in sessions:
        for k, pose in enumerate(sd.poses):
            records.append({"session_id": sd.session, "keyframe_index": k,
                            "timestamp": round(0.1 * k, 6), "pose": pose})
    records.sort(key=lambda r: (r["keyframe_index"], r["session_id"]))
    yield from records


# -- presets --------------------------------------------------------------

PRESETS = {
    "three-robot-loop": dict(
        trajectory="closed-loop",
        path_params={"length": 60.0, "width": 40.0, "corner_radius": 8.0, "laps": 1.0},
        keyframe_spacing=2.0, num_sessions=3, session_scales=(1.0, 2.0, 0.5),
        loop_radius=2.5, loop_min_gap=10, max_loops_per_pair=2),
    "corridor-alias": dict(
        trajectory="corridor",
        path_params={"length": 100.0, "width": 6.0, "laps": 2.0},
        keyframe_spacing=2.0, num_sessions=3, session_scales=(1.0, 1.3, 0.8),
        odometry_noise=(0.02, 0.005, 0.002), loop_radius=2.0, loop_min_gap=30,
        loop_noise=(0.05, 0.01, 0.001), max_loops_per_pair=1,
        fp_injection=(
            # same aisle, long gap, almost no turning
            {"a": (0, 30, 34), "b": (0, 66, 72), "count": 2},
            {"a": (1, 14, 18), "b": (1, 50, 59), "count": 1},
            {"a": (2, 1, 5), "b": (2, 37, 43), "count": 1},
            # same heading across sessions, sorted after each pair's true loop and
            # placed so that matching them needs a large anchor rescale
            {"a": (0, 40, 50), "b": (1, 0, 6), "count": 1},
            {"a": (0, 54, 60), "b": (2, 28, 40), "count": 1},
            {"a": (1, 14, 18), "b": (2, 64, 72), "count": 1})),
    "kitti-like-loop": dict(
        trajectory="closed-loop",
        path_params={"length": 300.0, "width": 200.0, "corner_radius": 30.0, "laps": 1.5},
        keyframe_spacing=5.0, num_sessions=15, scale_range=(0.5, 2.0),
        odometry_noise=(0.3, 0.02, 0.01), loop_radius=7.5, loop_min_gap=30,
        loop_noise=(0.1, 0.05, 0.002), max_loops_per_pair=3),
}


def _robustness(scales):
    base = dict(PRESETS["kitti-like-loop"])
    base.update(session_scales=tuple(scales), scale_range=None)
    return base


PRESETS.update({
    "scale-robustness-mix": _robustness([1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3]),
    "scale-robustness-clustered-3": _robustness([1] * 6 + [3] * 3 + [1] * 6),
    "scale-robustness-scattered-5": _robustness([1, 1, 1, 5, 1, 1, 1, 5, 1, 1, 1, 5, 1, 1, 1]),
    "scale-robustness-clustered-5": _robustness([1] * 6 + [5] * 3 + [1] * 6),
})


def preset(name, **overrides):
    try:
        base = copy.deepcopy(PRESETS[name])
    except KeyError:
        raise WorldError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return WorldConfig.from_dict(base)
