import json

import numpy as np
import pytest

from scalefuse import io, lie, sim
from scalefuse.graph import InformationWeights, LoopEdge
from scalefuse.lie import Sim3


def rand_poses(n, seed=0, unit_scale=True):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        P = lie.random_sim3(rng, rot_scale=3.0, trans_scale=100.0)
        out.append(Sim3(P.rotation, P.translation, 1.0) if unit_scale else P)
    return out


def close9(a, b):
    """Equality at 9 significant digits, component-wise."""
    return np.allclose(a, b, rtol=1e-9, atol=1e-9)


def test_kitti_identity_line(tmp_path):
    p = tmp_path / "id.kitti"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    (P,) = io.read_kitti_poses(p)
    assert P.equals(Sim3.identity())


def test_kitti_roundtrip_100(tmp_path):
    poses = rand_poses(100)
    p = tmp_path / "t.kitti"
    io.write_kitti_poses(p, poses)
    back = io.read_kitti_poses(p)
    assert len(back) == 100
    for a, b in zip(poses, back):
        assert close9(a.rotation, b.rotation) and close9(a.translation, b.translation)


@pytest.mark.parametrize("line, needle", [
    ("1 0 0 0 0 1 0 0 0 0 1", "expected 12 fields"),
    ("1 0 0 0 0 1 0 x 0 0 1 0", "non-numeric"),
    ("1 0 0 0 0 1 0 0 0 0 1 nan", "non-finite"),
    ("1 0.1 0 0 0 1 0 0 0 0 1 0", "not orthonormal"),
    ("-1 0 0 0 0 1 0 0 0 0 1 0", "not orthonormal"),
])
def test_kitti_malformed_lines_name_the_line(tmp_path, line, needle):
    p = tmp_path / "bad.kitti"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n\n" + line + "\n")
    with pytest.raises(io.ParseError) as info:
        io.read_kitti_poses(p)
    assert info.value.line == 3 and needle in str(info.value)


def test_kitti_small_drift_is_repaired(tmp_path, caplog):
    p = tmp_path / "drift.kitti"
    p.write_text("1.001 0 0 0 0 1 0 0 0 0 1 0\n")
    (P,) = io.read_kitti_poses(p)
    assert np.allclose(P.rotation.T @ P.rotation, np.eye(3), atol=1e-14)
    assert "re-orthonormalizing" in caplog.text


def test_tum_identity_roundtrip_and_malformed(tmp_path):
    p = tmp_path / "id.tum"
    p.write_text("0.5 0 0 0 0 0 0 1\n")
    stamps, (P,) = io.read_tum_poses(p)
    assert stamps == [0.5] and P.equals(Sim3.identity())
    poses = rand_poses(100, seed=1)
    io.write_tum_poses(p, [0.1 * k for k in range(100)], poses)
    stamps, back = io.read_tum_poses(p)
    assert close9(stamps, [0.1 * k for k in range(100)])
    for a, b in zip(poses, back):
        assert close9(a.rotation, b.rotation) and close9(a.translation, b.translation)
    p.write_text("0 1 2 3 0 0 0\n")
    with pytest.raises(io.ParseError) as info:
        io.read_tum_poses(p)
    assert info.value.line == 1
    with pytest.raises(ValueError):
        io.write_tum_poses(p, [0.0], poses)


def test_tum_quaternion_is_renormalized(tmp_path):
    p = tmp_path / "q.tum"
    p.write_text("0 0 0 0 0 0 0 2\n")
    _, (P,) = io.read_tum_poses(p)
    assert np.allclose(P.rotation, np.eye(3), atol=1e-15)


def packet(session, index, pose, **extra):
    return {"session_id": session, "keyframe_index": index, "timestamp": 0.1 * index,
            "pose": pose, **extra}


def test_empty_packet_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert list(io.read_packets(p)) == []


def same_pose(a, b):
    """Translation and scale bit-exact; rotation through the quaternion to 1e-15."""
    return (np.array_equal(a.translation, b.translation) and a.scale == b.scale
            and np.allclose(a.rotation, b.rotation, rtol=0, atol=1e-15))


def test_packet_roundtrip_keeps_known_fields(tmp_path):
    poses = rand_poses(100, seed=2, unit_scale=False)
    recs = [packet(k % 3, k // 3, P) for k, P in enumerate(poses)]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    io.write_packets(a, recs)
    back = list(io.read_packets(a))
    assert [r["timestamp"] for r in back] == [r["timestamp"] for r in recs]
    assert all(same_pose(r["pose"], x["pose"]) for r, x in zip(recs, back))
    io.write_packets(b, back)
    again = list(io.read_packets(b))
    for x, y in zip(back, again):
        qx, qy = io.pose_to_dict(x["pose"]), io.pose_to_dict(y["pose"])
        assert all(abs(qx[k] - qy[k]) <= 1e-12 * max(abs(qx[k]), 1e-3) for k in io.POSE_KEYS)


def test_simulator_export_reads_back_equal(tmp_path):
    _, sessions, _ = sim.generate_world(sim.preset("three-robot-loop"))
    recs = list(sim.export_packets(sessions))
    p = tmp_path / "p.jsonl"
    io.write_packets(p, recs)
    back = list(io.read_packets(p))
    assert [(r["session_id"], r["keyframe_index"]) for r in back] == \
           [(r["session_id"], r["keyframe_index"]) for r in recs]
    assert all(same_pose(r["pose"], x["pose"]) for r, x in zip(recs, back))


def test_unknown_fields_are_dropped_and_attachments_kept(tmp_path):
    p = tmp_path / "x.jsonl"
    rec = {"session_id": 0, "keyframe_index": 0, "timestamp": 0.0, "future": [1, 2],
           "pose": {**io.pose_to_dict(Sim3.identity()), "extra": 1},
           "attachments": {"image_path": "img/0.png", "other": "x"}}
    p.write_text(json.dumps(rec) + "\n")
    (back,) = io.read_packets(p)
    assert "future" not in back and back["attachments"] == {"image_path": "img/0.png"}
    q = tmp_path / "y.jsonl"
    io.write_packets(q, [back])
    out = json.loads(q.read_text())
    assert set(out) == {"session_id", "keyframe_index", "timestamp", "pose", "attachments"}


@pytest.mark.parametrize("mutate, needle", [
    (lambda r: r, "duplicate"),
    (lambda r: {**r, "keyframe_index": 1, "pose": {**r["pose"], "s": 0.0}}, "non-positive scale"),
    (lambda r: {k: v for k, v in r.items() if k != "timestamp"} | {"keyframe_index": 1},
     "lacks"),
    (lambda r: {**r, "keyframe_index": -1}, "non-negative"),
])
def test_bad_packets(tmp_path, mutate, needle):
    good = {"session_id": 0, "keyframe_index": 0, "timestamp": 0.0,
            "pose": io.pose_to_dict(Sim3.identity())}
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(good) + "\n" + json.dumps(mutate(good)) + "\n")
    with pytest.raises(io.ParseError) as info:
        list(io.read_packets(p))
    assert info.value.line == 2 and needle in str(info.value)


def test_invalid_json_line(tmp_path):
    p = tmp_path / "j.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(io.ParseError):
        list(io.read_packets(p))


def test_loops_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    edges = [LoopEdge((0, 3), (1, 7), lie.random_sim3(rng)),
             LoopEdge((2, 1), (2, 40), lie.random_sim3(rng), InformationWeights(2.0, 3.0, 4.0))]
    p = tmp_path / "l.jsonl"
    io.write_loops(p, edges)
    back = io.read_loops(p)
    assert [(e.endpoint_a, e.endpoint_b, e.weights) for e in back] == \
           [(e.endpoint_a, e.endpoint_b, e.weights) for e in edges]
    assert all(close9(a.measurement.matrix(), b.measurement.matrix()) for a, b in zip(edges, back))
    p.write_text('{"a": [0], "b": [1, 2], "pose": {}}\n')
    with pytest.raises(io.ParseError):
        io.read_loops(p)


def test_csv_formatting():
    assert io.fmt(0.1 + 0.2) == "0.3"
    assert io.fmt(-0.0) == "0"
    assert io.fmt(1.0 / 3.0) == "0.333333333333"


def test_manifest_rejects_unknown_keys(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"world": {"preset": "three-robot-loop"}, "colour": 1}))
    with pytest.raises(ValueError, match="unknown manifest keys"):
        io.load_manifest(p)
    m = io.RunManifest.from_dict({"world": {"preset": "three-robot-loop"},
                                  "alarm": {"n_min": 5, "bogus": 1}})
    with pytest.raises(ValueError, match="unknown alarm keys"):
        m.alarm_config()
    m = io.RunManifest.from_dict({"world": {"preset": "three-robot-loop", "wobble": 1}})
    with pytest.raises(ValueError):
        m.world_config()


def test_manifest_views():
    m = io.RunManifest.from_dict({"world": {"preset": "kitti-like-loop", "num_sessions": 5},
                                  "alarm": {"tau_base": 0.3}, "optimizer": {"max_iterations": 7},
                                  "fuse": {"mode": "full"}, "seed": 11})
    w = m.world_config()
    assert w.num_sessions == 5 and w.rng_seed == 11
    assert m.world_config(seed=3).rng_seed == 3
    assert m.alarm_config().tau_base == 0.3
    assert m.optimizer_config().max_iterations == 7
    assert m.fuse_config().mode == "full" and m.fuse_config(alarm=False).alarm is False
