"""Shared builders and numerical oracles for the test suite."""

import numpy as np

from scalefuse import lie
from scalefuse.graph import LOOP_WEIGHTS, LoopEdge, PoseGraph
from scalefuse.lie import Sim3


def random_graph(rng, sessions=2, keyframes=5, noise=0.0):
    """Sessions with random anchors and chains; loops exact unless ``noise`` > 0."""
    g = PoseGraph()
    for s in range(sessions):
        poses = [lie.random_sim3(rng, rot_scale=0.5, log_scale_std=0.2)]
        for _ in range(keyframes - 1):
            poses.append(lie.compose(poses[-1], lie.random_sim3(rng, 0.3, 1.0, 0.05)))
        g.add_session(s, poses)
        g.add_anchor(s, lie.random_sim3(rng, 1.0, 2.0, 0.3))
    return g


def consistent_loop(g, a, b, perturb=None):
    Z = lie.compose(g.world_pose(*a).inverse(), g.world_pose(*b))
    if perturb is not None:
        Z = lie.compose(Z, lie.exp(perturb))
    return LoopEdge(a, b, Z, LOOP_WEIGHTS)


def left_fd(residual, pose, h=1e-6):
    """Central differences of ``residual(Exp(d) @ pose)`` with respect to ``d``."""
    cols = []
    for k in range(7):
        d = np.zeros(7)
        d[k] = h
        plus = residual(lie.compose(lie.exp(d), pose))
        minus = residual(lie.compose(lie.exp(-d), pose))
        cols.append((plus - minus) / (2 * h))
    return np.stack(cols, axis=1)


def loop_fd_blocks(g, edge, h=1e-6):
    """Finite-difference versions of the four loop Jacobian blocks."""
    (r, i), (s, j) = edge.endpoint_a, edge.endpoint_b
    keys = [("anchor", r), ("kf", r, i), ("anchor", s), ("kf", s, j)]
    blocks = []
    for key in keys:
        original = g.get_pose(key)

        def res(p, key=key):
            g.set_pose(key, p)
            try:
                return g.loop_residual(edge)
            finally:
                g.set_pose(key, original)

        blocks.append(left_fd(res, original, h))
    return blocks


def random_well_conditioned_edge(rng):
    """Two-session graph plus a loop whose residual is moderate (well away from pi)."""
    g = random_graph(rng, sessions=2, keyframes=3)
    a, b = (0, int(rng.integers(3))), (1, int(rng.integers(3)))
    xi = rng.normal(size=7)
    xi *= rng.uniform(0.05, 0.8) / np.linalg.norm(xi)
    return g, consistent_loop(g, a, b, perturb=xi)


def relative_error(A, B):
    return float(np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12))


def pure_scale(s):
    return Sim3(np.eye(3), np.zeros(3), s)
