"""Similarity alignment of trajectories and translational error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import Sim3


class DegenerateAlignmentError(ValueError):
    """Point configuration does not determine a unique similarity."""


def _points(x):
    if len(x) and isinstance(x[0], Sim3):
        return np.array([p.translation for p in x])
    pts = np.asarray(x, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) point array, got shape {pts.shape}")
    return pts


def umeyama_sim3(estimated, reference, with_scale=True) -> Sim3:
    """Least-squares ``T`` minimizing ``sum |T(est_i) - ref_i|^2`` (closed form via SVD)."""
    X, Y = _points(estimated), _points(reference)
    if X.shape != Y.shape:
        raise ValueError(f"length mismatch: {len(X)} vs {len(Y)}")
    n = len(X)
    if n < 3:
        raise DegenerateAlignmentError("need at least 3 points")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var_x = float(np.sum(Xc**2)) / n
    cov = Yc.T @ Xc / n
    U, d, Vt = np.linalg.svd(cov)
    sx = np.linalg.svd(Xc, compute_uv=False)
    # collinear or coincident estimated points leave a rotation about the line free
    if var_x <= 1e-300 or sx[1] <= 1e-10 * max(sx[0], 1e-300):
        raise DegenerateAlignmentError("estimated points are collinear or coincident")
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateAlignmentError("cross-covariance is rank deficient")
    if np.array_equal(X, Y):
        return Sim3.identity()  # exact optimum; skips SVD round-off
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.sum(d * np.diag(S)) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return Sim3(R, t, s)


@dataclass(frozen=True)
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    num_poses: int
    alignment: Sim3

    def row(self, label):
        return {"label": label, "rmse": self.rmse, "mean": self.mean, "median": self.median,
                "max": self.max, "n": self.num_poses}


def ate_rmse(estimated, reference) -> AteReport:
    X, Y = _points(estimated), _points(reference)
    T = umeyama_sim3(X, Y)
    err = np.linalg.norm(T @ X - Y, axis=1)
    return AteReport(float(np.sqrt(np.mean(err**2))), float(np.mean(err)),
                     float(np.median(err)), float(np.max(err)), len(X), T)


def scale_trajectory(graph, session):
    """``[(index, world scale)]`` for one session, in index order."""
    if session not in graph.sessions:
        raise KeyError(f"unknown session {session}")
    keys = graph.keyframe_keys(session)
    return [(k[1], float(s)) for k, s in zip(keys, graph.world_scales(keys))]
