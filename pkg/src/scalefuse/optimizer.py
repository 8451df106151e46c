"""Levenberg-Marquardt on the Sim(3) manifold of a :class:`PoseGraph`."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import lie

logger = logging.getLogger(__name__)

DENSE_LIMIT = 1500


class OptimizeMode(enum.Enum):
    FULL_SIM3 = "full"
    ANCHOR_ONLY = "anchor-only"
    SCALE_LOCKED = "scale-locked"


class OptimizationAborted(RuntimeError):
    """Non-finite residual or Jacobian; the graph was restored before raising."""


@dataclass
class OptimizeConfig:
    max_iterations: int = 100
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    max_damping: float = 1e10
    absolute_chi2_tolerance: float = 1e-14
    relative_decrease_tolerance: float = 1e-9
    # Pin keyframe 0 of each session in modes that free keyframes; removes the
    # per-session null space (anchor, keyframes) -> (anchor G^-1, G keyframes).
    pin_session_origin: bool = True

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        for name in ("initial_damping", "damping_up", "damping_down", "max_damping"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("absolute_chi2_tolerance", "relative_decrease_tolerance"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")


@dataclass
class OptReport:
    mode: str
    iterations: int = 0
    initial_chi2: float = 0.0
    final_chi2: float = 0.0
    converged: bool = False
    chi2_trace: list = field(default_factory=list)
    message: str = ""

    def to_dict(self):
        return {"mode": self.mode, "iterations": self.iterations,
                "initial_chi2": self.initial_chi2, "final_chi2": self.final_chi2,
                "converged": self.converged, "message": self.message}


def free_vertices(graph, mode, config=None):
    config = config or OptimizeConfig()
    mode = OptimizeMode(mode)
    keys = []
    for key in graph.vertex_keys():
        if graph.is_fixed(key):
            continue
        if key[0] == "kf":
            if mode is OptimizeMode.ANCHOR_ONLY:
                continue
            if config.pin_session_origin and key[2] == 0:
                continue
        keys.append(key)
    return keys


def _dof(mode):
    return 6 if OptimizeMode(mode) is OptimizeMode.SCALE_LOCKED else 7


def _accumulate(blocks, key, blk):
    blocks[key] = blocks[key] + blk if key in blocks else blk


def build_normal_system(graph, free, mode=OptimizeMode.FULL_SIM3, sparse=True):
    """Assemble ``H = sum J^T W J`` and ``b = -sum J^T W e`` over all edges.

    In scale-locked mode the sigma column of every block is dropped, so the
    system is 6 per vertex. Returns ``(H, b)`` with ``H`` sparse CSC or dense.
    """
    d = _dof(mode)
    index = {key: n for n, key in enumerate(free)}
    n = d * len(free)
    b = np.zeros(n)
    blocks = {}
    for kind, edge in graph.edges():
        if kind == "odometry":
            if (("kf", edge.session, edge.from_index) not in index
                    and ("kf", edge.session, edge.to_index) not in index):
                continue
            e, jac = graph.linearize_odometry(edge)
        else:
            (r, i), (s, j) = edge.endpoint_a, edge.endpoint_b
            if not any(k in index for k in (("anchor", r), ("kf", r, i),
                                            ("anchor", s), ("kf", s, j))):
                continue
            e, jac = graph.linearize_loop(edge)
        w = edge.weights.diagonal()
        merged = {}
        for key, J in jac:
            if key in index:
                J = J[:, :d]
                merged[key] = merged[key] + J if key in merged else J
        items = sorted(merged.items(), key=lambda kv: index[kv[0]])
        for pos, (ka, Ja) in enumerate(items):
            a = index[ka]
            WJa = w[:, None] * Ja
            b[a * d:(a + 1) * d] -= WJa.T @ e
            # upper blocks only, mirrored, so H is symmetric to the last bit
            for kb, Jb in items[pos:]:
                c = index[kb]
                blk = WJa.T @ Jb
                if a == c:
                    blk = 0.5 * (blk + blk.T)
                    _accumulate(blocks, (a, a), blk)
                else:
                    _accumulate(blocks, (a, c), blk)
                    _accumulate(blocks, (c, a), blk.T)
    if not np.all(np.isfinite(b)) or not all(np.all(np.isfinite(v)) for v in blocks.values()):
        raise FloatingPointError("non-finite Jacobian or residual")
    if not sparse:
        H = np.zeros((n, n))
        for (a, c), blk in blocks.items():
            H[a * d:(a + 1) * d, c * d:(c + 1) * d] = blk
        return H, b
    rows, cols, vals = [], [], []
    base_r, base_c = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    for (a, c), blk in sorted(blocks.items()):
        rows.append((a * d + base_r).ravel())
        cols.append((c * d + base_c).ravel())
        vals.append(blk.ravel())
    if rows:
        H = scipy.sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows),
                                                            np.concatenate(cols))), shape=(n, n))
    else:
        H = scipy.sparse.csc_matrix((n, n))
    return H, b


def apply_step(graph, free, delta, mode=OptimizeMode.FULL_SIM3):
    """Left retraction ``v <- exp(delta_v) @ v`` for each free vertex."""
    mode = OptimizeMode(mode)
    d = len(delta) // max(len(free), 1) if free else 7
    for n, key in enumerate(free):
        if mode is OptimizeMode.ANCHOR_ONLY and key[0] != "anchor":
            continue
        step = np.zeros(7)
        step[:d] = delta[n * d:(n + 1) * d]
        if mode is OptimizeMode.SCALE_LOCKED:
            step[6] = 0.0
        if not np.any(step):
            continue
        graph.set_pose(key, lie.compose(lie.exp(step), graph.get_pose(key)))


def _solve(H, b, lam):
    n = H.shape[0]
    diag = H.diagonal()
    damp = lam * np.maximum(diag, 1e-9)
    if n <= DENSE_LIMIT:
        A = H.toarray() if scipy.sparse.issparse(H) else np.array(H)
        A[np.diag_indices(n)] += damp
        try:
            c = scipy.linalg.cho_factor(A, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        return scipy.linalg.cho_solve(c, b, check_finite=False)
    A = (H + scipy.sparse.diags(damp)).tocsc()
    try:
        x = scipy.sparse.linalg.splu(A, permc_spec="COLAMD").solve(b)
    except RuntimeError:
        return None
    return x if np.all(np.isfinite(x)) else None


def _chi2(graph):
    try:
        c = graph.weighted_chi2()
    except (ValueError, FloatingPointError):
        return np.inf
    return c if np.isfinite(c) else np.inf


def optimize(graph, mode=OptimizeMode.FULL_SIM3, config=None):
    """Run LM in place; return an :class:`OptReport`."""
    config = config or OptimizeConfig()
    mode = OptimizeMode(mode)
    free = free_vertices(graph, mode, config)
    report = OptReport(mode=mode.value)
    token = graph.snapshot()
    try:
        chi2 = graph.weighted_chi2()
    except ValueError as exc:
        graph.restore(token)
        graph.discard(token)
        raise OptimizationAborted(f"initial residual not computable: {exc}") from exc
    if not np.isfinite(chi2):
        graph.discard(token)
        raise OptimizationAborted("initial chi2 is not finite")
    report.initial_chi2 = report.final_chi2 = chi2
    report.chi2_trace.append(chi2)
    if not free or chi2 < config.absolute_chi2_tolerance:
        report.converged = True
        report.message = "no free vertices" if not free else "already converged"
        graph.discard(token)
        return report

    lam = config.initial_damping
    try:
        for it in range(config.max_iterations):
            try:
                H, b = build_normal_system(graph, free, mode)
            except (ValueError, FloatingPointError) as exc:
                graph.restore(token)
                raise OptimizationAborted(f"linearization failed at iteration {it}: {exc}") from exc
            report.iterations = it + 1
            accepted = False
            while lam <= config.max_damping:
                delta = _solve(H, b, lam)
                if delta is None:
                    lam *= config.damping_up
                    continue
                before = {key: graph.get_pose(key) for key in free}
                try:
                    apply_step(graph, free, delta, mode)
                    new_chi2 = _chi2(graph)
                except ValueError:
                    new_chi2 = np.inf
                if new_chi2 < chi2:
                    accepted = True
                    lam = max(lam * config.damping_down, 1e-15)
                    break
                for key, pose in before.items():
                    graph.set_pose(key, pose)
                lam *= config.damping_up
            if not accepted:
                report.message = "damping limit reached"
                break
            decrease = chi2 - new_chi2
            chi2 = new_chi2
            report.chi2_trace.append(chi2)
            if chi2 < config.absolute_chi2_tolerance:
                report.converged = True
                report.message = "absolute tolerance"
                break
            if decrease < config.relative_decrease_tolerance * (chi2 + decrease):
                report.converged = True
                report.message = "relative tolerance"
                break
        else:
            report.message = "max iterations"
    finally:
        try:
            graph.discard(token)
        except ValueError:
            pass
    report.final_chi2 = chi2
    logger.debug("optimize %s: %d it, chi2 %.3g -> %.3g (%s)", mode.value, report.iterations,
                 report.initial_chi2, chi2, report.message)
    return report


def optimize_pipeline(graph, config=None):
    """Anchor-only alignment followed by full Sim(3) refinement."""
    first = optimize(graph, OptimizeMode.ANCHOR_ONLY, config)
    second = optimize(graph, OptimizeMode.FULL_SIM3, config)
    return first, second
