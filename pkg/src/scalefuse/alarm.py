"""Scale Collapse Alarm: rotation pre-filter, adaptive scale-jump check, rollback."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from . import lie
from .graph import LoopEdge, PoseGraph, align_component
from .optimizer import OptimizationAborted, OptimizeConfig, OptimizeMode, optimize

logger = logging.getLogger(__name__)


class Decision(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED_CRITERION1 = "rejected-criterion1"
    REJECTED_SCALE_JUMP = "rejected-scale-jump"
    REJECTED_ERROR = "rejected-error"


@dataclass(frozen=True)
class AlarmConfig:
    n_min: int = 30
    theta_min: float = 30.0
    tau_base: float = 0.2
    w_rot: float = 0.3
    w_gap: float = 0.2
    n_ref: int = 100
    tau_max: float = 0.8

    def __post_init__(self):
        if self.n_min < 1 or self.n_ref < 1:
            raise ValueError("n_min and n_ref must be >= 1")
        if not self.theta_min > 0:
            raise ValueError("theta_min must be positive")
        if not 0 < self.tau_base <= self.tau_max:
            raise ValueError("need 0 < tau_base <= tau_max")
        if self.w_rot < 0 or self.w_gap < 0:
            raise ValueError("weights must be non-negative")


@dataclass(frozen=True)
class LoopCandidate:
    """A loop edge plus the context the alarm needs.

    ``keyframe_gap`` and ``accumulated_rotation`` (degrees) are zero for
    inter-session candidates. ``is_false_positive`` is evaluation metadata and
    is never read by the alarm.
    """

    edge: LoopEdge
    keyframe_gap: int = 0
    accumulated_rotation: float = 0.0
    is_false_positive: bool | None = None

    @property
    def same_session(self):
        return not self.edge.inter_session

    def sort_key(self):
        (r, i), (s, j) = self.edge.endpoint_a, self.edge.endpoint_b
        return (min(r, s), max(r, s)) + ((i, j) if r <= s else (j, i))


@dataclass
class AlarmVerdict:
    decision: Decision
    delta_s: float = 0.0
    tau: float = 0.0
    theta_max: float = 0.0
    g_max: int = 0
    edge_id: int | None = None
    label: str = ""
    error: str = ""

    @property
    def accepted(self):
        return self.decision is Decision.ACCEPTED


def accumulated_rotation(rotations, i, j):
    """Sum of absolute geodesic angles between consecutive rotations in ``[i, j]``, degrees."""
    n = len(rotations)
    if not (0 <= i < j < n):
        raise IndexError(f"need 0 <= i < j < {n}, got i={i}, j={j}")
    total = 0.0
    for k in range(i, j):
        Ra = getattr(rotations[k], "rotation", rotations[k])
        Rb = getattr(rotations[k + 1], "rotation", rotations[k + 1])
        total += lie.rotation_angle(np.asarray(Ra).T @ np.asarray(Rb))
    return float(np.degrees(total))


def make_candidate(graph: PoseGraph, edge: LoopEdge, is_false_positive=None):
    """Fill gap and accumulated rotation from the graph's session-local poses."""
    (r, i), (s, j) = edge.endpoint_a, edge.endpoint_b
    if r != s:
        return LoopCandidate(edge, 0, 0.0, is_false_positive)
    lo, hi = sorted((i, j))
    theta = accumulated_rotation(graph.local_poses(r), lo, hi)
    return LoopCandidate(edge, hi - lo, theta, is_false_positive)


def criterion1_check(candidate: LoopCandidate, config: AlarmConfig) -> AlarmVerdict:
    """Reject long-gap, low-rotation same-session loops."""
    if (candidate.same_session and candidate.keyframe_gap > config.n_min
            and candidate.accumulated_rotation < config.theta_min):
        return AlarmVerdict(Decision.REJECTED_CRITERION1, label=candidate.edge.label())
    return AlarmVerdict(Decision.ACCEPTED, label=candidate.edge.label())


def adaptive_threshold(candidates, config: AlarmConfig):
    """Return ``(tau, theta_max, g_max)`` for a batch."""
    if not candidates:
        raise ValueError("adaptive threshold needs a non-empty batch")
    theta_max = max(c.accumulated_rotation for c in candidates)
    g_max = max(c.keyframe_gap for c in candidates)
    tau = (config.tau_base + theta_max / 360.0 * config.w_rot
           + g_max / config.n_ref * config.w_gap)
    return min(config.tau_max, tau), theta_max, g_max


def mean_scale_change(before, after, affected=None):
    """Mean of ``after / before - 1`` over the affected keyframes.

    ``before``/``after`` map keyframe keys to scales (or are aligned arrays).
    """
    if isinstance(before, dict):
        if affected is None:
            affected = sorted(before)
        if set(affected) - set(before) or set(affected) - set(after):
            raise ValueError("snapshots do not cover the affected keyframe set")
        b = np.array([before[k] for k in affected])
        a = np.array([after[k] for k in affected])
    else:
        b, a = np.asarray(before, dtype=float), np.asarray(after, dtype=float)
        if b.shape != a.shape:
            raise ValueError("scale snapshots have different sizes")
    if b.size == 0:
        raise ValueError("no affected keyframes")
    if np.any(b <= 0) or np.any(a <= 0):
        raise ValueError("scales must be positive")
    return float(np.mean(a / b - 1.0))


def _scales(graph, keys):
    return dict(zip(keys, graph.world_scales(keys)))


def merge_components(graph: PoseGraph, edge: LoopEdge, use_scale=True):
    """Insert ``edge``; if it joins two components, align the higher-id one onto the other.

    Returns the new edge id. The gauge is re-fixed after a merge.
    """
    comps = graph.session_components()
    r, s = edge.endpoint_a[0], edge.endpoint_b[0]
    comp_r = next(c for c in comps if r in c)
    comp_s = next(c for c in comps if s in c)
    edge_id = graph.add_loop(edge)
    if comp_r != comp_s:
        moving = comp_s if comp_s[0] > comp_r[0] else comp_r
        align_component(graph, graph.loop(edge_id), set(moving), use_scale=use_scale)
        graph.fix_gauge()
    return edge_id


_insert = merge_components


def insert_loops(graph: PoseGraph, candidates, use_scale=True):
    """Insert every candidate without checks (alarm off); return verdicts."""
    verdicts = []
    for cand in sorted(candidates, key=LoopCandidate.sort_key):
        edge_id = _insert(graph, cand.edge, use_scale)
        verdicts.append(AlarmVerdict(Decision.ACCEPTED, edge_id=edge_id, label=cand.edge.label()))
    return verdicts


@dataclass
class TransactionLog:
    """Per-rejection evidence that rollback restored the graph exactly."""

    rollback_exact: list = field(default_factory=list)


def transactional_insert(graph: PoseGraph, candidates, config: AlarmConfig | None = None,
                         opt_config: OptimizeConfig | None = None, log: TransactionLog | None = None):
    """Insert-optimize-check-rollback over a batch, in deterministic order.

    Each accepted insertion that merges two session components first aligns
    the new component through the loop itself, so the scale change measured
    afterwards is the one caused by optimization.
    """
    config = config or AlarmConfig()
    opt_config = opt_config or OptimizeConfig()
    candidates = sorted(candidates, key=LoopCandidate.sort_key)
    if not candidates:
        return []
    tau, theta_max, g_max = adaptive_threshold(candidates, config)
    verdicts = []
    for cand in candidates:
        common = dict(tau=tau, theta_max=theta_max, g_max=g_max, label=cand.edge.label())
        if criterion1_check(cand, config).decision is Decision.REJECTED_CRITERION1:
            verdicts.append(AlarmVerdict(Decision.REJECTED_CRITERION1, **common))
            continue
        reference = graph.copy() if log is not None else None
        token = graph.snapshot()
        sessions = sorted({cand.edge.endpoint_a[0], cand.edge.endpoint_b[0]})
        affected = [k for s in sessions for k in graph.keyframe_keys(s)]
        try:
            edge_id = _insert(graph, cand.edge, use_scale=True)
            before = _scales(graph, affected)
            optimize(graph, OptimizeMode.FULL_SIM3, opt_config)
            delta_s = mean_scale_change(before, _scales(graph, affected), affected)
        except (OptimizationAborted, ValueError) as exc:
            graph.restore(token)
            graph.discard(token)
            verdicts.append(AlarmVerdict(Decision.REJECTED_ERROR, error=str(exc), **common))
            continue
        if abs(delta_s) > tau:
            graph.restore(token)
            if log is not None:
                log.rollback_exact.append(graph.state_equal(reference))
            verdicts.append(AlarmVerdict(Decision.REJECTED_SCALE_JUMP, delta_s=delta_s, **common))
            logger.info("scale jump %.3f > %.3f: rolled back %s", delta_s, tau, cand.edge.label())
        else:
            verdicts.append(AlarmVerdict(Decision.ACCEPTED, delta_s=delta_s, edge_id=edge_id,
                                         **common))
        graph.discard(token)
    return verdicts
