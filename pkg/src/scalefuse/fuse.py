"""Server-side fusion: packets and loop candidates in, optimized multi-session graph out."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .alarm import (AlarmConfig, AlarmVerdict, Decision, LoopCandidate, TransactionLog,
                    insert_loops, make_candidate, transactional_insert)
from .graph import ODOMETRY_WEIGHTS, LoopEdge, PoseGraph
from .optimizer import OptimizeConfig, OptimizeMode, optimize, optimize_pipeline

logger = logging.getLogger(__name__)

MODES = ("pipeline", "full", "anchor-only", "scale-locked")
ANCHOR_INITS = ("keep", "unit-scale")


@dataclass
class FuseConfig:
    mode: str = "pipeline"
    alarm: bool = True
    # "keep": optimize from the state the alarm left behind.
    # "unit-scale": rebuild from packets and re-align sessions through the
    # accepted loops with scale-free (rotation + translation) corrections, so
    # every anchor starts at unit scale.
    anchor_init: str = "keep"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.anchor_init not in ANCHOR_INITS:
            raise ValueError(f"anchor_init must be one of {ANCHOR_INITS}, got {self.anchor_init!r}")
        self.alarm = bool(self.alarm)


@dataclass
class FuseResult:
    graph: PoseGraph
    candidates: list
    verdicts: list
    reports: list = field(default_factory=list)
    rollback_exact: list = field(default_factory=list)

    @property
    def final_chi2(self):
        return self.reports[-1].final_chi2 if self.reports else self.graph.weighted_chi2()

    def accepted_edges(self):
        return [c.edge for c, v in zip(self.candidates, self.verdicts) if v.accepted]


def build_graph(packets, weights=ODOMETRY_WEIGHTS):
    """One session chain per ``session_id``; odometry from consecutive packet poses."""
    by_session = {}
    for rec in packets:
        by_session.setdefault(int(rec["session_id"]), {})[int(rec["keyframe_index"])] = rec["pose"]
    graph = PoseGraph()
    for s in sorted(by_session):
        idx = sorted(by_session[s])
        if idx != list(range(len(idx))):
            raise ValueError(f"session {s}: keyframe indices are not 0..{len(idx) - 1}")
        graph.add_session(s, [by_session[s][k] for k in idx], weights=weights)
    graph.fix_gauge()
    return graph


def _as_edge(loop):
    return loop.edge if isinstance(loop, LoopCandidate) else loop


def fuse(packets, loops, alarm_config: AlarmConfig | None = None,
         opt_config: OptimizeConfig | None = None, config: FuseConfig | None = None):
    config = config or FuseConfig()
    opt_config = opt_config or OptimizeConfig()
    packets = list(packets)
    graph = build_graph(packets)
    candidates = sorted((make_candidate(graph, _as_edge(l)) for l in loops),
                        key=LoopCandidate.sort_key)
    log = TransactionLog()
    if config.alarm:
        verdicts = transactional_insert(graph, candidates, alarm_config, opt_config, log)
    else:
        verdicts = insert_loops(graph, candidates, use_scale=config.anchor_init == "keep")
    if config.anchor_init == "unit-scale" and config.alarm:
        graph = build_graph(packets)
        kept = [c for c, v in zip(candidates, verdicts) if v.accepted]
        ids = insert_loops(graph, kept, use_scale=False)
        for v, new in zip((v for v in verdicts if v.accepted), ids):
            v.edge_id = new.edge_id
    if config.mode == "pipeline":
        reports = list(optimize_pipeline(graph, opt_config))
    else:
        reports = [optimize(graph, OptimizeMode(config.mode), opt_config)]
    logger.info("fused %d keyframes; %d/%d loops accepted; chi2 %.3g", graph.num_keyframes(),
                sum(v.accepted for v in verdicts), len(verdicts), reports[-1].final_chi2)
    return FuseResult(graph, candidates, verdicts, reports, log.rollback_exact)


def world_trajectory(graph: PoseGraph):
    """World poses concatenated in (session, index) order."""
    return list(graph.world_poses().values())


def world_positions(graph: PoseGraph):
    return np.array([p.translation for p in world_trajectory(graph)])


__all__ = ["FuseConfig", "FuseResult", "build_graph", "fuse", "world_trajectory",
           "world_positions", "AlarmVerdict", "Decision", "LoopEdge"]
