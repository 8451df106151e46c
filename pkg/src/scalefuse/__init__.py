"""Multi-session Sim(3) pose-graph fusion with scale-collapse protection."""

from .lie import Sim3
from .graph import PoseGraph, LoopEdge, OdometryEdge, InformationWeights
from .optimizer import OptimizeConfig, OptimizeMode, optimize, optimize_pipeline
from .alarm import AlarmConfig, Decision, transactional_insert

__all__ = ["Sim3", "PoseGraph", "LoopEdge", "OdometryEdge", "InformationWeights",
           "OptimizeConfig", "OptimizeMode", "optimize", "optimize_pipeline",
           "AlarmConfig", "Decision", "transactional_insert"]
__version__ = "0.1.0"
