"""Estimator-style wrappers for trajectory alignment and multi-session fusion."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import evaluation
from ._validation import check_point_pairs, check_points
from .alarm import AlarmConfig
from .fuse import FuseConfig, fuse, world_positions
from .optimizer import OptimizeConfig


class Sim3Aligner(TransformerMixin, BaseEstimator):
    """Closed-form similarity alignment of point trajectories.

    ``fit(X, y)`` finds ``T`` with ``T(X) ~ y``; ``transform`` applies it and
    ``score`` returns the negative ATE RMSE so that larger is better.
    """

    def __init__(self, with_scale=True):
        self.with_scale = with_scale

    def fit(self, X, y):
        X, y = check_point_pairs(X, y)
        T = evaluation.umeyama_sim3(X, y, with_scale=self.with_scale)
        self.transform_ = T
        self.rotation_, self.translation_, self.scale_ = T.rotation, T.translation, T.scale
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_ @ check_points(X, min_samples=1)

    predict = transform

    def score(self, X, y):
        X, y = check_point_pairs(X, y)
        err = np.linalg.norm(self.transform(X) - y, axis=1)
        return -float(np.sqrt(np.mean(err**2)))


class MultiSessionFuser(BaseEstimator):
    """Fuse keyframe packets and loop candidates into one world trajectory.

    ``fit(packets, loops)`` runs loop admission and optimization;
    ``predict()`` returns world keyframe positions in (session, index) order.
    """

    def __init__(self, mode="pipeline", alarm=True, anchor_init="keep", n_min=30,
                 theta_min=30.0, tau_base=0.2, w_rot=0.3, w_gap=0.2, n_ref=100, tau_max=0.8,
                 max_iterations=100):
        self.mode = mode
        self.alarm = alarm
        self.anchor_init = anchor_init
        self.n_min = n_min
        self.theta_min = theta_min
        self.tau_base = tau_base
        self.w_rot = w_rot
        self.w_gap = w_gap
        self.n_ref = n_ref
        self.tau_max = tau_max
        self.max_iterations = max_iterations

    def fit(self, packets, loops=()):
        alarm = AlarmConfig(self.n_min, self.theta_min, self.tau_base, self.w_rot, self.w_gap,
                            self.n_ref, self.tau_max)
        result = fuse(packets, loops, alarm, OptimizeConfig(max_iterations=self.max_iterations),
                      FuseConfig(self.mode, self.alarm, self.anchor_init))
        self.graph_ = result.graph
        self.verdicts_ = result.verdicts
        self.reports_ = result.reports
        self.final_chi2_ = result.final_chi2
        return self

    def predict(self, X=None):
        check_is_fitted(self, "graph_")
        return world_positions(self.graph_)

    def world_scales(self):
        check_is_fitted(self, "graph_")
        return self.graph_.world_scales()
