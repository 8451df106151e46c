import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from scalefuse import lie, sim
from scalefuse.estimators import MultiSessionFuser, Sim3Aligner


def test_aligner_fit_transform_score():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 3))
    G = lie.random_sim3(rng)
    y = G @ X
    est = Sim3Aligner().fit(X, y)
    assert np.allclose(est.transform(X), y, atol=1e-9)
    assert est.score(X, y) > -1e-9
    assert est.scale_ == pytest.approx(G.scale, rel=1e-9)
    rigid = Sim3Aligner(with_scale=False).fit(X, y)
    assert rigid.scale_ == 1.0


def test_aligner_params_and_validation():
    est = Sim3Aligner(with_scale=False)
    assert est.get_params() == {"with_scale": False}
    assert clone(est).with_scale is False
    with pytest.raises(NotFittedError):
        est.transform(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Sim3Aligner().fit(np.zeros((5, 2)), np.zeros((5, 2)))


def test_fuser_on_noiseless_preset():
    gt, sessions, loops = sim.generate_world(sim.preset("three-robot-loop"))
    fuser = MultiSessionFuser().fit(list(sim.export_packets(sessions)), loops)
    assert fuser.final_chi2_ < 1e-10
    pred = fuser.predict()
    assert pred.shape == (len(gt.poses), 3)
    err = Sim3Aligner().fit(pred, gt.positions()).score(pred, gt.positions())
    assert err > -1e-6
    assert np.allclose(fuser.world_scales(), 1.0, atol=1e-6)
    assert set(fuser.get_params()) >= {"mode", "alarm", "tau_base", "max_iterations"}
