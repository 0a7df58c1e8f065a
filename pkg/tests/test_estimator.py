import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ivcace.em import FitConfig, fit_em
from ivcace.estimator import IVCaceEstimator
from ivcace.model import cace
from ivcace.simulation import SINGLE_COV_SPEC, generate, scenario_params


def test_matches_functional_core():
    ds = generate(scenario_params("mcar"), 1200, seed=1)
    est = IVCaceEstimator(n_restarts=1, complier_response_yz=True).fit(ds.x, ds.z, ds.d, ds.y)
    direct = fit_em(ds, SINGLE_COV_SPEC, FitConfig(n_restarts=1, complier_response_yz=True))
    assert est.loglik_ == pytest.approx(direct.loglik, abs=1e-9)
    assert est.cace((2,)) == pytest.approx(cace(direct.params, SINGLE_COV_SPEC.x_row((2,))))
    assert est.converged_


def test_sklearn_param_protocol():
    est = IVCaceEstimator(n_restarts=3)
    params = est.get_params()
    assert params["n_restarts"] == 3
    est2 = clone(est).set_params(n_restarts=1)
    assert est2.get_params()["n_restarts"] == 1


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        IVCaceEstimator().cace((1,))
