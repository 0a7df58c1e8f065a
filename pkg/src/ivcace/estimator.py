"""Thin scikit-learn style front end over the functional fitting core."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .em import FitConfig, fit_em
from .estimands import weighted_cace
from .model import CovariateSpec, Dataset, cace


class IVCaceEstimator(BaseEstimator):
    """Complier-effect estimator with the fit/get_params surface.

    Parameters mirror the covariate spec and the EM knobs; ``fit`` takes
    the covariate matrix (missing codes as -1) plus the z, d, y columns.
    """

    def __init__(
        self,
        names=("x",),
        levels=(2,),
        observed=(False,),
        max_em_iters=2000,
        loglik_tol=1e-8,
        param_tol=1e-6,
        n_restarts=5,
        init_seed=0,
        complier_response_yz=False,
    ):
        self.names = names
        self.levels = levels
        self.observed = observed
        self.max_em_iters = max_em_iters
        self.loglik_tol = loglik_tol
        self.param_tol = param_tol
        self.n_restarts = n_restarts
        self.init_seed = init_seed
        self.complier_response_yz = complier_response_yz

    def _spec(self) -> CovariateSpec:
        return CovariateSpec(
            names=tuple(self.names),
            levels=tuple(self.levels),
            observed=tuple(self.observed),
        )

    def fit(self, X, z, d, y):
        spec = self._spec()
        config = FitConfig(
            max_em_iters=self.max_em_iters,
            loglik_tol=self.loglik_tol,
            param_tol=self.param_tol,
            n_restarts=self.n_restarts,
            init_seed=self.init_seed,
            complier_response_yz=self.complier_response_yz,
        )
        ds = Dataset(x=np.asarray(X), z=z, d=d, y=y)
        result = fit_em(ds, spec, config)
        self.result_ = result
        self.params_ = result.params
        self.loglik_ = result.loglik
        self.converged_ = result.converged
        self.n_iter_ = result.iterations
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("call fit before querying estimates")

    def cace(self, cell) -> float:
        self._check_fitted()
        return cace(self.params_, self._spec().x_row(cell))

    def weighted_cace(self, weighting: str = "cell_probability") -> float:
        self._check_fitted()
        return weighted_cace(self.result_, weighting)
