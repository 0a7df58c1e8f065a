"""Shared test utilities: random model draws and brute-force oracles.

The oracles deliberately avoid the package's vectorized lattice code:
everything here loops over configurations one at a time using only the
scalar probability functions, so agreement is meaningful.
"""

from __future__ import annotations

import itertools

import numpy as np

from ivcace.em import latent_support
from ivcace.model import (
    CovariateSpec,
    Dataset,
    ParamSet,
    cell_joint_prob,
)


def random_params(spec: CovariateSpec, rng, scale: float = 0.8) -> ParamSet:
    """A random interior ParamSet: Dirichlet cell mass, gaussian coefficients."""
    w = rng.dirichlet(np.ones(spec.n_cells) * 2.0)
    coef = lambda *shape: rng.normal(0.0, scale, size=shape)
    return ParamSet(
        spec=spec,
        w=w,
        alpha=coef(spec.m),
        delta_a=coef(spec.m),
        delta_c=coef(spec.m),
        beta_n=coef(spec.m),
        beta_a=coef(spec.m),
        beta_c0=coef(spec.m),
        beta_c1=coef(spec.m),
        theta=coef(spec.n_miss, 3, spec.k),
        gamma=coef(spec.n_miss, 3),
        eta=coef(spec.n_miss),
        eta_yz=coef(spec.n_miss),
    )


def full_lattice(spec: CovariateSpec):
    """Every (r, cell, u, z, y) configuration, structural zeros included."""
    for r in itertools.product((0, 1), repeat=spec.n_miss):
        for cell in spec.cells():
            for u in range(3):
                for z in range(2):
                    for y in range(2):
                        yield r, cell, u, z, y


def observed_stratum_prob(params: ParamSet, r, obs_values, d, z, y) -> float:
    """P(observed stratum) by summing cell_joint_prob over what is latent.

    obs_values maps covariate index -> observed level code; covariates
    absent from the map are summed over their levels.  The compliance
    class is summed over the support of (d, z).
    """
    spec = params.spec
    total = 0.0
    for cell in spec.cells():
        if any(cell[i] != v for i, v in obs_values.items()):
            continue
        for u in latent_support(d, z):
            if (u == 0 and d == 1) or (u == 2 and d == 0) or (u == 1 and d != z):
                continue
            total += cell_joint_prob(params, r, cell, u, z, y)
    return total


def record_pattern(spec: CovariateSpec, xrow) -> tuple[int, ...]:
    return tuple(int(xrow[i] >= 0) for i in spec.miss_idx)


def brute_loglik(params: ParamSet, dataset: Dataset) -> float:
    """Observed-data log-likelihood by per-record lattice enumeration."""
    spec = params.spec
    ll = 0.0
    for i in range(len(dataset)):
        xrow = dataset.x[i]
        r = record_pattern(spec, xrow)
        obs = {j: int(xrow[j]) for j in range(spec.n_cov) if xrow[j] >= 0}
        p = observed_stratum_prob(
            params, r, obs, int(dataset.d[i]), int(dataset.z[i]), int(dataset.y[i])
        )
        ll += np.log(p)
    return float(ll)


def brute_posterior(params: ParamSet, r, obs_values, d, z, y):
    """Posterior over (cell, u) for one observed stratum, by Bayes' rule."""
    spec = params.spec
    post = {}
    for cell in spec.cells():
        if any(cell[i] != v for i, v in obs_values.items()):
            continue
        for u in latent_support(d, z):
            post[(cell, int(u))] = cell_joint_prob(params, r, cell, u, z, y)
    total = sum(post.values())
    return {k: v / total for k, v in post.items()}


def small_dataset(spec: CovariateSpec, params: ParamSet, n: int, rng) -> Dataset:
    """Forward-simulate n records from params, masking by the response draws."""
    from ivcace.simulation import sample_from_params

    return sample_from_params(params, n, seed=int(rng.integers(2**31)))
