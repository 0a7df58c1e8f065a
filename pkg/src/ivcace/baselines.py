"""Comparison estimators: complete-case EM, chained-equation imputation
under MAR, and the three covariate-adjustment baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .em import FitConfig, FitResult, fit_em
from .logistic import NewtonError, fit_binomial_logit, fit_multinomial_logit
from .model import CovariateSpec, Dataset, ModelError, ParamSet, cace, sigmoid


@dataclass
class ImputationConfig:
    n_imputations: int = 5
    n_cycles: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_imputations < 1 or self.n_cycles < 1:
            raise ModelError("n_imputations and n_cycles must be >= 1")


@dataclass
class EstimateCI:
    method: str
    estimate: float
    ci: tuple[float, float]
    variance: float | None = None


def _all_observed(spec: CovariateSpec) -> CovariateSpec:
    return CovariateSpec(names=spec.names, levels=spec.levels, observed=(True,) * spec.n_cov)


def rubin_pool(estimates, within=None):
    """Rubin's rules: (pooled mean, total variance, between variance).

    Total variance is None when per-imputation variances are not supplied.
    """
    est = np.asarray(estimates, dtype=float)
    m = len(est)
    mean = float(est.mean())
    between = float(est.var(ddof=1)) if m > 1 else 0.0
    if within is None:
        return mean, None, between
    wbar = float(np.mean(within))
    return mean, wbar + (1.0 + 1.0 / m) * between, between


def complete_case_fit(dataset, spec: CovariateSpec, config: FitConfig | None = None) -> FitResult:
    """Drop records with any missing covariate and fit without a missingness model."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_records(list(dataset), spec)
    mask = dataset.complete_mask()
    if not mask.any():
        raise ModelError("no complete cases")
    return fit_em(dataset.subset(mask), _all_observed(spec), config)


def impute_datasets(dataset, spec: CovariateSpec, impute: ImputationConfig) -> list[Dataset]:
    """Chained-equation imputation of the partially observed covariates.

    Each covariate is drawn from a (multinomial-)logistic model on all
    other covariates plus z, d and y with the (z, d, y) block fully
    interacted, refit every cycle; one independent chain per completed
    dataset.  The interactions matter: response often depends on joint
    (z, d, y) strata, and a main-effects-only conditional leaves bias
    behind even when the missingness itself is ignorable.  On model
    failure, falls back to the empirical level frequencies of the
    observed entries.
    """
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_records(list(dataset), spec)
    dataset.validate(spec)
    if spec.n_miss == 0 or (dataset.x >= 0).all():
        return [dataset] * impute.n_imputations

    rng = np.random.default_rng(impute.seed)
    n = len(dataset)
    out = []
    for _ in range(impute.n_imputations):
        x = dataset.x.copy()
        # initialize from observed empirical marginals
        for cov in spec.miss_idx:
            miss = x[:, cov] < 0
            obs = dataset.x[~(dataset.x[:, cov] < 0), cov]
            if obs.size == 0:
                obs = np.arange(1, spec.levels[cov] + 1)
            x[miss, cov] = rng.choice(obs, size=miss.sum())
        for _ in range(impute.n_cycles):
            for cov in spec.miss_idx:
                miss = dataset.x[:, cov] < 0
                if not miss.any():
                    continue
                q = spec.levels[cov]
                others = [i for i in range(spec.n_cov) if i != cov]
                z, d, y = (a.astype(float) for a in (dataset.z, dataset.d, dataset.y))
                design = np.column_stack(
                    [np.ones(n)]
                    + [x[:, i].astype(float) for i in others]
                    + [z, d, y, z * d, z * y, d * y, z * d * y]
                )
                counts = np.zeros((n, q))
                counts[np.arange(n)[~miss], x[~miss, cov] - 1] = 1.0
                try:
                    B = fit_multinomial_logit(design[~miss], counts[~miss])
                    logits = np.zeros((miss.sum(), q))
                    logits[:, 1:] = design[miss] @ B.T
                    logits -= logits.max(axis=1, keepdims=True)
                    probs = np.exp(logits)
                    probs /= probs.sum(axis=1, keepdims=True)
                except NewtonError:
                    freqs = counts[~miss].sum(axis=0)
                    probs = np.tile(freqs / freqs.sum(), (miss.sum(), 1))
                draws = np.array([rng.choice(q, p=p) for p in probs]) + 1
                x[miss, cov] = draws
        out.append(Dataset(x=x, z=dataset.z, d=dataset.d, y=dataset.y))
    return out


@dataclass
class PooledFit:
    """Per-imputation EM fits with Rubin-pooled complier-effect estimates."""

    fits: list[FitResult]
    spec: CovariateSpec

    def pooled_cace(self, cell):
        x = self.spec.x_row(cell)
        ests = [cace(f.params, x) for f in self.fits]
        return rubin_pool(ests)

    @property
    def cace_by_x(self) -> dict[int, float]:
        # single binary covariate convenience: value v maps to level code v+1
        if self.spec.n_cov != 1:
            raise ModelError("cace_by_x requires the single-covariate layout")
        return {v: self.pooled_cace((v + 1,))[0] for v in (0, 1)}


def mar_impute_fit(
    dataset,
    spec: CovariateSpec,
    config: FitConfig | None = None,
    impute: ImputationConfig | None = None,
) -> PooledFit:
    """Impute under MAR, fit the no-missingness-model EM per completed dataset."""
    impute = impute or ImputationConfig()
    completed = impute_datasets(dataset, spec, impute)
    full = _all_observed(spec)
    fits = [fit_em(ds, full, config) for ds in completed]
    return PooledFit(fits=fits, spec=spec)


def unadjusted_difference(dataset, ci_level: float = 0.95) -> EstimateCI:
    """Difference of arm-wise outcome means with a Wald binomial CI."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_records(list(dataset))
    y1 = dataset.y[dataset.d == 1]
    y0 = dataset.y[dataset.d == 0]
    if len(y1) == 0 or len(y0) == 0:
        raise ModelError("both treatment arms must be nonempty")
    p1, p0 = y1.mean(), y0.mean()
    est = float(p1 - p0)
    var = p1 * (1 - p1) / len(y1) + p0 * (1 - p0) / len(y0)
    zcrit = norm.ppf(0.5 + ci_level / 2)
    half = zcrit * np.sqrt(var)
    return EstimateCI("unadjusted", est, (est - half, est + half), float(var))


def _standardized_difference(dataset: Dataset):
    """Outcome-regression standardization and its delta-method variance."""
    n = len(dataset)
    X = np.column_stack([np.ones(n), dataset.d.astype(float), dataset.x.astype(float)])
    beta, cov = fit_binomial_logit(X, dataset.y.astype(float), np.ones(n))
    X1, X0 = X.copy(), X.copy()
    X1[:, 1] = 1.0
    X0[:, 1] = 0.0
    s1 = sigmoid(X1 @ beta)
    s0 = sigmoid(X0 @ beta)
    est = float(np.mean(s1 - s0))
    var = None
    if cov is not None:
        grad = np.mean((s1 * (1 - s1))[:, None] * X1 - (s0 * (1 - s0))[:, None] * X0, axis=0)
        var = float(grad @ cov @ grad)
    return est, var


def regression_adjusted(
    dataset,
    spec: CovariateSpec,
    impute: ImputationConfig | None = None,
    ci_level: float = 0.95,
) -> EstimateCI:
    """Logistic Y ~ D + X standardized over the empirical covariate distribution."""
    impute = impute or ImputationConfig()
    completed = impute_datasets(dataset, spec, impute)
    ests, withins = [], []
    for ds in completed:
        est, var = _standardized_difference(ds)
        ests.append(est)
        withins.append(0.0 if var is None else var)
    mean, total, _ = rubin_pool(ests, withins)
    zcrit = norm.ppf(0.5 + ci_level / 2)
    half = zcrit * np.sqrt(total)
    return EstimateCI("regression_adjusted", mean, (mean - half, mean + half), total)


def _subclassified_difference(dataset: Dataset, n_subclasses: int):
    n = len(dataset)
    X = np.column_stack([np.ones(n), dataset.x.astype(float)])
    beta, _ = fit_binomial_logit(X, dataset.d.astype(float), np.ones(n))
    score = sigmoid(X @ beta)
    if n_subclasses > 1:
        cuts = np.quantile(score, np.linspace(0, 1, n_subclasses + 1)[1:-1])
        # boundary scores go to the lower subclass
        sub = np.searchsorted(cuts, score, side="left")
    else:
        sub = np.zeros(n, dtype=int)
    est = 0.0
    var = 0.0
    for s in range(n_subclasses):
        mask = sub == s
        ns = mask.sum()
        if ns == 0:
            continue
        y1 = dataset.y[mask & (dataset.d == 1)]
        y0 = dataset.y[mask & (dataset.d == 0)]
        if len(y1) == 0 or len(y0) == 0:
            raise ModelError(f"subclass {s} lacks a treatment arm")
        wgt = ns / n
        p1, p0 = y1.mean(), y0.mean()
        est += wgt * (p1 - p0)
        var += wgt**2 * (p1 * (1 - p1) / len(y1) + p0 * (1 - p0) / len(y0))
    return float(est), float(var)


def propensity_subclassification(
    dataset,
    spec: CovariateSpec,
    impute: ImputationConfig | None = None,
    n_subclasses: int = 5,
    ci_level: float = 0.95,
) -> EstimateCI:
    """Propensity-score quantile subclassification, size-weighted over subclasses."""
    impute = impute or ImputationConfig()
    completed = impute_datasets(dataset, spec, impute)
    ests, withins = [], []
    for ds in completed:
        est, var = _subclassified_difference(ds, n_subclasses)
        ests.append(est)
        withins.append(var)
    mean, total, _ = rubin_pool(ests, withins)
    zcrit = norm.ppf(0.5 + ci_level / 2)
    half = zcrit * np.sqrt(total)
    return EstimateCI("propensity_subclassification", mean, (mean - half, mean + half), total)
