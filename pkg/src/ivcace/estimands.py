"""Reported quantities derived from a fit: per-cell effects, compliance
proportions, weighted effects and bootstrap confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .em import EStepError, FitConfig, FitResult, fit_em
from .model import CovariateSpec, Dataset, ModelError, cace, prob_compliance


@dataclass
class BootstrapConfig:
    n_resamples: int = 1000
    seed: int = 0
    ci_level: float = 0.95
    n_workers: int = 1

    def __post_init__(self):
        if self.n_resamples < 1:
            raise ModelError("n_resamples must be >= 1")
        if not 0.0 < self.ci_level < 1.0:
            raise ModelError("ci_level must lie strictly between 0 and 1")


@dataclass
class CaceRow:
    cell: tuple[int, ...]
    estimate: float
    lower: float | None = None
    upper: float | None = None
    sd: float | None = None


@dataclass
class CaceReport:
    rows: list[CaceRow]
    weighted: dict[str, CaceRow] = field(default_factory=dict)
    n_dropped: int = 0
    n_resamples: int = 0

    def row(self, cell) -> CaceRow:
        cell = tuple(cell)
        for r in self.rows:
            if r.cell == cell:
                return r
        raise ModelError(f"no report row for cell {cell}")


def cace_table(fit: FitResult, cells) -> list[tuple[tuple[int, ...], float]]:
    """Per-cell complier effect, one row per requested covariate cell."""
    spec = fit.spec
    return [(tuple(c), cace(fit.params, spec.x_row(c))) for c in cells]


@dataclass
class ComplianceRow:
    cell: tuple[int, ...]
    p_always: float
    p_complier: float
    p_never: float


def compliance_proportions(fit: FitResult, cells) -> list[ComplianceRow]:
    spec = fit.spec
    rows = []
    for c in cells:
        pn, pc, pa = prob_compliance(fit.params, spec.x_row(c))
        rows.append(ComplianceRow(cell=tuple(c), p_always=pa, p_complier=pc, p_never=pn))
    return rows


WEIGHTINGS = ("cell_probability", "complier_count")


def weighted_cace(fit: FitResult, weighting: str = "cell_probability") -> float:
    """Population-weighted complier effect.

    cell_probability weights each cell by its estimated mass; complier_count
    additionally weights by the within-cell complier share, so the result is
    the effect averaged over the estimated complier population.
    """
    if weighting not in WEIGHTINGS:
        raise ModelError(f"weighting must be one of {WEIGHTINGS}")
    spec = fit.spec
    num = 0.0
    den = 0.0
    for cell in spec.cells():
        x = spec.x_row(cell)
        wgt = float(fit.params.w[tuple(c - 1 for c in cell)])
        if weighting == "complier_count":
            wgt *= prob_compliance(fit.params, x)[1]
        num += wgt * cace(fit.params, x)
        den += wgt
    if den <= 0:
        raise ModelError("zero total complier mass")
    return num / den


def _percentile_ci(draws: np.ndarray, level: float) -> tuple[float, float]:
    # order-statistic endpoints: lower endpoint rounds down, upper rounds up,
    # so widening the level can only widen the interval
    lo = float(np.quantile(draws, (1.0 - level) / 2.0, method="lower"))
    hi = float(np.quantile(draws, (1.0 + level) / 2.0, method="higher"))
    return lo, hi


def _targets(params, spec, cells, weightings):
    out = [cace(params, spec.x_row(c)) for c in cells]
    fake = FitResult(
        params=params, loglik_trace=[0.0], converged=True, iterations=0,
        final_expectations=None, counts=None,
    )
    out.extend(weighted_cace(fake, w) for w in weightings)
    return out


def bootstrap_ci(
    dataset,
    spec: CovariateSpec,
    config: FitConfig | None = None,
    boot: BootstrapConfig | None = None,
    cells=None,
    weightings: tuple[str, ...] = WEIGHTINGS,
    sens=None,
) -> CaceReport:
    """Percentile bootstrap over record resamples for the requested estimands.

    Replicate fits warm-start from the point estimate with a single restart.
    Failed replicates are dropped; more than 5% dropped is an error.
    """
    config = config or FitConfig()
    boot = boot or BootstrapConfig()
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_records(list(dataset), spec)
    if cells is None:
        cells = list(spec.cells())
    cells = [tuple(c) for c in cells]
    for w in weightings:
        if w not in WEIGHTINGS:
            raise ModelError(f"weighting must be one of {WEIGHTINGS}")

    point = fit_em(dataset, spec, config, sens=sens)
    point_vals = _targets(point.params, spec, cells, weightings)

    n = len(dataset)
    rep_config = replace(config, init_params=point.params, n_restarts=1)
    seeds = np.random.SeedSequence(boot.seed).generate_state(boot.n_resamples)

    def task(b):
        rng = np.random.default_rng(int(seeds[b]))
        idx = rng.integers(0, n, size=n)
        try:
            fit = fit_em(dataset.subset(idx), spec, rep_config, sens=sens)
        except (EStepError, ModelError):
            return None
        return _targets(fit.params, spec, cells, weightings)

    results = Parallel(n_jobs=boot.n_workers)(
        delayed(task)(b) for b in range(boot.n_resamples)
    )
    kept = np.array([r for r in results if r is not None])
    dropped = boot.n_resamples - len(kept)
    if dropped > 0.05 * boot.n_resamples:
        raise RuntimeError(f"{dropped} of {boot.n_resamples} bootstrap replicates failed")

    def make_row(cell, col, est):
        draws = kept[:, col]
        lo, hi = _percentile_ci(draws, boot.ci_level)
        sd = float(draws.std(ddof=1)) if len(draws) > 1 else 0.0
        return CaceRow(cell=cell, estimate=est, lower=lo, upper=hi, sd=sd)

    rows = [make_row(c, i, point_vals[i]) for i, c in enumerate(cells)]
    weighted = {
        w: make_row((), len(cells) + i, point_vals[len(cells) + i])
        for i, w in enumerate(weightings)
    }
    return CaceReport(
        rows=rows, weighted=weighted, n_dropped=dropped, n_resamples=boot.n_resamples
    )
