"""Latent binary confounder Q: the extended fit, the mixture effect,
the shifted confidence interval and the grid runner.

Q is independent of covariates, compliance class and the IV, so only the
outcome and response factors change: their logits gain fixed shifts
xi * q and kappa * q.  The sensitivity parameters (pi, xi, kappa) are
held fixed while the EM re-estimates everything else.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .em import EStepError, FitConfig, FitResult, fit_em
from .estimands import CaceReport
from .model import CovariateSpec, ModelError, sigmoid


@dataclass
class SensitivityParams:
    """Fixed confounder parameters: prevalence and log-odds shifts.

    Outcome shifts are tied across IV arms for always and never takers
    (stored once each); kappa has one entry per (missing covariate, class).
    """

    pi: float
    xi_n: float = 0.0
    xi_a: float = 0.0
    xi_c0: float = 0.0
    xi_c1: float = 0.0
    kappa: np.ndarray | float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise ModelError("pi must lie in [0, 1]")

    @classmethod
    def scalar(cls, spec: CovariateSpec, pi: float, xi: float, kappa: float) -> "SensitivityParams":
        """One xi for every (class, arm) and one kappa for every (j, class)."""
        return cls(
            pi=pi, xi_n=xi, xi_a=xi, xi_c0=xi, xi_c1=xi,
            kappa=np.full((spec.n_miss, 3), kappa),
        )

    def resolve_kappa(self, spec: CovariateSpec) -> np.ndarray:
        return np.broadcast_to(
            np.asarray(self.kappa, dtype=float), (spec.n_miss, 3)
        ).copy()


def _prepared(spec: CovariateSpec, sens: SensitivityParams) -> SensitivityParams:
    return replace(sens, kappa=sens.resolve_kappa(spec))


def fit_with_q(dataset, spec: CovariateSpec, sens: SensitivityParams, config: FitConfig | None = None) -> FitResult:
    """EM over the latent space augmented with q in {0, 1}."""
    return fit_em(dataset, spec, config, sens=_prepared(spec, sens))


def cace_with_q(fit: FitResult, sens: SensitivityParams, x) -> float:
    """Mixture complier effect, averaging the q=1 and q=0 arms by prevalence."""
    x = np.asarray(x, dtype=float)
    p = fit.params
    shifted = sigmoid(p.beta_c1 @ x + sens.xi_c1) - sigmoid(p.beta_c0 @ x + sens.xi_c0)
    plain = sigmoid(p.beta_c1 @ x) - sigmoid(p.beta_c0 @ x)
    return float(sens.pi * shifted + (1.0 - sens.pi) * plain)


def shifted_ci(base_estimate: float, base_ci, sens_estimate: float) -> tuple[float, float]:
    """Recenter the base interval at the sensitivity estimate, keeping its
    width and asymmetry."""
    a = float(base_estimate)
    b, c = (float(v) for v in base_ci)
    d = float(sens_estimate)
    if not b <= a <= c:
        raise ModelError("base interval must contain the base estimate")
    return (d - (a - b), d + (c - a))


@dataclass
class SensitivityGrid:
    pi_values: tuple[float, ...] = (0.1, 0.5, 0.9)
    outcome_odds_ratios: tuple[float, ...] = (2.0, 0.5, 3.0, 1.0 / 3.0)
    response_odds_ratios: tuple[float, ...] = (2.0, 0.5, 3.0, 1.0 / 3.0)
    cells: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        if not (self.pi_values and self.outcome_odds_ratios and self.response_odds_ratios):
            raise ModelError("every grid axis must be nonempty")
        if any(v <= 0 for v in self.outcome_odds_ratios + self.response_odds_ratios):
            raise ModelError("odds ratios must be positive")

    def points(self):
        return itertools.product(
            self.pi_values, self.outcome_odds_ratios, self.response_odds_ratios
        )


@dataclass
class GridRow:
    cell: tuple[int, ...]
    pi: float
    outcome_or: float
    response_or: float
    estimate: float | None
    ci_low: float | None
    ci_high: float | None
    flip: bool | None
    failed: bool = False


def sensitivity_grid(
    dataset,
    spec: CovariateSpec,
    grid: SensitivityGrid,
    config: FitConfig | None = None,
    base_report: CaceReport | None = None,
    base_fit: FitResult | None = None,
) -> list[GridRow]:
    """One extended fit per grid point, effects per target cell.

    With a base_report (bootstrap of the no-Q fit) each row also carries
    the shifted interval and a flag marking cells whose shifted interval
    covers zero while the base interval did not.  Grid fits warm-start
    from the base fit.
    """
    config = config or FitConfig()
    cells = [tuple(c) for c in (grid.cells or spec.cells())]
    if base_fit is None:
        base_fit = fit_em(dataset, spec, config)
    warm = replace(config, init_params=base_fit.params, n_restarts=1)

    rows = []
    for pi, oor, ror in grid.points():
        sens = SensitivityParams.scalar(spec, pi, np.log(oor), np.log(ror))
        try:
            fit = fit_with_q(dataset, spec, sens, warm)
        except (EStepError, ModelError):
            for cell in cells:
                rows.append(GridRow(cell, pi, oor, ror, None, None, None, None, failed=True))
            continue
        for cell in cells:
            est = cace_with_q(fit, sens, spec.x_row(cell))
            lo = hi = flip = None
            if base_report is not None:
                base = base_report.row(cell)
                lo, hi = shifted_ci(base.estimate, (base.lower, base.upper), est)
                base_covers = base.lower <= 0.0 <= base.upper
                flip = (lo <= 0.0 <= hi) and not base_covers
            rows.append(GridRow(cell, pi, oor, ror, est, lo, hi, flip))
    return rows
