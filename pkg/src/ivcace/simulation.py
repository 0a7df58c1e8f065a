"""Synthetic data generation and the replication study.

The single-covariate generator draws, in order: compliance class,
binary covariate given class, IV given covariate, treatment
deterministically from (class, IV), outcome, and finally the response
indicator that masks the covariate.  ``generate`` emits level codes 1/2
for covariate values 0/1 to match the dataset file convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .em import FitConfig, fit_em
from .model import (
    ComplianceClass,
    CovariateSpec,
    Dataset,
    ModelError,
    ParamSet,
    cace,
    prob_compliance,
    prob_iv,
    prob_outcome,
    prob_response,
)

SINGLE_COV_SPEC = CovariateSpec(names=("x",), levels=(2,), observed=(False,))

# generative truths of the shared parameter block: CACE 0.25 at x=1, 0.15 at x=0
TRUE_CACE = {1: 0.25, 0: 0.15}

_U_ORDER = (ComplianceClass.NEVER_TAKER, ComplianceClass.COMPLIER, ComplianceClass.ALWAYS_TAKER)


@dataclass(frozen=True)
class SingleCovScenario:
    """Generator parameterization: one binary covariate, three latent classes.

    Arrays are indexed by class in (never, complier, always) order.
    ``theta[z, u, x]`` is P(Y(z)=1 | u, x) and ``rho[y, z, u]`` is
    P(R=1 | y, z, u); the exclusion-restriction ties (no z dependence for
    always and never takers) are enforced at construction.
    """

    w_u: tuple[float, float, float]
    m_u: tuple[float, float, float]
    xi_x: tuple[float, float]            # P(Z=1 | x) for x = 0, 1
    theta: tuple                          # nested (2, 3, 2) tuple [z][u][x]
    rho: tuple                            # nested (2, 2, 3) tuple [y][z][u]

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        rh = np.asarray(self.rho, dtype=float)
        if th.shape != (2, 3, 2) or rh.shape != (2, 2, 3):
            raise ModelError("theta must be (2,3,2) and rho (2,2,3)")
        for arr in (np.asarray(self.w_u), np.asarray(self.m_u), np.asarray(self.xi_x), th, rh):
            if ((arr < 0) | (arr > 1)).any():
                raise ModelError("all scenario entries must lie in [0, 1]")
        if abs(sum(self.w_u) - 1.0) > 1e-12:
            raise ModelError("class probabilities must sum to 1")
        for u in (0, 2):  # never and always takers: no z dependence
            if not np.allclose(th[0, u], th[1, u]):
                raise ModelError("outcome exclusion restriction violated in theta")
            if not np.allclose(rh[:, 0, u], rh[:, 1, u]):
                raise ModelError("response exclusion restriction violated in rho")

    @property
    def theta_arr(self) -> np.ndarray:
        return np.asarray(self.theta, dtype=float)

    @property
    def rho_arr(self) -> np.ndarray:
        return np.asarray(self.rho, dtype=float)

    def true_cace(self, x: int) -> float:
        th = self.theta_arr
        return float(th[1, 1, x] - th[0, 1, x])

    def missing_rate(self) -> float:
        """Marginal P(R=0) by summing the generative law over (u, x, z, y)."""
        th, rh = self.theta_arr, self.rho_arr
        rate = 0.0
        for u in range(3):
            for x in range(2):
                px = self.m_u[u] if x == 1 else 1.0 - self.m_u[u]
                for z in range(2):
                    pz = self.xi_x[x] if z == 1 else 1.0 - self.xi_x[x]
                    for y in range(2):
                        py = th[z, u, x] if y == 1 else 1.0 - th[z, u, x]
                        rate += self.w_u[u] * px * pz * py * (1.0 - rh[y, z, u])
        return rate


def _shared_theta():
    # [z][u][x] with u in (n, c, a) order; always/never entries tied over z
    t = np.zeros((2, 3, 2))
    t[:, 0, 1] = 0.5   # never takers, x=1
    t[:, 0, 0] = 0.3
    t[:, 2, 1] = 0.8   # always takers, x=1
    t[:, 2, 0] = 0.7
    t[1, 1, 1] = 0.7   # compliers
    t[1, 1, 0] = 0.45
    t[0, 1, 1] = 0.45
    t[0, 1, 0] = 0.3
    return tuple(tuple(tuple(row) for row in plane) for plane in t)


def _rho_from(values: dict[tuple[int, int, int], float]):
    # values keyed by (y, z, u-index)
    r = np.zeros((2, 2, 3))
    for (y, z, u), v in values.items():
        r[y, z, u] = v
    return tuple(tuple(tuple(row) for row in plane) for plane in r)


def scenario_params(scenario: str) -> SingleCovScenario:
    """The three published missingness regimes over the shared parameter block."""
    scenario = scenario.lower()
    base = dict(
        w_u=(0.2, 0.425, 0.375),
        m_u=(0.5, 0.8, 0.25),
        xi_x=(0.6, 0.4),
        theta=_shared_theta(),
    )
    N, C, A = 0, 1, 2
    if scenario == "mcar":
        rho = _rho_from({(y, z, u): 0.88 for y in range(2) for z in range(2) for u in range(3)})
    elif scenario == "mar":
        rho = _rho_from({
            (1, 1, N): 0.88, (1, 0, N): 0.88, (1, 0, C): 0.88,
            (1, 0, A): 0.78, (1, 1, A): 0.78, (1, 1, C): 0.78,
            (0, 1, N): 0.94, (0, 0, N): 0.94, (0, 0, C): 0.94,
            (0, 0, A): 0.97, (0, 1, A): 0.97, (0, 1, C): 0.97,
        })
    elif scenario == "nonignorable":
        rho = _rho_from({
            (1, 1, N): 0.75, (1, 0, N): 0.75,
            (0, 1, N): 0.80, (0, 0, N): 0.80,
            (1, 0, A): 1.0, (1, 1, A): 1.0,
            (0, 0, A): 0.95, (0, 1, A): 0.95,
            (1, 1, C): 0.80, (0, 1, C): 0.90,
            (0, 0, C): 0.83, (1, 0, C): 0.97,
        })
    else:
        raise ModelError(f"unknown scenario {scenario!r}; expected mcar, mar or nonignorable")
    return SingleCovScenario(rho=rho, **base)


def scenario_to_params(sc: SingleCovScenario) -> ParamSet:
    """Saturated encoding of a scenario as general-model parameters.

    The scenario draws U first and X given U; the general model factors
    the other way, so the cell masses are P(X) and the compliance logits
    encode P(U | X) by Bayes' rule.  With one binary covariate every
    model has as many free coefficients as probability constraints, so
    the encoding is exact; the complier response block needs the y*z
    interaction since its four cells are free.
    """
    from .model import logit

    spec = SINGLE_COV_SPEC
    w_u = np.asarray(sc.w_u)
    m_u = np.asarray(sc.m_u)
    # joint P(u, x) with x the 0/1 covariate value
    joint = np.stack([w_u * (1.0 - m_u), w_u * m_u], axis=0)  # (x, u)
    px = joint.sum(axis=1)
    pu_given_x = joint / px[:, None]

    def through_codes(v1, v2):
        # coefficients (b0, b1) with b0 + b1*code hitting v at codes 1, 2
        b1 = v2 - v1
        return np.array([v1 - b1, b1])

    alpha = through_codes(logit(sc.xi_x[0]), logit(sc.xi_x[1]))
    delta_c = through_codes(
        np.log(pu_given_x[0, 1] / pu_given_x[0, 0]),
        np.log(pu_given_x[1, 1] / pu_given_x[1, 0]),
    )
    delta_a = through_codes(
        np.log(pu_given_x[0, 2] / pu_given_x[0, 0]),
        np.log(pu_given_x[1, 2] / pu_given_x[1, 0]),
    )
    th = sc.theta_arr
    betas = {
        (u, z): through_codes(logit(th[z, u, 0]), logit(th[z, u, 1]))
        for u, z in ((0, 0), (2, 0), (1, 0), (1, 1))
    }
    rh = sc.rho_arr  # (y, z, u)
    theta = np.zeros((1, 3, 1))
    gamma = np.zeros((1, 3))
    for u in range(3):
        theta[0, u, 0] = logit(rh[0, 0, u])
        gamma[0, u] = logit(rh[1, 0, u]) - theta[0, u, 0]
    eta = np.array([logit(rh[0, 1, 1]) - theta[0, 1, 0]])
    eta_yz = np.array(
        [logit(rh[1, 1, 1]) - theta[0, 1, 0] - gamma[0, 1] - eta[0]]
    )
    return ParamSet(
        spec=spec,
        w=px,
        alpha=alpha,
        delta_a=delta_a,
        delta_c=delta_c,
        beta_n=betas[(0, 0)],
        beta_a=betas[(2, 0)],
        beta_c0=betas[(1, 0)],
        beta_c1=betas[(1, 1)],
        theta=theta,
        gamma=gamma,
        eta=eta,
        eta_yz=eta_yz,
    )


def generate(sc: SingleCovScenario, n: int, seed: int, debug: bool = False) -> Dataset:
    """Draw n records; covariate value v in {0,1} is emitted as level code v+1."""
    if n < 1:
        raise ModelError("n must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.choice(3, size=n, p=np.asarray(sc.w_u))
    x = (rng.random(n) < np.asarray(sc.m_u)[u]).astype(int)
    z = (rng.random(n) < np.asarray(sc.xi_x)[x]).astype(int)
    d = ((u == 2) | ((u == 1) & (z == 1))).astype(int)
    th = sc.theta_arr
    y = (rng.random(n) < th[z, u, x]).astype(int)
    rh = sc.rho_arr
    r = (rng.random(n) < rh[y, z, u]).astype(int)
    codes = np.where(r == 1, x + 1, -1)
    ds = Dataset(x=codes[:, None], z=z, d=d, y=y)
    if debug:
        ds.debug = {"u_true": u, "x_true": x, "r": r}
    return ds


def sample_from_params(params: ParamSet, n: int, seed: int, debug: bool = False) -> Dataset:
    """Forward-simulate the general model; the Monte Carlo twin of the cell probabilities."""
    spec = params.spec
    rng = np.random.default_rng(seed)
    cells = list(spec.cells())
    w = params.w.reshape(-1)
    cell_idx = rng.choice(len(cells), size=n, p=w / w.sum())
    x = np.empty((n, spec.n_cov), dtype=int)
    z = np.empty(n, dtype=int)
    d = np.empty(n, dtype=int)
    y = np.empty(n, dtype=int)
    u_arr = np.empty(n, dtype=int)
    r = np.ones((n, spec.n_miss), dtype=int)
    pu_by_cell = {}
    for i in range(n):
        cell = cells[cell_idx[i]]
        xrow = spec.x_row(cell)
        xobs = spec.x_obs_row(cell)
        if cell not in pu_by_cell:
            pu_by_cell[cell] = (prob_iv(params, xrow), prob_compliance(params, xrow))
        pz, pu = pu_by_cell[cell]
        zi = int(rng.random() < pz)
        ui = int(rng.choice(3, p=pu))
        di = int(ui == 2 or (ui == 1 and zi == 1))
        yi = int(rng.random() < prob_outcome(params, ui, zi, xrow))
        x[i] = cell
        z[i], d[i], y[i], u_arr[i] = zi, di, yi, ui
        for j in range(spec.n_miss):
            r[i, j] = int(rng.random() < prob_response(params, j, ui, zi, yi, xobs))
    x_masked = x.copy()
    for j, cov in enumerate(spec.miss_idx):
        x_masked[r[:, j] == 0, cov] = -1
    ds = Dataset(x=x_masked, z=z, d=d, y=y)
    if debug:
        ds.debug = {"u_true": u_arr}
        for j, cov in enumerate(spec.miss_idx):
            ds.debug[f"r{j}"] = r[:, j]
            ds.debug[f"x_true{j}"] = x[:, cov]
    return ds


NICU_LIKE_SPEC = CovariateSpec(
    names=("gest", "care"), levels=(3, 2), observed=(True, False)
)


def nicu_like_params() -> ParamSet:
    """A registry-flavored truth: strong protective complier effect at the
    lowest gestational-age level, attenuating to near zero at the top.

    True effects at care=1 are about -0.35, -0.24 and -0.04 for
    gest = 1, 2, 3.
    """
    spec = NICU_LIKE_SPEC
    w = np.array([[0.10, 0.08], [0.22, 0.18], [0.25, 0.17]])
    beta_c0 = np.array([-1.0, 0.9, 0.1])
    return ParamSet(
        spec=spec,
        w=w / w.sum(),
        alpha=np.array([0.3, -0.2, 0.1]),
        delta_a=np.array([-0.3, 0.1, 0.2]),
        delta_c=np.array([0.5, 0.2, -0.1]),
        beta_n=np.array([-1.0, 0.6, 0.1]),
        beta_a=np.array([-0.5, 0.4, -0.2]),
        beta_c0=beta_c0,
        beta_c1=beta_c0 + np.array([-2.4, 0.7, 0.0]),
        theta=np.array([[[1.2, 0.2], [0.8, 0.3], [1.5, 0.1]]]),
        gamma=np.array([[-0.4, -0.6, -0.3]]),
        eta=np.array([0.5]),
    )


@dataclass
class StudyConfig:
    n_replications: int = 500
    n_per_dataset: int = 5000
    scenario: str = "nonignorable"
    methods: tuple[str, ...] = ("em_ni", "complete_case", "mar_impute")
    seed: int = 0
    n_workers: int = 1
    # the scenario response probabilities are free per (y, z) cell, so the
    # nonignorable fit saturates the complier response model
    fit: FitConfig = field(
        default_factory=lambda: FitConfig(
            n_restarts=1, loglik_tol=1e-7, param_tol=1e-6, complier_response_yz=True
        )
    )

    def __post_init__(self):
        if self.n_replications < 1 or self.n_per_dataset < 1:
            raise ModelError("replication and dataset sizes must be positive")
        bad = set(self.methods) - {"em_ni", "complete_case", "mar_impute"}
        if bad:
            raise ModelError(f"unknown methods: {sorted(bad)}")


@dataclass
class StudyRow:
    method: str
    x: int            # covariate value 0 or 1
    mean: float
    sd: float
    pct_bias: float
    truth: float


@dataclass
class StudyResult:
    rows: list[StudyRow]
    n_failures: int
    n_replications: int


def _study_cace(params: ParamSet) -> dict[int, float]:
    spec = params.spec
    return {x: cace(params, spec.x_row((x + 1,))) for x in (0, 1)}


def _one_replication(sc, n, seed, methods, fit_cfg):
    from . import baselines  # local import avoids a module cycle

    ds = generate(sc, n, seed)
    out = {}
    for method in methods:
        if method == "em_ni":
            res = fit_em(ds, SINGLE_COV_SPEC, fit_cfg)
            out[method] = _study_cace(res.params)
        elif method == "complete_case":
            res = baselines.complete_case_fit(ds, SINGLE_COV_SPEC, fit_cfg)
            out[method] = _study_cace(res.params)
        elif method == "mar_impute":
            pooled = baselines.mar_impute_fit(
                ds, SINGLE_COV_SPEC, fit_cfg,
                baselines.ImputationConfig(seed=seed + 1),
            )
            out[method] = dict(pooled.cace_by_x)
    return out


def run_study(config: StudyConfig) -> StudyResult:
    """Replicate the generate-and-estimate loop; summarize mean, SD and percent bias."""
    sc = scenario_params(config.scenario)
    seeds = np.random.SeedSequence(config.seed).generate_state(config.n_replications)

    def task(rep):
        try:
            return _one_replication(
                sc, config.n_per_dataset, int(seeds[rep]), config.methods, config.fit
            )
        except Exception:
            return None

    results = Parallel(n_jobs=config.n_workers)(
        delayed(task)(rep) for rep in range(config.n_replications)
    )
    ok = [r for r in results if r is not None]
    n_fail = len(results) - len(ok)
    if n_fail > 0.02 * config.n_replications:
        raise RuntimeError(f"{n_fail} of {config.n_replications} replications failed")

    rows = []
    for method in config.methods:
        for x in (1, 0):
            ests = np.array([r[method][x] for r in ok])
            truth = TRUE_CACE[x]
            rows.append(
                StudyRow(
                    method=method,
                    x=x,
                    mean=float(ests.mean()),
                    sd=float(ests.std(ddof=1)) if len(ests) > 1 else 0.0,
                    pct_bias=float(abs(ests.mean() - truth) / truth * 100.0),
                    truth=truth,
                )
            )
    return StudyResult(rows=rows, n_failures=n_fail, n_replications=config.n_replications)
