"""EM engine: observed-count tabulation, E-step, M-step and the fit loop.

Observed data are tabulated per missingness pattern into count arrays
over the observed sub-lattice.  The E-step apportions each observed
stratum over its latent support -- the compliance classes consistent
with (d, z) under monotonicity, the levels of any missing covariates
and, when a latent binary confounder is switched on, its two values --
proportionally to the joint cell probabilities.  The M-step solves one
weighted logistic MLE per sub-model on the expected counts.

Structural zeros (never takers with d=1, always takers with d=0) are
never allocated: the support map simply excludes them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .logistic import NewtonError, fit_binomial_logit, fit_multinomial_logit
from .model import (
    ComplianceClass,
    CovariateSpec,
    Dataset,
    ModelError,
    ParamSet,
    sigmoid,
)

# (d, z) -> compliance-class indices (0=never, 1=complier, 2=always)
_SUPPORT = {
    (0, 0): (0, 1),
    (0, 1): (0,),
    (1, 0): (2,),
    (1, 1): (1, 2),
}


class EStepError(RuntimeError):
    """An observed stratum has zero probability under the current parameters."""


def latent_support(d: int, z: int) -> set[ComplianceClass]:
    """Compliance classes consistent with observed (d, z) under monotonicity."""
    if d not in (0, 1) or z not in (0, 1):
        raise ModelError("d and z must be 0 or 1")
    return {ComplianceClass(u) for u in _SUPPORT[(d, z)]}


@dataclass
class FitConfig:
    max_em_iters: int = 2000
    loglik_tol: float = 1e-8
    param_tol: float = 1e-6
    newton_max_iters: int = 50
    ridge: float = 1e-8
    init_seed: int = 0
    n_restarts: int = 5
    init_params: ParamSet | None = None
    # estimate the complier-only y*z response interaction, saturating the
    # four complier response cells; off by default (additive model)
    complier_response_yz: bool = False

    def __post_init__(self):
        if self.max_em_iters < 1 or self.newton_max_iters < 1 or self.n_restarts < 1:
            raise ModelError("iteration caps and restart count must be >= 1")
        if self.loglik_tol <= 0 or self.param_tol <= 0:
            raise ModelError("tolerances must be positive")


class _Lattice:
    """Precomputed design matrices and pattern bookkeeping for one spec."""

    def __init__(self, spec: CovariateSpec):
        self.spec = spec
        self.levels = spec.levels
        cells = list(spec.cells())
        self.X_full = np.array([[1.0] + [float(c) for c in cell] for cell in cells])
        self.X_obs = np.array([spec.x_obs_row(cell) for cell in cells])
        self.patterns = list(itertools.product((0, 1), repeat=spec.n_miss))
        self.pattern_index = {p: i for i, p in enumerate(self.patterns)}
        # axis (within the covariate part of the tensors) of each partially
        # observed covariate
        self.miss_axes = spec.miss_idx
        obs_levels = tuple(spec.levels[i] for i in spec.full_idx)
        self.obs_levels = obs_levels
        obs_cells = list(itertools.product(*(range(1, q + 1) for q in obs_levels)))
        self.X_obs_sub = np.array(
            [[1.0] + [float(c) for c in cell] for cell in obs_cells]
        )

    def count_shape(self, pattern) -> tuple[int, ...]:
        covs = tuple(
            1 if (i in self.miss_axes and pattern[self.miss_axes.index(i)] == 0) else q
            for i, q in enumerate(self.levels)
        )
        return covs + (2, 2, 2)  # (d, z, y)


_LATTICES: dict[CovariateSpec, _Lattice] = {}


def _lattice(spec: CovariateSpec) -> _Lattice:
    lat = _LATTICES.get(spec)
    if lat is None:
        lat = _LATTICES[spec] = _Lattice(spec)
    return lat


@dataclass
class ObservedCounts:
    """Per-missingness-pattern count tables over (observed cell, d, z, y)."""

    spec: CovariateSpec
    tables: dict[tuple[int, ...], np.ndarray]

    @property
    def n(self) -> int:
        return int(sum(t.sum() for t in self.tables.values()))

    def table(self, pattern, squeeze: bool = False) -> np.ndarray:
        pattern = tuple(pattern)
        t = self.tables[pattern]
        if squeeze:
            miss = self.spec.miss_idx
            axes = tuple(
                i for i in range(self.spec.n_cov)
                if i in miss and pattern[miss.index(i)] == 0
            )
            return t.squeeze(axis=axes) if axes else t
        return t

    # Convenience views matching the two-partially-observed-covariate layout.
    @property
    def nn(self) -> np.ndarray:
        self._require_two()
        return self.table((1, 1), squeeze=True)

    @property
    def n3(self) -> np.ndarray:
        self._require_two()
        return self.table((0, 1), squeeze=True)

    @property
    def n4(self) -> np.ndarray:
        self._require_two()
        return self.table((1, 0), squeeze=True)

    @property
    def nb(self) -> np.ndarray:
        self._require_two()
        return self.table((0, 0), squeeze=True)

    def _require_two(self):
        if self.spec.n_miss != 2:
            raise ModelError("named tables exist only with exactly two partially observed covariates")


@dataclass
class CellExpectations:
    """Expected complete-data counts over (pattern, full cell, u[, q], z, y)."""

    spec: CovariateSpec
    counts: np.ndarray  # (n_patterns, *levels, 3, nq, 2, 2)

    @property
    def nq(self) -> int:
        return self.counts.shape[-3]

    @property
    def n(self) -> np.ndarray:
        """Counts with the latent-confounder axis marginalized out."""
        return self.counts.sum(axis=-3)


def tabulate_observed(dataset, spec: CovariateSpec) -> ObservedCounts:
    """Partition the dataset into per-missingness-pattern count tables."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_records(list(dataset), spec)
    dataset.validate(spec)
    lat = _lattice(spec)
    tables = {p: np.zeros(lat.count_shape(p)) for p in lat.patterns}
    if len(dataset) == 0:
        return ObservedCounts(spec=spec, tables=tables)

    miss = dataset.x < 0
    pat_cols = (~miss[:, list(spec.miss_idx)]).astype(int) if spec.n_miss else np.zeros((len(dataset), 0), int)
    for p in lat.patterns:
        sel = (pat_cols == np.array(p)).all(axis=1)
        if not sel.any():
            continue
        xs = dataset.x[sel]
        idx = []
        for i in range(spec.n_cov):
            if i in spec.miss_idx and p[spec.miss_idx.index(i)] == 0:
                idx.append(np.zeros(sel.sum(), dtype=int))
            else:
                idx.append(xs[:, i] - 1)
        idx.extend([dataset.d[sel], dataset.z[sel], dataset.y[sel]])
        np.add.at(tables[p], tuple(idx), 1)
    return ObservedCounts(spec=spec, tables=tables)


def _q_arrays(spec: CovariateSpec, sens):
    """Latent-confounder prior, outcome shifts and response shifts.

    With no sensitivity parameters the confounder axis has size one and
    all shifts are zero, which reduces every formula to the base model.
    """
    if sens is None:
        return np.array([1.0]), np.zeros((3, 2)), np.zeros((spec.n_miss, 3))
    qw = np.array([1.0 - sens.pi, sens.pi])
    xi = np.array(
        [
            [sens.xi_n, sens.xi_n],
            [sens.xi_c0, sens.xi_c1],
            [sens.xi_a, sens.xi_a],
        ]
    )
    kappa = np.asarray(sens.kappa, dtype=float).reshape(spec.n_miss, 3)
    return qw, xi, kappa


def _joint_by_pattern(params: ParamSet, sens=None):
    """Joint probability tensors J_p[cell..., u, q, z, y], one per pattern."""
    spec = params.spec
    lat = _lattice(spec)
    qw, xi, kappa = _q_arrays(spec, sens)
    nq = len(qw)
    Xf, Xo = lat.X_full, lat.X_obs
    nc = Xf.shape[0]

    pz = sigmoid(Xf @ params.alpha)
    zfac = np.stack([1.0 - pz, pz], axis=1)  # (nc, 2)

    logits_u = np.stack(
        [np.zeros(nc), Xf @ params.delta_c, Xf @ params.delta_a], axis=1
    )
    logits_u -= logits_u.max(axis=1, keepdims=True)
    pu = np.exp(logits_u)
    pu /= pu.sum(axis=1, keepdims=True)
    pu = pu[:, [0, 1, 2]]  # columns already (n, c, a)

    betas = [[params.beta_n, params.beta_n],
             [params.beta_c0, params.beta_c1],
             [params.beta_a, params.beta_a]]
    py = np.empty((nc, 3, nq, 2))
    for u in range(3):
        for z in range(2):
            base = Xf @ betas[u][z]
            for q in range(nq):
                py[:, u, q, z] = sigmoid(base + xi[u, z] * q)
    yfac = np.stack([1.0 - py, py], axis=-1)  # (nc, 3, nq, 2, 2)

    J0 = (
        params.w.reshape(-1)[:, None, None, None, None]
        * pu[:, :, None, None, None]
        * qw[None, None, :, None, None]
        * zfac[:, None, None, :, None]
        * yfac
    )

    resp = []
    for j in range(spec.n_miss):
        pr = np.empty((nc, 3, nq, 2, 2))
        for u in range(3):
            base = Xo @ params.theta[j, u]
            for z in range(2):
                for y in range(2):
                    t = base + params.gamma[j, u] * y
                    if u == ComplianceClass.COMPLIER:
                        t = t + params.eta[j] * z + params.eta_yz[j] * z * y
                    for q in range(nq):
                        pr[:, u, q, z, y] = sigmoid(t + kappa[j, u] * q)
        resp.append(pr)

    shape = spec.levels + (3, nq, 2, 2)
    joints = {}
    for p in lat.patterns:
        Jp = J0
        for j, r in enumerate(p):
            Jp = Jp * (resp[j] if r == 1 else 1.0 - resp[j])
        joints[p] = Jp.reshape(shape)
    return joints


def _estep_core(params: ParamSet, counts: ObservedCounts, sens=None):
    """One E-step pass; returns (expected counts, observed-data log-likelihood)."""
    spec = params.spec
    lat = _lattice(spec)
    joints = _joint_by_pattern(params, sens)
    nq = next(iter(joints.values())).shape[-3]
    ncov = spec.n_cov

    N = np.zeros((len(lat.patterns),) + spec.levels + (3, nq, 2, 2))
    ll = 0.0
    for p_idx, p in enumerate(lat.patterns):
        C = counts.tables[p]
        if C.sum() == 0:
            continue
        Jp = joints[p]
        miss_axes = tuple(
            spec.miss_idx[j] for j in range(spec.n_miss) if p[j] == 0
        )
        for (d, z), supp in _SUPPORT.items():
            Cdz = C[..., d, z, :]  # (*shape_p_covs, 2)
            if Cdz.sum() == 0:
                continue
            # slices over the latent support; u and z indexed with plain
            # ints so each slice keeps shape (*levels, nq, 2)
            subs = {u: Jp[..., u, :, z, :] for u in supp}
            denom = sum(
                s.sum(axis=miss_axes + (ncov,), keepdims=True) for s in subs.values()
            )  # (*levels_with_1s, 1, 2)
            denom_c = denom.squeeze(axis=ncov)  # aligns with Cdz
            bad = (Cdz > 0) & (denom_c <= 0)
            if bad.any():
                where = np.argwhere(bad)[0]
                raise EStepError(
                    f"zero probability for observed stratum d={d} z={z} "
                    f"pattern={p} index={tuple(where)}"
                )
            safe = np.where(denom > 0, denom, 1.0)
            for u, s in subs.items():
                N[p_idx][..., u, :, z, :] += Cdz[..., None, :] * (s / safe)
            ll += float(
                (Cdz * np.log(np.where(Cdz > 0, denom_c, 1.0)))[Cdz > 0].sum()
            )
    return N, ll


def e_step(params: ParamSet, counts: ObservedCounts, sens=None) -> CellExpectations:
    N, _ = _estep_core(params, counts, sens)
    return CellExpectations(spec=params.spec, counts=N)


def observed_loglik(params: ParamSet, counts: ObservedCounts, sens=None) -> float:
    _, ll = _estep_core(params, counts, sens)
    return ll


def _fit_or_keep(fit_fn, prev_coef, total):
    if total < 1e-12:
        return np.array(prev_coef, dtype=float)
    try:
        return fit_fn()
    except NewtonError:
        return np.array(prev_coef, dtype=float)


def m_step(
    expect: CellExpectations,
    spec: CovariateSpec,
    config: FitConfig,
    prev: ParamSet | None = None,
    sens=None,
) -> ParamSet:
    """Weighted MLEs of every sub-model from the expected complete-data counts."""
    lat = _lattice(spec)
    if prev is None:
        prev = ParamSet.zeros(spec)
    qw, xi, kappa = _q_arrays(spec, sens)
    nq = expect.nq
    A = expect.counts.sum(axis=0)  # (*levels, 3, nq, 2, 2)
    if A.sum() <= 0:
        raise ModelError("expectations must have positive total mass")
    Af = A.reshape(spec.n_cells, 3, nq, 2, 2)
    Xf = lat.X_full
    nm = config.newton_max_iters
    ridge = config.ridge

    w = A.sum(axis=(-4, -3, -2, -1))
    w = w / w.sum()

    nz = Af.sum(axis=(1, 2, 4))  # (nc, 2) over z
    alpha = _fit_or_keep(
        lambda: fit_binomial_logit(
            Xf, nz[:, 1], nz.sum(axis=1), start=prev.alpha,
            max_iter=nm, ridge=ridge,
        )[0],
        prev.alpha,
        nz.sum(),
    )

    nu = Af.sum(axis=(2, 3, 4))  # (nc, 3) over classes (n, c, a)
    try:
        B = fit_multinomial_logit(
            Xf, nu, start=np.stack([prev.delta_c, prev.delta_a]),
            max_iter=nm, ridge=ridge,
        )
        delta_c, delta_a = B[0], B[1]
    except NewtonError:
        delta_c, delta_a = prev.delta_c.copy(), prev.delta_a.copy()

    def outcome_fit(u, zs, xi_uz, start):
        # counts per (cell, q), pooled over the z arms in zs
        s = Af[:, u][:, :, zs, 1].sum(axis=2)
        t = Af[:, u][:, :, zs, :].sum(axis=(2, 3))
        Xr = np.vstack([Xf] * nq)
        succ = np.concatenate([s[:, q] for q in range(nq)])
        tot = np.concatenate([t[:, q] for q in range(nq)])
        offs = np.concatenate([np.full(spec.n_cells, xi_uz * q) for q in range(nq)])
        return _fit_or_keep(
            lambda: fit_binomial_logit(
                Xr, succ, tot, offset=offs, start=start, max_iter=nm, ridge=ridge
            )[0],
            start,
            tot.sum(),
        )

    beta_n = outcome_fit(0, [0, 1], xi[0, 0], prev.beta_n)
    beta_a = outcome_fit(2, [0, 1], xi[2, 0], prev.beta_a)
    beta_c0 = outcome_fit(1, [0], xi[1, 0], prev.beta_c0)
    beta_c1 = outcome_fit(1, [1], xi[1, 1], prev.beta_c1)

    theta = prev.theta.copy()
    gamma = prev.gamma.copy()
    eta = prev.eta.copy()
    eta_yz = prev.eta_yz.copy()
    saturate = config.complier_response_yz
    if spec.n_miss:
        miss_axes = tuple(spec.miss_idx)
        # expected response-indicator counts at response-model resolution
        # (fully observed cells only), split by r_j
        nobs = lat.X_obs_sub.shape[0]
        for j in range(spec.n_miss):
            succ_p = [p_idx for p_idx, p in enumerate(lat.patterns) if p[j] == 1]
            fail_p = [p_idx for p_idx, p in enumerate(lat.patterns) if p[j] == 0]
            S = expect.counts[succ_p].sum(axis=0).sum(axis=miss_axes)
            F = expect.counts[fail_p].sum(axis=0).sum(axis=miss_axes)
            S = S.reshape(nobs, 3, nq, 2, 2)
            T = S + F.reshape(nobs, 3, nq, 2, 2)
            for u in range(3):
                complier = u == ComplianceClass.COMPLIER
                if complier:
                    s, t = S[:, u], T[:, u]  # (nobs, nq, 2, 2)
                else:
                    s, t = S[:, u].sum(axis=2), T[:, u].sum(axis=2)  # z pooled
                rows, succs, tots, offs = [], [], [], []
                it = (
                    itertools.product(range(nq), range(2), range(2))
                    if complier
                    else itertools.product(range(nq), range(2))
                )
                for combo in it:
                    if complier:
                        q, z, y = combo
                        cols = [np.full(nobs, float(y)), np.full(nobs, float(z))]
                        if saturate:
                            cols.append(np.full(nobs, float(z * y)))
                        sl = (slice(None), q, z, y)
                    else:
                        q, y = combo
                        cols = [np.full(nobs, float(y))]
                        sl = (slice(None), q, y)
                    rows.append(np.column_stack([lat.X_obs_sub] + cols))
                    succs.append(s[sl])
                    tots.append(t[sl])
                    offs.append(np.full(nobs, kappa[j, u] * q))
                start = np.concatenate(
                    [prev.theta[j, u], [prev.gamma[j, u]]]
                    + ([[prev.eta[j]]] if complier else [])
                    + ([[prev.eta_yz[j]]] if complier and saturate else [])
                )
                coef = _fit_or_keep(
                    lambda: fit_binomial_logit(
                        np.vstack(rows),
                        np.concatenate(succs),
                        np.concatenate(tots),
                        offset=np.concatenate(offs),
                        start=start,
                        max_iter=nm,
                        ridge=ridge,
                    )[0],
                    start,
                    float(np.concatenate(tots).sum()),
                )
                theta[j, u] = coef[: spec.k]
                gamma[j, u] = coef[spec.k]
                if complier:
                    eta[j] = coef[spec.k + 1]
                    if saturate:
                        eta_yz[j] = coef[spec.k + 2]

    return ParamSet(
        spec=spec,
        w=w,
        alpha=alpha,
        delta_a=delta_a,
        delta_c=delta_c,
        beta_n=beta_n,
        beta_a=beta_a,
        beta_c0=beta_c0,
        beta_c1=beta_c1,
        theta=theta,
        gamma=gamma,
        eta=eta,
        eta_yz=eta_yz,
    )


@dataclass
class FitResult:
    params: ParamSet
    loglik_trace: list[float]
    converged: bool
    iterations: int
    final_expectations: CellExpectations
    counts: ObservedCounts

    @property
    def spec(self) -> CovariateSpec:
        return self.params.spec

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


def _initial_params(spec, counts, rng, random_coefs: bool) -> ParamSet:
    params = ParamSet.zeros(spec)
    # add-one smoothed complete-case cell frequencies; smoothing keeps every
    # cell reachable so the EM can move mass onto cells only seen with
    # missing entries
    full_pattern = tuple([1] * spec.n_miss)
    cc = counts.tables[full_pattern].sum(axis=(-3, -2, -1))
    params.w = (cc + 1.0) / (cc.sum() + spec.n_cells)
    if random_coefs:
        for name in ("alpha", "delta_a", "delta_c", "beta_n", "beta_a", "beta_c0", "beta_c1"):
            setattr(params, name, rng.uniform(-0.5, 0.5, size=spec.m))
        params.theta = rng.uniform(-0.5, 0.5, size=(spec.n_miss, 3, spec.k))
        params.gamma = rng.uniform(-0.5, 0.5, size=(spec.n_miss, 3))
        params.eta = rng.uniform(-0.5, 0.5, size=spec.n_miss)
    return params


def fit_em(dataset, spec: CovariateSpec, config: FitConfig | None = None, sens=None) -> FitResult:
    """Fit the full model by EM, keeping the best of the configured restarts."""
    config = config or FitConfig()
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_records(list(dataset), spec)
    if len(dataset) == 0:
        raise ModelError("dataset is empty")
    for name, col in (("z", dataset.z), ("d", dataset.d)):
        if len(np.unique(col)) < 2:
            raise ModelError(f"both {name} arms must be present")
    counts = tabulate_observed(dataset, spec)
    rng = np.random.default_rng(config.init_seed)

    best: FitResult | None = None
    for restart in range(config.n_restarts):
        if restart == 0 and config.init_params is not None:
            params = config.init_params.copy()
        else:
            params = _initial_params(spec, counts, rng, random_coefs=restart > 0)
        try:
            result = _run_em(params, counts, config, sens)
        except EStepError:
            continue
        if best is None or result.loglik > best.loglik:
            best = result
    if best is None:
        raise EStepError("every restart hit a zero-probability stratum")
    return best


def _run_em(params: ParamSet, counts: ObservedCounts, config: FitConfig, sens) -> FitResult:
    spec = params.spec
    N, ll = _estep_core(params, counts, sens)
    trace = [ll]
    converged = False
    iterations = 0
    for it in range(1, config.max_em_iters + 1):
        iterations = it
        expect = CellExpectations(spec=spec, counts=N)
        new = m_step(expect, spec, config, prev=params, sens=sens)
        dpar = float(np.max(np.abs(new.pack() - params.pack())))
        params = new
        N, ll = _estep_core(params, counts, sens)
        trace.append(ll)
        if abs(trace[-1] - trace[-2]) < config.loglik_tol or dpar < config.param_tol:
            converged = True
            break
    return FitResult(
        params=params,
        loglik_trace=trace,
        converged=converged,
        iterations=iterations,
        final_expectations=CellExpectations(spec=spec, counts=N),
        counts=counts,
    )
