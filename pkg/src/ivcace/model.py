"""Core model: parameter structures and probability evaluation.

The joint model factors as

    P(cell) * P(Z | x) * P(U | x) * P(Y | U, Z, x) * prod_j P(R_j | U, Z, Y, x_obs)

with a multinomial-logistic compliance model (never taker as reference
class) and binary-logistic IV, outcome and response models.  Exclusion
restrictions are structural: always takers and never takers share a single
outcome coefficient vector across IV arms, and their response models carry
no IV term.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np
from scipy.special import expit

# Linear predictors are clamped here before exponentiation; sigmoid(36.7)
# is indistinguishable from 1 in double precision, so boundary
# probabilities (e.g. a response probability of exactly 1) stay finite.
LOGIT_CAP = 36.7


class ModelError(ValueError):
    pass


class ComplianceClass(IntEnum):
    """Latent compliance stratum; defiers are excluded by monotonicity."""

    NEVER_TAKER = 0
    COMPLIER = 1
    ALWAYS_TAKER = 2


def sigmoid(t):
    """Inverse logit with the linear predictor clamped to +-LOGIT_CAP."""
    return expit(np.clip(t, -LOGIT_CAP, LOGIT_CAP))


def logit(p):
    """Log odds, saturating probabilities at the LOGIT_CAP boundary."""
    lo, hi = expit(-LOGIT_CAP), expit(LOGIT_CAP)
    p = np.clip(p, lo, hi)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class CovariateSpec:
    """Layout of the non-intercept covariates.

    Covariates are ordered categorical with integer level codes 1..q and
    enter linear predictors as integer scores.  The intercept is implicit
    (covariate index 0 of every design row).  Partially observed
    covariates must be listed after the fully observed ones.
    """

    names: tuple[str, ...]
    levels: tuple[int, ...]
    observed: tuple[bool, ...]

    def __post_init__(self):
        if not (len(self.names) == len(self.levels) == len(self.observed)):
            raise ModelError("names, levels and observed must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ModelError("covariate names must be unique")
        if any(q < 2 for q in self.levels):
            raise ModelError("every covariate needs at least 2 levels")
        if len(self.levels) == 0:
            raise ModelError("at least one covariate is required")
        seen_partial = False
        for obs in self.observed:
            if not obs:
                seen_partial = True
            elif seen_partial:
                raise ModelError(
                    "partially observed covariates must come after fully observed ones"
                )

    @property
    def n_cov(self) -> int:
        return len(self.names)

    @property
    def m(self) -> int:
        """Design dimension including intercept."""
        return 1 + self.n_cov

    @property
    def full_idx(self) -> tuple[int, ...]:
        return tuple(i for i, o in enumerate(self.observed) if o)

    @property
    def miss_idx(self) -> tuple[int, ...]:
        return tuple(i for i, o in enumerate(self.observed) if not o)

    @property
    def n_miss(self) -> int:
        return len(self.miss_idx)

    @property
    def k(self) -> int:
        """Response-model design dimension: intercept + fully observed covariates."""
        return 1 + len(self.full_idx)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.levels))

    def cells(self):
        """Iterate the full cross-classification as 1-based code tuples."""
        return itertools.product(*(range(1, q + 1) for q in self.levels))

    def x_row(self, cell) -> np.ndarray:
        cell = tuple(cell)
        if len(cell) != self.n_cov:
            raise ModelError(f"cell has {len(cell)} codes, expected {self.n_cov}")
        for code, q in zip(cell, self.levels):
            if not 1 <= code <= q:
                raise ModelError(f"level code {code} outside 1..{q}")
        return np.array((1.0,) + tuple(float(c) for c in cell))

    def x_obs_row(self, cell) -> np.ndarray:
        cell = tuple(cell)
        return np.array([1.0] + [float(cell[i]) for i in self.full_idx])


@dataclass(frozen=True)
class Record:
    """One observation: covariate codes (None where missing), IV, treatment, outcome."""

    x: tuple[int | None, ...]
    z: int
    d: int
    y: int

    def validate(self, spec: CovariateSpec):
        if len(self.x) != spec.n_cov:
            raise ModelError(f"record has {len(self.x)} covariates, expected {spec.n_cov}")
        for v in (self.z, self.d, self.y):
            if v not in (0, 1):
                raise ModelError("z, d and y must be 0 or 1")
        for i, (v, q, obs) in enumerate(zip(self.x, spec.levels, spec.observed)):
            if v is None:
                if obs:
                    raise ModelError(f"covariate {spec.names[i]} is fully observed but missing")
            elif not 1 <= v <= q:
                raise ModelError(f"covariate {spec.names[i]} code {v} outside 1..{q}")


@dataclass
class Dataset:
    """Column-oriented dataset; missing covariate codes are stored as -1."""

    x: np.ndarray  # (n, n_cov) int
    z: np.ndarray  # (n,) int
    d: np.ndarray  # (n,) int
    y: np.ndarray  # (n,) int
    debug: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=int)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.z = np.asarray(self.z, dtype=int)
        self.d = np.asarray(self.d, dtype=int)
        self.y = np.asarray(self.y, dtype=int)
        n = len(self.z)
        if not (self.x.shape[0] == len(self.d) == len(self.y) == n):
            raise ModelError("column lengths differ")

    def __len__(self) -> int:
        return len(self.z)

    def validate(self, spec: CovariateSpec):
        if self.x.shape[1] != spec.n_cov:
            raise ModelError(
                f"dataset has {self.x.shape[1]} covariates, expected {spec.n_cov}"
            )
        for col in (self.z, self.d, self.y):
            if not np.isin(col, (0, 1)).all():
                raise ModelError("z, d and y must be 0 or 1")
        for i, (q, obs) in enumerate(zip(spec.levels, spec.observed)):
            col = self.x[:, i]
            miss = col < 0
            if miss.any() and obs:
                raise ModelError(f"covariate {spec.names[i]} is fully observed but has missing values")
            present = col[~miss]
            if present.size and (present.min() < 1 or present.max() > q):
                raise ModelError(f"covariate {spec.names[i]} has codes outside 1..{q}")

    @classmethod
    def from_records(cls, records, spec: CovariateSpec | None = None) -> "Dataset":
        if spec is not None:
            for r in records:
                r.validate(spec)
        if not records:
            ncov = spec.n_cov if spec is not None else 1
            x = np.zeros((0, ncov), dtype=int)
        else:
            x = np.array(
                [[-1 if v is None else v for v in r.x] for r in records], dtype=int
            ).reshape(len(records), -1)
        return cls(
            x=x,
            z=np.array([r.z for r in records]),
            d=np.array([r.d for r in records]),
            y=np.array([r.y for r in records]),
        )

    def to_records(self) -> list[Record]:
        return [
            Record(
                x=tuple(None if v < 0 else int(v) for v in self.x[i]),
                z=int(self.z[i]),
                d=int(self.d[i]),
                y=int(self.y[i]),
            )
            for i in range(len(self))
        ]

    def subset(self, idx) -> "Dataset":
        return Dataset(
            x=self.x[idx],
            z=self.z[idx],
            d=self.d[idx],
            y=self.y[idx],
            debug={k: v[idx] for k, v in self.debug.items()},
        )

    def complete_mask(self) -> np.ndarray:
        return (self.x >= 0).all(axis=1)


@dataclass
class ParamSet:
    """Every free parameter of the joint model, with structural constraints.

    ``beta_a`` and ``beta_n`` are single vectors shared across IV arms
    (outcome exclusion restriction), and ``eta`` exists only for the
    complier class (response exclusion restriction); the restrictions can
    therefore not be violated at runtime.
    """

    spec: CovariateSpec
    w: np.ndarray        # cell probabilities, shape spec.levels
    alpha: np.ndarray    # IV model, (m,)
    delta_a: np.ndarray  # always-taker logits vs never taker, (m,)
    delta_c: np.ndarray  # complier logits vs never taker, (m,)
    beta_n: np.ndarray   # outcome, never takers (both arms), (m,)
    beta_a: np.ndarray   # outcome, always takers (both arms), (m,)
    beta_c0: np.ndarray  # outcome, compliers under z=0, (m,)
    beta_c1: np.ndarray  # outcome, compliers under z=1, (m,)
    theta: np.ndarray    # response, (n_miss, 3, k)
    gamma: np.ndarray    # response outcome shift, (n_miss, 3)
    eta: np.ndarray      # response IV shift, compliers only, (n_miss,)
    # complier-only y*z response interaction; zero unless the fit is asked
    # to saturate the complier response cells (the additive model has one
    # parameter fewer than the four (y, z) cells it spans)
    eta_yz: np.ndarray = None

    def __post_init__(self):
        spec = self.spec
        self.w = np.asarray(self.w, dtype=float).reshape(spec.levels)
        for name in ("alpha", "delta_a", "delta_c", "beta_n", "beta_a", "beta_c0", "beta_c1"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (spec.m,):
                raise ModelError(f"{name} must have shape ({spec.m},), got {v.shape}")
            setattr(self, name, v)
        self.theta = np.asarray(self.theta, dtype=float).reshape(spec.n_miss, 3, spec.k)
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(spec.n_miss, 3)
        self.eta = np.asarray(self.eta, dtype=float).reshape(spec.n_miss)
        if self.eta_yz is None:
            self.eta_yz = np.zeros(spec.n_miss)
        self.eta_yz = np.asarray(self.eta_yz, dtype=float).reshape(spec.n_miss)
        if (self.w < 0).any() or abs(self.w.sum() - 1.0) > 1e-12:
            raise ModelError("w must be nonnegative and sum to 1 within 1e-12")

    @classmethod
    def zeros(cls, spec: CovariateSpec) -> "ParamSet":
        m, k, nm = spec.m, spec.k, spec.n_miss
        w = np.full(spec.levels, 1.0 / spec.n_cells)
        return cls(
            spec=spec,
            w=w,
            alpha=np.zeros(m),
            delta_a=np.zeros(m),
            delta_c=np.zeros(m),
            beta_n=np.zeros(m),
            beta_a=np.zeros(m),
            beta_c0=np.zeros(m),
            beta_c1=np.zeros(m),
            theta=np.zeros((nm, 3, k)),
            gamma=np.zeros((nm, 3)),
            eta=np.zeros(nm),
            eta_yz=np.zeros(nm),
        )

    def beta(self, u: ComplianceClass, z: int) -> np.ndarray:
        u = ComplianceClass(u)
        if u is ComplianceClass.NEVER_TAKER:
            return self.beta_n
        if u is ComplianceClass.ALWAYS_TAKER:
            return self.beta_a
        return self.beta_c1 if z == 1 else self.beta_c0

    def pack(self) -> np.ndarray:
        """Flatten all parameters, for convergence checks."""
        return np.concatenate(
            [
                self.w.ravel(),
                self.alpha,
                self.delta_a,
                self.delta_c,
                self.beta_n,
                self.beta_a,
                self.beta_c0,
                self.beta_c1,
                self.theta.ravel(),
                self.gamma.ravel(),
                self.eta,
                self.eta_yz,
            ]
        )

    def copy(self) -> "ParamSet":
        return replace(
            self,
            w=self.w.copy(),
            alpha=self.alpha.copy(),
            delta_a=self.delta_a.copy(),
            delta_c=self.delta_c.copy(),
            beta_n=self.beta_n.copy(),
            beta_a=self.beta_a.copy(),
            beta_c0=self.beta_c0.copy(),
            beta_c1=self.beta_c1.copy(),
            theta=self.theta.copy(),
            gamma=self.gamma.copy(),
            eta=self.eta.copy(),
            eta_yz=self.eta_yz.copy(),
        )


def _check_x(params: ParamSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (params.spec.m,):
        raise ModelError(f"x must have shape ({params.spec.m},), got {x.shape}")
    return x


def prob_iv(params: ParamSet, x) -> float:
    """P(Z=1 | x) for a full design row x (intercept included)."""
    x = _check_x(params, x)
    return float(sigmoid(params.alpha @ x))


def prob_compliance(params: ParamSet, x) -> tuple[float, float, float]:
    """(p_never, p_complier, p_always) given x; never taker is the reference class."""
    x = _check_x(params, x)
    ta = np.clip(params.delta_a @ x, -LOGIT_CAP, LOGIT_CAP)
    tc = np.clip(params.delta_c @ x, -LOGIT_CAP, LOGIT_CAP)
    ea, ec = np.exp(ta), np.exp(tc)
    denom = 1.0 + ea + ec
    return (float(1.0 / denom), float(ec / denom), float(ea / denom))


def prob_outcome(params: ParamSet, u: ComplianceClass, z: int, x) -> float:
    """P(Y(z)=1 | U=u, x); identical across z for always and never takers."""
    x = _check_x(params, x)
    return float(sigmoid(params.beta(u, z) @ x))


def prob_response(params: ParamSet, j: int, u: ComplianceClass, z: int, y: int, x_obs) -> float:
    """P(R_j=1 | U=u, Z=z, Y=y, x_obs) for the j-th partially observed covariate.

    x_obs is the response design row: intercept followed by the fully
    observed covariate scores.  The IV shift contributes only for
    compliers.
    """
    spec = params.spec
    if not 0 <= j < spec.n_miss:
        raise ModelError(f"missing-covariate index {j} outside 0..{spec.n_miss - 1}")
    x_obs = np.asarray(x_obs, dtype=float)
    if x_obs.shape != (spec.k,):
        raise ModelError(f"x_obs must have shape ({spec.k},), got {x_obs.shape}")
    u = ComplianceClass(u)
    t = params.theta[j, u] @ x_obs + params.gamma[j, u] * (y == 1)
    if u is ComplianceClass.COMPLIER:
        t += params.eta[j] * (z == 1) + params.eta_yz[j] * (z == 1) * (y == 1)
    return float(sigmoid(t))


def cell_joint_prob(params: ParamSet, r, cell, u: ComplianceClass, z: int, y: int) -> float:
    """Joint probability of one full-lattice configuration (r, x-cell, u, z, y)."""
    spec = params.spec
    r = tuple(int(v) for v in r)
    if len(r) != spec.n_miss or any(v not in (0, 1) for v in r):
        raise ModelError("r must be a 0/1 tuple, one entry per partially observed covariate")
    cell = tuple(cell)
    x = spec.x_row(cell)
    x_obs = spec.x_obs_row(cell)
    u = ComplianceClass(u)
    p = float(params.w[tuple(c - 1 for c in cell)])
    pz = prob_iv(params, x)
    p *= pz if z == 1 else 1.0 - pz
    p *= prob_compliance(params, x)[u]
    py = prob_outcome(params, u, z, x)
    p *= py if y == 1 else 1.0 - py
    for j in range(spec.n_miss):
        pr = prob_response(params, j, u, z, y, x_obs)
        p *= pr if r[j] == 1 else 1.0 - pr
    return p


def cace(params: ParamSet, x) -> float:
    """Complier average causal effect at x: P(Y(1)=1|c,x) - P(Y(0)=1|c,x)."""
    x = _check_x(params, x)
    return float(sigmoid(params.beta_c1 @ x) - sigmoid(params.beta_c0 @ x))
