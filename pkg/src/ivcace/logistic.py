"""Weighted logistic maximum likelihood via Newton-Raphson.

Both fitters work on aggregated binomial/multinomial counts rather than
per-record rows, which is what the EM M-step produces.  Step-halving
guards the ascent; a ridge term is added to the Hessian only when it is
numerically singular (separation, empty cells).
"""

from __future__ import annotations

import numpy as np

from .model import LOGIT_CAP, sigmoid


class NewtonError(RuntimeError):
    pass


def _binom_loglik(eta, succ, tot):
    eta = np.clip(eta, -LOGIT_CAP, LOGIT_CAP)
    return float(succ @ eta - tot @ np.logaddexp(0.0, eta))


def fit_binomial_logit(
    X,
    succ,
    tot,
    offset=None,
    start=None,
    max_iter=50,
    tol=1e-10,
    ridge=1e-8,
):
    """Maximize the weighted binomial log-likelihood of succ/tot over X @ beta + offset.

    Returns (beta, hessian_inv).  hessian_inv is the inverse negative
    Hessian at the optimum (None when even the ridged solve fails).
    """
    X = np.asarray(X, dtype=float)
    succ = np.asarray(succ, dtype=float)
    tot = np.asarray(tot, dtype=float)
    n, p = X.shape
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    beta = np.zeros(p) if start is None else np.array(start, dtype=float)

    keep = tot > 0
    if not keep.any():
        raise NewtonError("no positive weights")
    X, succ, tot, offset = X[keep], succ[keep], tot[keep], offset[keep]

    eta = X @ beta + offset
    ll = _binom_loglik(eta, succ, tot)
    H = None
    for _ in range(max_iter):
        mu = sigmoid(eta)
        grad = X.T @ (succ - tot * mu)
        wdiag = tot * mu * (1.0 - mu)
        H = (X * wdiag[:, None]).T @ X
        try:
            step = np.linalg.solve(H, grad)
            if not np.isfinite(step).all():
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = np.linalg.solve(H + ridge * np.eye(p), grad)
        # step-halving on likelihood decrease
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            cand_ll = _binom_loglik(X @ cand + offset, succ, tot)
            if cand_ll >= ll - 1e-12:
                break
            scale *= 0.5
        else:
            break
        beta = beta + scale * step
        eta = X @ beta + offset
        improved = cand_ll - ll
        ll = cand_ll
        if np.max(np.abs(scale * step)) < tol and improved < 1e-12:
            break

    cov = None
    if H is not None:
        try:
            cov = np.linalg.inv(H)
        except np.linalg.LinAlgError:
            try:
                cov = np.linalg.inv(H + ridge * np.eye(p))
            except np.linalg.LinAlgError:
                cov = None
    return beta, cov


def _multinom_loglik(E, counts):
    # E: (n, K) logits with reference class logit fixed at 0 in column 0
    E = np.clip(E, -LOGIT_CAP, LOGIT_CAP)
    lse = np.log(np.exp(E).sum(axis=1))
    return float((counts * E).sum() - counts.sum(axis=1) @ lse)


def fit_multinomial_logit(X, counts, start=None, max_iter=50, tol=1e-10, ridge=1e-8):
    """Weighted multinomial logistic MLE with class 0 as the reference.

    counts has shape (n, K); returns coefficient matrix of shape (K-1, p)
    for classes 1..K-1.
    """
    X = np.asarray(X, dtype=float)
    counts = np.asarray(counts, dtype=float)
    n, p = X.shape
    K = counts.shape[1]
    nb = (K - 1) * p
    B = np.zeros((K - 1, p)) if start is None else np.array(start, dtype=float)

    keep = counts.sum(axis=1) > 0
    if not keep.any():
        raise NewtonError("no positive weights")
    X, counts = X[keep], counts[keep]
    tot = counts.sum(axis=1)

    def logits(Bm):
        E = np.zeros((X.shape[0], K))
        E[:, 1:] = X @ Bm.T
        return E

    ll = _multinom_loglik(logits(B), counts)
    for _ in range(max_iter):
        E = np.clip(logits(B), -LOGIT_CAP, LOGIT_CAP)
        P = np.exp(E)
        P /= P.sum(axis=1, keepdims=True)
        grad = np.concatenate(
            [X.T @ (counts[:, k] - tot * P[:, k]) for k in range(1, K)]
        )
        H = np.zeros((nb, nb))
        for a in range(1, K):
            for b in range(1, K):
                wab = tot * P[:, a] * ((a == b) - P[:, b])
                blk = (X * wab[:, None]).T @ X
                H[(a - 1) * p:a * p, (b - 1) * p:b * p] = blk
        try:
            step = np.linalg.solve(H, grad)
            if not np.isfinite(step).all():
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = np.linalg.solve(H + ridge * np.eye(nb), grad)
        step = step.reshape(K - 1, p)
        scale = 1.0
        for _ in range(30):
            cand = B + scale * step
            cand_ll = _multinom_loglik(logits(cand), counts)
            if cand_ll >= ll - 1e-12:
                break
            scale *= 0.5
        else:
            break
        B = B + scale * step
        improved = cand_ll - ll
        ll = cand_ll
        if np.max(np.abs(scale * step)) < tol and improved < 1e-12:
            break
    return B
