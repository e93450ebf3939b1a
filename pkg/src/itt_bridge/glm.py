"""Penalized GLM solvers, batched over weight vectors.

Every solver takes a weight matrix ``W`` of shape ``(B, n)`` and returns one
coefficient vector per row of ``W``. A single fit is ``B = 1``; a stratified
bootstrap is ``B`` rows of resampling counts, which is the same likelihood as
fitting the resampled data. For large ``B`` the weighted Gram matrices of all
replicates come out of one matrix product against the row-wise outer products
of the design, which is what keeps the bootstrap affordable.

The objective is the weighted *mean* log-likelihood minus
``||sqrt(ridge) * beta[1:]||^2 / 2`` (intercept unpenalized; ``ridge`` may
be a per-coefficient vector), so tolerances on the
score are independent of sample size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

SEPARATION_ETA = 25.0
FALLBACK_RIDGE = 1e-2
_BATCH_GRAM_MIN = 12


@dataclass
class BatchFit:
    coef: np.ndarray          # (B, p) or (B, L-1, p) for multinomial
    converged: np.ndarray     # (B,)
    n_iter: int
    score_norm: np.ndarray    # (B,) sup-norm of the penalized mean score
    separation: np.ndarray    # (B,) ridge fallback applied
    degenerate: np.ndarray    # (B,) outcome constant within the weighted cell


class _Gram:
    """Weighted Gram matrices ``X' diag(v_b) X`` for every row ``v_b`` of V."""

    def __init__(self, X: np.ndarray):
        self.X = X
        self._outer = None
        self._iu = np.triu_indices(X.shape[1])

    def __call__(self, V: np.ndarray) -> np.ndarray:
        X = self.X
        B, p = V.shape[0], X.shape[1]
        if B < _BATCH_GRAM_MIN:
            return np.stack([(X * v[:, None]).T @ X for v in V])
        if self._outer is None:
            i, j = self._iu
            self._outer = X[:, i] * X[:, j]
        flat = V @ self._outer
        G = np.empty((B, p, p))
        G[:, self._iu[0], self._iu[1]] = flat
        G[:, self._iu[1], self._iu[0]] = flat
        return G


def _penalty(p: int, ridge) -> np.ndarray:
    """Per-coefficient penalty; ``ridge`` is a scalar or a length-``p`` vector."""
    pen = np.array(np.broadcast_to(np.asarray(ridge, dtype=float), (p,)))
    pen[0] = 0.0
    return pen


def _solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(H, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.stack([np.linalg.lstsq(h, v, rcond=None)[0] for h, v in zip(H, g)])


def _damped(coef, step, objective, max_halvings: int = 30):
    """Newton update with step halving, applied only to replicates taking large steps.

    Near the optimum of a concave log-likelihood the full step is safe; the
    objective is evaluated only where ``max|step| > 1``.
    """
    flat = step.reshape(step.shape[0], -1)
    rows = np.flatnonzero(np.abs(flat).max(axis=1) > 1.0)
    new_coef = coef + step
    if rows.size == 0:
        return new_coef
    c0, st = coef[rows], step[rows]
    old = objective(c0, rows)
    t = np.ones(rows.size)
    cand = c0 + st
    for _ in range(max_halvings):
        bad = ~(objective(cand, rows) >= old - 1e-12 * np.abs(old))
        if not bad.any():
            break
        t[bad] *= 0.5
        cand[bad] = c0[bad] + t[bad].reshape((-1,) + (1,) * (st.ndim - 1)) * st[bad]
    new_coef[rows] = cand
    return new_coef


def _as_weights(W, n: int) -> np.ndarray:
    if W is None:
        return np.ones((1, n))
    W = np.asarray(W, dtype=float)
    return W[None, :] if W.ndim == 1 else W


def fit_identity(X, y, W=None, ridge: float = 1e-8) -> BatchFit:
    """Weighted least squares, closed form."""
    W = _as_weights(W, X.shape[0])
    tot = W.sum(axis=1)
    pen = _penalty(X.shape[1], ridge)
    G = _Gram(X)(W) / tot[:, None, None] + np.diag(pen)
    rhs = (W * y) @ X / tot[:, None]
    coef = _solve(G, rhs)
    resid = y[None, :] - coef @ X.T
    score = (W * resid) @ X / tot[:, None] - pen * coef
    B = W.shape[0]
    return BatchFit(coef, np.ones(B, bool), 1, np.abs(score).max(axis=1),
                    np.zeros(B, bool), np.zeros(B, bool))


def _logit_objective(X, y, W, tot, coef, pen):
    eta = coef @ X.T
    ll = (W * (y * eta + log_expit(-eta))).sum(axis=1) / tot
    return ll - 0.5 * (pen * coef * coef).sum(axis=1)


def fit_logit(X, y, W=None, ridge: float = 1e-8, tol: float = 1e-8, max_iter: int = 50,
              init=None, floor: float = 1e-3, fallback: bool = True) -> BatchFit:
    """Penalized logistic regression by Newton-Raphson (IRLS) with step halving.

    Replicates whose weighted outcome is constant get an intercept-only fit at
    ``logit(clip(mean, floor, 1 - floor))``. Replicates that fail to converge
    or whose linear predictor exceeds ``SEPARATION_ETA`` in magnitude are
    refit with ``FALLBACK_RIDGE`` and flagged in ``separation``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    W = _as_weights(W, n)
    B = W.shape[0]
    tot = W.sum(axis=1)
    ybar = (W @ y) / tot
    degenerate = (ybar <= 0.0) | (ybar >= 1.0)

    coef = np.zeros((B, p)) if init is None else np.array(np.broadcast_to(init, (B, p)), dtype=float)
    if init is None:
        coef[:, 0] = np.log(np.clip(ybar, floor, 1 - floor) / (1 - np.clip(ybar, floor, 1 - floor)))
    if degenerate.any():
        coef[degenerate] = 0.0
        yb = np.clip(ybar[degenerate], floor, 1 - floor)
        coef[degenerate, 0] = np.log(yb / (1 - yb))

    gram = _Gram(X)
    pen = _penalty(p, ridge)
    converged = degenerate.copy()
    score_norm = np.zeros(B)
    active = np.flatnonzero(~degenerate)
    it = 0
    for it in range(1, max_iter + 1):
        if active.size == 0:
            break
        Wa, ta, ca = W[active], tot[active], coef[active]
        mu = expit(ca @ X.T)
        score = (Wa * (y - mu)) @ X / ta[:, None] - pen * ca
        snorm = np.abs(score).max(axis=1)
        score_norm[active] = snorm
        done = snorm <= tol
        converged[active[done]] = True
        keep = ~done
        if not keep.any():
            active = active[:0]
            break
        active, Wa, ta, ca, mu, score = active[keep], Wa[keep], ta[keep], ca[keep], mu[keep], score[keep]
        H = gram(Wa * mu * (1 - mu)) / ta[:, None, None] + np.diag(pen)
        step = _solve(H, score)
        coef[active] = _damped(
            ca, step, lambda c, rows: _logit_objective(X, y, Wa[rows], ta[rows], c, pen))

    if active.size:
        mu = expit(coef[active] @ X.T)
        score = (W[active] * (y - mu)) @ X / tot[active, None] - pen * coef[active]
        score_norm[active] = np.abs(score).max(axis=1)
        converged[active] = score_norm[active] <= tol

    separation = np.zeros(B, bool)
    if fallback:
        eta_max = np.abs(coef @ X.T).max(axis=1)
        suspect = (~degenerate) & ((~converged) | (eta_max > SEPARATION_ETA))
        if suspect.any():
            idx = np.flatnonzero(suspect)
            retry = fit_logit(X, y, W[idx], ridge=np.maximum(ridge, FALLBACK_RIDGE), tol=tol,
                              max_iter=max_iter, init=None, floor=floor, fallback=False)
            coef[idx] = retry.coef
            converged[idx] = retry.converged
            score_norm[idx] = retry.score_norm
            separation[idx] = True
    return BatchFit(coef, converged, it, score_norm, separation, degenerate)


def _mlogit_probs(X: np.ndarray, coef: np.ndarray) -> list[np.ndarray]:
    """Per-class probability arrays ``(B, n)``; class 0 is the reference."""
    B, K, p = coef.shape
    eta = (coef.reshape(B * K, p) @ X.T).reshape(B, K, -1)
    m = np.maximum(eta.max(axis=1), 0.0)
    e = [np.exp(-m)] + [np.exp(eta[:, k] - m) for k in range(K)]
    tot = sum(e)
    return [v / tot for v in e]


def softmax_ref(X: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Class probabilities ``(B, n, L)``; class 0 is the reference."""
    return np.stack(_mlogit_probs(X, coef), axis=2)


def _mlogit_objective(X, onehot, W, tot, coef, pen):
    B, K, p = coef.shape
    eta = (coef.reshape(B * K, p) @ X.T).reshape(B, K, -1)
    m = np.maximum(eta.max(axis=1), 0.0)
    lse = m + np.log(np.exp(-m) + np.exp(eta - m[:, None, :]).sum(axis=1))
    ll = -(W * lse).sum(axis=1)
    for k in range(K):
        ll += (W * eta[:, k]) @ onehot[k + 1]
    return ll / tot - 0.5 * (pen * coef * coef).sum(axis=(1, 2))


def _mlogit_score(X, onehot, P, W, tot):
    return np.stack([(W * (onehot[k] - P[k])) @ X for k in range(1, len(P))], axis=1) / tot[:, None, None]


def fit_mlogit(X, cls, n_classes: int, W=None, ridge: float = 1e-8, tol: float = 1e-8,
               max_iter: int = 50, init=None) -> BatchFit:
    """Multinomial logit with class 0 as reference, Newton with step halving."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    L = n_classes
    W = _as_weights(W, n)
    B = W.shape[0]
    tot = W.sum(axis=1)
    onehot = [(np.asarray(cls) == k).astype(float) for k in range(L)]
    pen = np.broadcast_to(_penalty(p, ridge), (L - 1, p))
    coef = np.zeros((B, L - 1, p)) if init is None else np.array(
        np.broadcast_to(init, (B, L - 1, p)), dtype=float)
    if init is None:
        frac = np.clip(np.stack([W @ o for o in onehot], axis=1) / tot[:, None], 1e-6, None)
        coef[:, :, 0] = np.log(frac[:, 1:] / frac[:, :1])
    gram = _Gram(X)
    K = (L - 1) * p
    converged = np.zeros(B, bool)
    score_norm = np.zeros(B)
    active = np.arange(B)
    it = 0
    for it in range(1, max_iter + 1):
        Wa, ta, ca = W[active], tot[active], coef[active]
        P = _mlogit_probs(X, ca)
        score = _mlogit_score(X, onehot, P, Wa, ta) - pen * ca
        snorm = np.abs(score).reshape(active.size, -1).max(axis=1)
        score_norm[active] = snorm
        done = snorm <= tol
        converged[active[done]] = True
        keep = ~done
        if not keep.any():
            active = active[:0]
            break
        active, Wa, ta, ca, score = active[keep], Wa[keep], ta[keep], ca[keep], score[keep]
        P = [v[keep] for v in P]
        nb = active.size
        H = np.zeros((nb, K, K))
        for j in range(1, L):
            for k in range(j, L):
                v = Wa * P[j] * (float(j == k) - P[k])
                blk = gram(v) / ta[:, None, None]
                a, b = (j - 1) * p, (k - 1) * p
                H[:, a:a + p, b:b + p] = blk
                if j != k:
                    H[:, b:b + p, a:a + p] = blk
        H += np.diag(pen.reshape(-1))
        step = _solve(H, score.reshape(nb, K)).reshape(nb, L - 1, p)
        coef[active] = _damped(
            ca, step, lambda c, rows: _mlogit_objective(X, onehot, Wa[rows], ta[rows], c, pen))
    if active.size:
        P = _mlogit_probs(X, coef[active])
        score = _mlogit_score(X, onehot, P, W[active], tot[active]) - pen * coef[active]
        score_norm[active] = np.abs(score).reshape(active.size, -1).max(axis=1)
        converged[active] = score_norm[active] <= tol
    return BatchFit(coef, converged, it, score_norm, np.zeros(B, bool), np.zeros(B, bool))
