"""Diagonal-covariance Gaussian mixture fitted by expectation maximisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

VAR_FLOOR = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmParams:
    weights: np.ndarray  # [K]
    means: np.ndarray  # [K, D]
    variances: np.ndarray  # [K, D]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.means.shape != self.variances.shape or self.means.shape[0] != len(self.weights):
            raise ValueError("weights, means and variances disagree on K or D")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def k(self) -> int:
        return len(self.weights)

    def copy(self) -> "GmmParams":
        return GmmParams(self.weights.copy(), self.means.copy(), self.variances.copy())


def _as_data(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def component_logpdf(params: GmmParams, x) -> np.ndarray:
    """[N, K] matrix of log pi_k + log N(x_n; mu_k, diag var_k)."""
    x = _as_data(x)
    diff = x[:, None, :] - params.means[None, :, :]
    quad = (diff**2 / params.variances[None]).sum(axis=2)
    log_det = np.log(params.variances).sum(axis=1)
    d = x.shape[1]
    with np.errstate(divide="ignore"):
        log_w = np.log(params.weights)
    return log_w[None, :] - 0.5 * (d * LOG_2PI + log_det[None, :] + quad)


def gmm_loglik(params: GmmParams, x) -> np.ndarray:
    """Per-point log sum_k pi_k N(x; mu_k, var_k)."""
    return logsumexp(component_logpdf(params, x), axis=1)


def em_e_step(params: GmmParams, data) -> np.ndarray:
    lp = component_logpdf(params, data)
    return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))


def em_m_step(resp: np.ndarray, data) -> GmmParams:
    x = _as_data(data)
    nk = resp.sum(axis=0)
    safe = np.where(nk > 0, nk, 1.0)
    means = resp.T @ x / safe[:, None]
    var = np.einsum("nk,nkd->kd", resp, (x[:, None, :] - means[None]) ** 2) / safe[:, None]
    # empty components keep a valid, harmless shape
    var = np.where(nk[:, None] > 0, var, x.var(axis=0)[None, :])
    return GmmParams(nk / nk.sum(), means, np.maximum(var, VAR_FLOOR))


def kmeans_pp_init(data, k: int, rng: np.random.Generator) -> GmmParams:
    """Means from k-means++ seeding, shared global variance, equal weights."""
    x = _as_data(data)
    if k < 1 or k > len(x):
        raise ValueError(f"need 1 <= K <= N, got K={k}, N={len(x)}")
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.asarray(centers)[None]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        idx = rng.integers(len(x)) if total == 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
    var = np.maximum(np.tile(x.var(axis=0), (k, 1)), VAR_FLOOR)
    return GmmParams(np.full(k, 1.0 / k), np.asarray(centers), var)


def em_fit(data, k: int, iters: int = 100, seed: int = 0, init: GmmParams | None = None) -> tuple[GmmParams, list[float]]:
    """Run ``iters`` EM iterations. The trace holds the mean log-likelihood before the first and after every update."""
    x = _as_data(data)
    params = init.copy() if init is not None else kmeans_pp_init(x, k, np.random.default_rng(seed))
    trace = [float(gmm_loglik(params, x).mean())]
    for _ in range(iters):
        params = em_m_step(em_e_step(params, x), x)
        trace.append(float(gmm_loglik(params, x).mean()))
    return params, trace
