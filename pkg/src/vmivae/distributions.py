"""Diagonal Gaussians, Gumbel-softmax categoricals and Bernoulli likelihoods.

All quantities are in nats. Functions reduce over the last axis, so a
``[batch, dim]`` input gives a ``[batch]`` result and a ``[dim]`` input gives a
scalar. Inputs may be plain arrays or :class:`~vmivae.tensor.Tensor`; the
result is always a Tensor so it can sit inside a differentiable objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, as_tensor

PROB_FLOOR = 1e-7
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussianParams:
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.log_var = as_tensor(self.log_var)
        if self.mu.shape != self.log_var.shape:
            raise DimensionError(f"mu {self.mu.shape} vs log_var {self.log_var.shape}")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def std(self) -> Tensor:
        return (self.log_var * 0.5).exp()

    def select(self, indices) -> "DiagGaussianParams":
        idx = (Ellipsis, list(indices))
        return DiagGaussianParams(self.mu[idx], self.log_var[idx])


@dataclass
class CategoricalParams:
    logits: Tensor
    tau: float = 1.0

    def __post_init__(self):
        self.logits = as_tensor(self.logits)
        if self.logits.shape[-1] < 2:
            raise ContractError("a categorical needs K >= 2")
        if not self.tau > 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")

    @property
    def k(self) -> int:
        return self.logits.shape[-1]

    @property
    def log_probs(self) -> Tensor:
        return self.logits.log_softmax()

    @property
    def probs(self) -> Tensor:
        return self.logits.softmax()


class NoiseSource:
    """Seeded stream of standard normal, Gumbel(0, 1) and uniform draws."""

    def __init__(self, seed: int | np.random.SeedSequence | None = 0):
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def normal(self, shape) -> np.ndarray:
        return self.rng.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        # open interval (0, 1): both endpoints excluded
        u = self.rng.random(shape)
        while np.any(u == 0.0):
            u = np.where(u == 0.0, self.rng.random(shape), u)
        return u

    def gumbel(self, shape) -> np.ndarray:
        return -np.log(-np.log(self.uniform(shape)))

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def reparam_sample(p: DiagGaussianParams, eps) -> Tensor:
    """z = mu + exp(log_var / 2) * eps."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != p.mu.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match mu {p.mu.shape}")
    return p.mu + p.std * eps


def gaussian_kl_to_std(p: DiagGaussianParams) -> Tensor:
    """KL(N(mu, diag(sigma^2)) || N(0, I)) summed over the last axis."""
    return ((p.mu.square() + p.log_var.exp() - 1.0 - p.log_var) * 0.5).sum(axis=-1)


def gaussian_logpdf(x, p: DiagGaussianParams) -> Tensor:
    x = as_tensor(x)
    return ((LOG_2PI + p.log_var + (x - p.mu).square() / p.log_var.exp()) * -0.5).sum(axis=-1)


def gaussian_entropy(dim: int) -> float:
    """Differential entropy of N(0, I_dim)."""
    return 0.5 * dim * math.log(2.0 * math.pi * math.e)


def gumbel_softmax_sample(p: CategoricalParams, g) -> Tensor:
    """Relaxed one-hot sample: softmax((log pi + g) / tau)."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != p.logits.shape:
        raise DimensionError(f"gumbel noise {g.shape} does not match logits {p.logits.shape}")
    return ((p.log_probs + g) * (1.0 / p.tau)).softmax()


def gumbel_max_sample(p: CategoricalParams, g) -> np.ndarray:
    """Exact categorical draw as a one-hot array (argmax of log pi + g)."""
    scores = p.log_probs.data + np.asarray(g)
    return np.eye(p.k)[np.argmax(scores, axis=-1)]


def _check_simplex(probs: np.ndarray) -> None:
    if np.any(probs < 0):
        raise ContractError("probabilities must be non-negative")


def _xlogy(x: Tensor, y: Tensor) -> Tensor:
    # x * log(y) with 0 * log 0 := 0
    pad = np.where((y.data == 0) & (x.data == 0), 1.0, 0.0)
    with np.errstate(divide="ignore"):
        return x * (y + pad).log()


def categorical_kl_to_uniform(probs, log_probs=None) -> Tensor:
    """sum_i p_i log(p_i K); pass ``log_probs`` when available for exact gradients."""
    probs = as_tensor(probs)
    _check_simplex(probs.data)
    k = probs.shape[-1]
    if log_probs is None:
        return (_xlogy(probs, probs) + probs * math.log(k)).sum(axis=-1)
    return (probs * (as_tensor(log_probs) + math.log(k))).sum(axis=-1)


def entropy(probs) -> Tensor:
    """-sum_i p_i log p_i."""
    probs = as_tensor(probs)
    _check_simplex(probs.data)
    return -(_xlogy(probs, probs).sum(axis=-1))


def bernoulli_loglik(x, p) -> Tensor:
    """sum_i x_i log p_i + (1 - x_i) log(1 - p_i), with p clamped to [1e-7, 1 - 1e-7]."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    p = as_tensor(p)
    if x.shape != p.shape:
        raise DimensionError(f"x {x.shape} vs p {p.shape}")
    if np.any((x < 0) | (x > 1)):
        raise ContractError("observations must lie in [0, 1]")
    pc = p.clip(PROB_FLOOR, 1.0 - PROB_FLOOR)
    return (pc.log() * x + (1.0 - pc).log() * (1.0 - x)).sum(axis=-1)


def bernoulli_loglik_logits(x, logits) -> Tensor:
    """Same quantity as :func:`bernoulli_loglik` with p = sigmoid(logits), computed stably."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    logits = as_tensor(logits)
    return (logits.log_sigmoid() * x + (-logits).log_sigmoid() * (1.0 - x)).sum(axis=-1)


def categorical_logprob(probs, y, log_probs=None) -> Tensor:
    """sum_i y_i log probs_i. Exact log-probability for one-hot y, cross-entropy for relaxed y."""
    probs = as_tensor(probs)
    y = as_tensor(y)
    if probs.shape[-1] != y.shape[-1]:
        raise DimensionError(f"probs K={probs.shape[-1]} vs y K={y.shape[-1]}")
    _check_simplex(probs.data)
    _check_simplex(y.data)
    if log_probs is None:
        return _xlogy(y, probs).sum(axis=-1)
    return (y * as_tensor(log_probs)).sum(axis=-1)
