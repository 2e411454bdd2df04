"""Training objectives. Every term is a batch-averaged value in nats per sample.

The combined objective is ``variant_total + lam * mi_term`` where the variant
is the plain ELBO, the beta-weighted ELBO or the capacity-controlled ELBO.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import distributions as D
from .models import AuxModel, Categorical, GaussianSubvector, VaeModel, check_target, decode_logits, encode, q_infer
from .tensor import ContractError, Tensor, as_tensor, no_grad

VARIANTS = ("elbo", "beta", "capacity")
ENTROPY_MODES = ("prior", "batch")


@dataclass
class ObjectiveConfig:
    variant: str = "elbo"
    beta: float = 1.0
    gamma: float = 0.0
    capacity: float = 0.0
    lam: float = 0.0
    mc_samples: int = 1
    # H(target) in the MI term: the prior's entropy, or (categorical only) the
    # entropy of the batch-averaged q(c|x), which penalises a constant code
    entropy: str = "prior"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.entropy not in ENTROPY_MODES:
            raise ValueError(f"entropy must be one of {ENTROPY_MODES}, got {self.entropy!r}")
        for name in ("beta", "gamma", "capacity", "lam"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.mc_samples < 1:
            raise ContractError("mc_samples must be >= 1")


@dataclass
class ObjectiveBreakdown:
    recon: Tensor
    kl_gauss: Tensor
    kl_cat: Tensor
    mi_term: Tensor
    total: Tensor
    extras: dict = field(default_factory=dict)

    def floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("recon", "kl_gauss", "kl_cat", "mi_term", "total")}


@dataclass
class _Draw:
    z: Tensor | None
    c: Tensor | None
    logits: Tensor
    c_probs: Tensor | None = None  # q(c|x) rows the sample came from


def _zero() -> Tensor:
    return Tensor(0.0)


def _draw(m: VaeModel, gauss, cat, noise: D.NoiseSource, batch: int) -> _Draw:
    z = D.reparam_sample(gauss, noise.normal(gauss.mu.shape)) if gauss is not None else None
    c = D.gumbel_softmax_sample(cat, noise.gumbel(cat.logits.shape)) if cat is not None else None
    return _Draw(z, c, decode_logits(m, z, c), cat.probs if cat is not None else None)


def _kl_terms(gauss, cat) -> tuple[Tensor, Tensor]:
    kl_g = D.gaussian_kl_to_std(gauss).mean() if gauss is not None else _zero()
    kl_c = D.categorical_kl_to_uniform(cat.probs, cat.log_probs).mean() if cat is not None else _zero()
    return kl_g, kl_c


def _variant_total(cfg: ObjectiveConfig, recon: Tensor, kl: Tensor) -> Tensor:
    if cfg.variant == "beta":
        return recon - kl * cfg.beta
    if cfg.variant == "capacity":
        return recon - (kl - cfg.capacity).abs() * cfg.gamma
    return recon - kl


def mi_from_draw(m: VaeModel, q: AuxModel, draw: _Draw, entropy: str = "prior") -> Tensor:
    """log Q(target | x') averaged over the batch, plus H(target)."""
    x_prime = draw.logits.sigmoid()
    post = q_infer(q, x_prime)
    if isinstance(q.target, Categorical):
        logq = D.categorical_logprob(post.probs, draw.c, log_probs=post.log_probs)
        h = math.log(q.k) if entropy == "prior" else D.entropy(draw.c_probs.mean(axis=0))
    else:
        if entropy != "prior":
            raise ContractError("batch entropy is only defined for a categorical target")
        idx = list(q.target.indices)
        logq = D.gaussian_logpdf(draw.z[:, idx], post)
        h = D.gaussian_entropy(len(idx))
    return logq.mean() + h


def objective_terms(
    m: VaeModel,
    x,
    noise: D.NoiseSource,
    cfg: ObjectiveConfig,
    aux: AuxModel | None = None,
    tau: float = 1.0,
    with_mi: bool = True,
) -> ObjectiveBreakdown:
    """All terms from one forward pass; the first latent draw is shared by recon and the MI pipeline."""
    x = as_tensor(x)
    gauss, cat = encode(m, x, tau)
    recon = _zero()
    mi = _zero()
    draw0 = None
    for s in range(cfg.mc_samples):
        draw = _draw(m, gauss, cat, noise, x.shape[0])
        recon = recon + D.bernoulli_loglik_logits(x.data, draw.logits).mean()
        if s == 0:
            draw0 = draw
    recon = recon * (1.0 / cfg.mc_samples)
    kl_g, kl_c = _kl_terms(gauss, cat)
    total = _variant_total(cfg, recon, kl_g + kl_c)
    if aux is not None and with_mi:
        check_target(m, aux)
        mi = mi_from_draw(m, aux, draw0, cfg.entropy)
    return ObjectiveBreakdown(recon, kl_g, kl_c, mi, total, {"draw": draw0, "gauss": gauss, "cat": cat})


def elbo(m: VaeModel, x, noise: D.NoiseSource, mc_samples: int = 1, tau: float = 1.0) -> ObjectiveBreakdown:
    return objective_terms(m, x, noise, ObjectiveConfig("elbo", mc_samples=mc_samples), tau=tau)


def beta_elbo(m: VaeModel, x, noise: D.NoiseSource, beta: float, mc_samples: int = 1, tau: float = 1.0) -> ObjectiveBreakdown:
    if beta < 0:
        raise ContractError("beta must be >= 0")
    return objective_terms(m, x, noise, ObjectiveConfig("beta", beta=beta, mc_samples=mc_samples), tau=tau)


def capacity_elbo(m: VaeModel, x, noise: D.NoiseSource, gamma: float, capacity: float, mc_samples: int = 1, tau: float = 1.0) -> ObjectiveBreakdown:
    cfg = ObjectiveConfig("capacity", gamma=gamma, capacity=capacity, mc_samples=mc_samples)
    return objective_terms(m, x, noise, cfg, tau=tau)


def recompose_total(b: ObjectiveBreakdown, cfg: ObjectiveConfig) -> float:
    """Rebuild the variant total from the scalar parts (consistency check)."""
    f = b.floats()
    kl = f["kl_gauss"] + f["kl_cat"]
    if cfg.variant == "beta":
        return f["recon"] - cfg.beta * kl
    if cfg.variant == "capacity":
        return f["recon"] - cfg.gamma * abs(kl - cfg.capacity)
    return f["recon"] - kl


def mi_regularizer(m: VaeModel, q: AuxModel, x, noise: D.NoiseSource, tau: float = 1.0, entropy: str = "prior") -> Tensor:
    """Sample the target from q(.|x), decode to Bernoulli means x', score log Q(target | x'), add H."""
    check_target(m, q)
    gauss, cat = encode(m, as_tensor(x), tau)
    draw = _draw(m, gauss, cat, noise, len(x))
    return mi_from_draw(m, q, draw, entropy)


def total_objective(breakdown: ObjectiveBreakdown | Tensor | float, mi_term, lam: float):
    """Variant total plus lam times the MI term."""
    base = breakdown.total if isinstance(breakdown, ObjectiveBreakdown) else breakdown
    if lam == 0:
        return base
    return base + mi_term * lam


# ---------------------------------------------------------------------------
# checks against enumeration / Monte Carlo
# ---------------------------------------------------------------------------


def joint_kl_mc(
    gauss: D.DiagGaussianParams | None,
    cat: D.CategoricalParams | None,
    noise: D.NoiseSource,
    n_mc: int,
    chunk: int = 10_000,
) -> tuple[float, float, float, float]:
    """Monte Carlo KL(q(z, c) || N(0, I) x Uniform(K)) for one posterior.

    ``gauss`` / ``cat`` hold a single posterior (1-D parameters). The joint
    log-ratio is evaluated from the joint density of each sampled (z, c) pair,
    without splitting into the two closed-form KL terms.

    Returns (mc_estimate, analytic_sum, gap, standard_error).
    """
    mu = gauss.mu.data if gauss is not None else np.zeros(0)
    lv = gauss.log_var.data if gauss is not None else np.zeros(0)
    logp_c = cat.log_probs.data if cat is not None else None
    vals = []
    left = n_mc
    while left > 0:
        n = min(chunk, left)
        left -= n
        log_ratio = np.zeros(n)
        if gauss is not None:
            z = mu + np.exp(0.5 * lv) * noise.normal((n, mu.size))
            # joint density of all coordinates, written as one multivariate expression
            log_q = -0.5 * (mu.size * D.LOG_2PI + lv.sum() + (((z - mu) ** 2) / np.exp(lv)).sum(axis=1))
            log_p = -0.5 * (mu.size * D.LOG_2PI + (z**2).sum(axis=1))
            log_ratio += log_q - log_p
        if cat is not None:
            k = logp_c.size
            idx = np.argmax(logp_c + noise.gumbel((n, k)), axis=1)
            log_ratio += logp_c[idx] + math.log(k)
        vals.append(log_ratio)
    vals = np.concatenate(vals)
    analytic = 0.0
    if gauss is not None:
        analytic += D.gaussian_kl_to_std(gauss).item()
    if cat is not None:
        analytic += D.categorical_kl_to_uniform(cat.probs, cat.log_probs).item()
    mc = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else float("inf")
    return mc, analytic, mc - analytic, se


def joint_kl_decomposition_check(m: VaeModel, x, noise: D.NoiseSource, n_mc: int) -> tuple[float, float, float, float]:
    """Check the Gaussian + categorical KL split on the posterior of a single observation ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    with no_grad():
        gauss, cat = encode(m, x)
    g1 = D.DiagGaussianParams(gauss.mu.data[0], gauss.log_var.data[0]) if gauss is not None else None
    c1 = D.CategoricalParams(cat.logits.data[0]) if cat is not None else None
    return joint_kl_mc(g1, c1, noise, n_mc)


def mc_elbo(
    log_lik: Callable[[Tensor], Tensor],
    q: D.DiagGaussianParams,
    noise: D.NoiseSource,
    n_samples: int,
) -> tuple[float, float]:
    """Reparametrised ELBO estimate E_q[log p(x|z)] - KL(q || N(0, I)) for one posterior.

    ``log_lik`` maps a ``[n, dim]`` batch of latent samples to ``[n]`` log-likelihoods.
    Returns (estimate, standard_error).
    """
    mu = np.broadcast_to(q.mu.data, (n_samples, q.dim))
    lv = np.broadcast_to(q.log_var.data, (n_samples, q.dim))
    z = D.reparam_sample(D.DiagGaussianParams(mu, lv), noise.normal((n_samples, q.dim)))
    ll = log_lik(z).data
    kl = D.gaussian_kl_to_std(q).item()
    return float(ll.mean() - kl), float(ll.std(ddof=1) / math.sqrt(n_samples))


def enumerated_elbo(log_prior: np.ndarray, log_lik: np.ndarray, q: np.ndarray) -> float:
    """Exact ELBO for a discrete latent: sum_z q(z) [log p(z) + log p(x|z) - log q(z)]."""
    q = np.asarray(q, dtype=np.float64)
    mask = q > 0
    return float(np.sum(q[mask] * (log_prior[mask] + log_lik[mask] - np.log(q[mask]))))
