"""Mutual-information measurement for fixed models.

Two estimators bracket I(target; x):

* a variational lower bound, E[log Q(target | x')] + H(target), obtained by
  fitting a fresh auxiliary network Q while the VAE stays frozen;
* the KL upper bound E_x[KL(q(target | x) || prior)].

For discrete toys everything is enumerable, so :func:`brute_force_mi` gives
the exact value the two bounds must sandwich.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import distributions as D
from .models import AuxModel, Categorical, VaeModel, decode, encode, q_infer
from .tensor import Adam, ContractError, DimensionError, Tensor, clip_grad_norm, no_grad, parameter


@dataclass
class DiscreteJoint:
    table: np.ndarray  # p(x = i, z = j)

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2:
            raise DimensionError("joint table must be 2-D")
        if np.any(t < 0):
            raise ContractError("joint table has negative entries")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ContractError(f"joint table sums to {t.sum()!r}, not 1")
        self.table = t

    @property
    def px(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def pz(self) -> np.ndarray:
        return self.table.sum(axis=0)


@dataclass
class MiReport:
    lower_bound: float = float("nan")
    lower_se: float = float("nan")
    upper_bound: float = float("nan")
    upper_se: float = 0.0
    entropy_const: float = float("nan")
    q_training_curve: list[float] = field(default_factory=list)


def brute_force_mi(j: DiscreteJoint) -> float:
    """sum_ij p_ij log(p_ij / (p_i. p_.j)), skipping zero cells."""
    t = j.table
    px, pz = j.px, j.pz
    total = 0.0
    for i in range(t.shape[0]):
        for k in range(t.shape[1]):
            if t[i, k] > 0:
                total += t[i, k] * math.log(t[i, k] / (px[i] * pz[k]))
    return total


def lemma1_check(j: DiscreteJoint, f) -> tuple[float, float, float]:
    """E_{x,y}[f(x, y)] against E_{x, y|x, x'|y}[f(x', y)], both by explicit enumeration."""
    t = j.table
    f = np.asarray(f, dtype=np.float64)
    if f.shape != t.shape:
        raise DimensionError(f"f table {f.shape} does not match joint {t.shape}")
    px, py = j.px, j.pz
    nx, ny = t.shape
    lhs = 0.0
    for x in range(nx):
        for y in range(ny):
            lhs += t[x, y] * f[x, y]
    rhs = 0.0
    for x in range(nx):
        if px[x] == 0:
            continue
        for y in range(ny):
            p_y_given_x = t[x, y] / px[x]
            if p_y_given_x == 0:
                continue
            for x2 in range(nx):
                rhs += px[x] * p_y_given_x * (t[x2, y] / py[y]) * f[x2, y]
    return lhs, rhs, abs(lhs - rhs)


# ---------------------------------------------------------------------------
# enumerable toy "VAE"
# ---------------------------------------------------------------------------


@dataclass
class ToyVae:
    """Discrete encoder q(z|x), decoder p(x|z) and data distribution p(x), all tables."""

    px: np.ndarray
    encoder: np.ndarray  # [X, Z] rows sum to 1
    decoder: np.ndarray  # [Z, X] rows sum to 1
    prior: np.ndarray  # [Z], used by the KL upper bound

    @classmethod
    def from_joint(cls, j: DiscreteJoint) -> "ToyVae":
        t = j.table
        px, pz = j.px, j.pz
        nz = t.shape[1]
        enc = np.where(px[:, None] > 0, t / np.where(px[:, None] > 0, px[:, None], 1.0), 1.0 / nz)
        dec = np.where(pz[:, None] > 0, t.T / np.where(pz[:, None] > 0, pz[:, None], 1.0), 1.0 / t.shape[0])
        return cls(px, enc, dec, np.full(nz, 1.0 / nz))

    @property
    def n_x(self) -> int:
        return len(self.px)

    @property
    def n_z(self) -> int:
        return self.encoder.shape[1]

    def generative_joint(self) -> DiscreteJoint:
        """Joint of (x', z) under z ~ aggregated posterior, x' ~ decoder."""
        qz = self.px @ self.encoder
        return DiscreteJoint(self.decoder.T * qz[None, :])

    def latent_entropy(self) -> float:
        return D.entropy(self.px @ self.encoder).item()

    def exact_q_logits(self) -> np.ndarray:
        """log p(z | x') under the generative joint, one row per x'."""
        t = self.generative_joint().table
        px2 = t.sum(axis=1, keepdims=True)
        post = np.where(px2 > 0, t / np.where(px2 > 0, px2, 1.0), 1.0 / self.n_z)
        return np.log(np.maximum(post, 1e-300))

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """(z, x') pairs from the lower-bound pipeline: x ~ p(x), z ~ q(z|x), x' ~ p(x'|z)."""
        x = rng.choice(self.n_x, size=n, p=self.px)
        cz = np.cumsum(self.encoder[x], axis=1)
        z = np.minimum((rng.random((n, 1)) > cz).sum(axis=1), self.n_z - 1)
        cx = np.cumsum(self.decoder[z], axis=1)
        x2 = np.minimum((rng.random((n, 1)) > cx).sum(axis=1), self.n_x - 1)
        return z, x2


def toy_kl_upper_bound(toy: ToyVae) -> float:
    """sum_x p(x) KL(q(z|x) || prior)."""
    total = 0.0
    for x in range(toy.n_x):
        q = toy.encoder[x]
        mask = q > 0
        total += toy.px[x] * float(np.sum(q[mask] * np.log(q[mask] / toy.prior[mask])))
    return total


def toy_mi_lower_bound(
    toy: ToyVae,
    budget: int,
    seed: int = 0,
    init: str = "random",
    batch: int = 256,
    lr: float = 0.05,
    passes: int = 10,
    eval_samples: int = 20_000,
) -> MiReport:
    """Fit a tabular Q(z | x') for ``budget`` Adam steps, then evaluate the bound over ``passes`` seeds."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    seeds = np.random.SeedSequence(seed).spawn(2 + passes)
    rng = np.random.default_rng(seeds[0])
    if init == "exact":
        logits = parameter(toy.exact_q_logits())
    elif init == "random":
        logits = parameter(np.random.default_rng(seeds[1]).normal(0.0, 0.1, (toy.n_x, toy.n_z)))
    else:
        raise ValueError(f"unknown init {init!r}")
    h = toy.latent_entropy()
    opt = Adam([logits], lr=lr)
    curve = []
    for _ in range(budget):
        z, x2 = toy.sample(rng, batch)
        logq = logits[x2].log_softmax()
        val = logq[np.arange(batch), z].mean()
        (-val).backward()
        opt.step()
        curve.append(val.item() + h)
    table = logits.data - np.log(np.exp(logits.data - logits.data.max(1, keepdims=True)).sum(1, keepdims=True)) - logits.data.max(1, keepdims=True)
    vals = []
    for s in seeds[2:]:
        z, x2 = toy.sample(np.random.default_rng(s), eval_samples)
        vals.append(float(table[x2, z].mean()) + h)
    vals = np.asarray(vals)
    return MiReport(
        lower_bound=float(vals.mean()),
        lower_se=float(vals.std(ddof=1) / math.sqrt(len(vals))),
        upper_bound=toy_kl_upper_bound(toy),
        entropy_const=h,
        q_training_curve=curve,
    )


# ---------------------------------------------------------------------------
# frozen VAE models
# ---------------------------------------------------------------------------


def target_entropy(model: VaeModel) -> float:
    t = model.layout.mi_target
    if isinstance(t, Categorical):
        return math.log(model.layout.categorical_k)
    return D.gaussian_entropy(len(t.indices))


def _sample_target(model: VaeModel, x: np.ndarray, noise: D.NoiseSource, tau: float, hard: bool):
    """Frozen-VAE pipeline: target ~ q(.|x), x' = decoder means. Returns plain arrays."""
    with no_grad():
        gauss, cat = encode(model, x, tau)
        z = D.reparam_sample(gauss, noise.normal(gauss.mu.shape)).data if gauss is not None else None
        c = None
        if cat is not None:
            g = noise.gumbel(cat.logits.shape)
            c = D.gumbel_max_sample(cat, g) if hard else D.gumbel_softmax_sample(cat, g).data
        x_prime = decode(model, z, c).data
    if isinstance(model.layout.mi_target, Categorical):
        target = c
    else:
        target = z[:, list(model.layout.mi_target.indices)]
    return target, x_prime


def _log_q(q: AuxModel, target: np.ndarray, x_prime: np.ndarray) -> Tensor:
    post = q_infer(q, x_prime)
    if isinstance(q.target, Categorical):
        return D.categorical_logprob(post.probs, target, log_probs=post.log_probs)
    return D.gaussian_logpdf(target, post)


def mi_lower_bound(
    model: VaeModel,
    data: np.ndarray,
    budget: int,
    seed: int = 0,
    tau: float = 0.67,
    hard: bool = True,
    batch: int = 128,
    lr: float = 1e-3,
    hidden: Sequence[int] = (256,),
    passes: int = 10,
    holdout: float = 0.2,
    clip_norm: float = 5.0,
) -> MiReport:
    """Variational lower bound on I(target; x') for a frozen model, with a freshly trained Q.

    Q is fitted on the first ``1 - holdout`` fraction of ``data`` for ``budget``
    steps; the bound is then evaluated on the held-out rows over ``passes``
    independent noise seeds, and the standard error is taken across passes.
    With ``hard`` the categorical target is an exact Gumbel-max sample and
    log Q is a true log-probability.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if model.layout.mi_target is None:
        raise ValueError("model has no MI target")
    data = np.asarray(data, dtype=np.float64)
    n_eval = max(1, int(round(len(data) * holdout)))
    fit, held = data[:-n_eval], data[-n_eval:]
    if len(fit) == 0:
        fit = data
    seeds = np.random.SeedSequence(seed).spawn(3 + passes)
    q = AuxModel(model.data_dim, model.layout, np.random.default_rng(seeds[0]), hidden, model.activation)
    opt = Adam(q.parameters(), lr=lr)
    noise = D.NoiseSource(seeds[1])
    pick = np.random.default_rng(seeds[2])
    h = target_entropy(model)
    curve = []
    for _ in range(budget):
        xb = fit[pick.choice(len(fit), size=min(batch, len(fit)), replace=False)]
        target, x_prime = _sample_target(model, xb, noise, tau, hard)
        val = _log_q(q, target, x_prime).mean()
        opt.zero_grad()
        (-val).backward()
        clip_grad_norm(q.parameters(), clip_norm)
        opt.step()
        curve.append(val.item() + h)
    vals = []
    for s in seeds[3:]:
        pass_noise = D.NoiseSource(s)
        acc = 0.0
        for i in range(0, len(held), 1000):
            target, x_prime = _sample_target(model, held[i : i + 1000], pass_noise, tau, hard)
            with no_grad():
                acc += _log_q(q, target, x_prime).sum().item()
        vals.append(acc / len(held) + h)
    vals = np.asarray(vals)
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan")
    return MiReport(lower_bound=float(vals.mean()), lower_se=se, entropy_const=h, q_training_curve=curve)


def kl_upper_bound(model: VaeModel, data: np.ndarray, batch: int = 1000) -> float:
    """Dataset mean of the analytic KL between q(target | x) and its prior."""
    t = model.layout.mi_target
    if t is None:
        raise ValueError("model has no MI target")
    total = 0.0
    with no_grad():
        for i in range(0, len(data), batch):
            gauss, cat = encode(model, data[i : i + batch])
            if isinstance(t, Categorical):
                kl = D.categorical_kl_to_uniform(cat.probs, cat.log_probs)
            else:
                kl = D.gaussian_kl_to_std(gauss.select(t.indices))
            total += kl.data.sum()
    return float(total / len(data))


def mi_report(model: VaeModel, data: np.ndarray, budget: int, seed: int = 0, **kw) -> MiReport:
    rep = mi_lower_bound(model, data, budget, seed, **kw)
    rep.upper_bound = kl_upper_bound(model, data)
    return rep


# ---------------------------------------------------------------------------
# categorical diagnostics
# ---------------------------------------------------------------------------


def posterior_probs(model: VaeModel, images: np.ndarray, batch: int = 1000) -> np.ndarray:
    """q(c | x) for every row of ``images``."""
    if model.layout.categorical_k < 2:
        raise ValueError("model has no categorical latent")
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            _, cat = encode(model, images[i : i + batch])
            out.append(cat.probs.data)
    return np.concatenate(out)


def prob_histogram(probs: np.ndarray, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Counts of all N*K posterior probabilities over ``bins`` equal bins of [0, 1]."""
    counts, edges = np.histogram(np.asarray(probs).ravel(), bins=bins, range=(0.0, 1.0))
    return counts, edges


def categorical_prob_histogram(model: VaeModel, data: np.ndarray, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
    return prob_histogram(posterior_probs(model, data), bins)


def label_counts(categories: np.ndarray, labels: np.ndarray, k: int, n_labels: int) -> np.ndarray:
    """K x L matrix: how many samples of each true label were assigned each category."""
    counts = np.zeros((k, n_labels), dtype=np.int64)
    np.add.at(counts, (np.asarray(categories), np.asarray(labels)), 1)
    return counts


def onehot_label_counts(model: VaeModel, images: np.ndarray, labels: np.ndarray, n_labels: int | None = None) -> np.ndarray:
    n_labels = int(labels.max()) + 1 if n_labels is None else n_labels
    cats = posterior_probs(model, images).argmax(axis=1)
    return label_counts(cats, labels, model.layout.categorical_k, n_labels)


def majority_mapping(categories: np.ndarray, labels: np.ndarray, k: int, n_labels: int) -> np.ndarray:
    """Category -> most frequent training label; ties and empty categories go to the lowest label."""
    return label_counts(categories, labels, k, n_labels).argmax(axis=1)


def accuracy_from_categories(train_cats, train_labels, test_cats, test_labels, k: int, n_labels: int) -> float:
    mapping = majority_mapping(train_cats, train_labels, k, n_labels)
    return float(np.mean(mapping[np.asarray(test_cats)] == np.asarray(test_labels)))


def categorical_accuracy(model: VaeModel, train_images, train_labels, test_images, test_labels, n_labels: int | None = None) -> float:
    """Use the argmax category as a classifier via a majority vote mapping learned on the train split."""
    if n_labels is None:
        n_labels = int(max(train_labels.max(), test_labels.max())) + 1
    k = model.layout.categorical_k
    tr = posterior_probs(model, train_images).argmax(axis=1)
    te = posterior_probs(model, test_images).argmax(axis=1)
    return accuracy_from_categories(tr, train_labels, te, test_labels, k, n_labels)
