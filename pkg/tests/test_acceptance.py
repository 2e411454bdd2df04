"""End-to-end acceptance checks. Each prints one PASS/FAIL line; run with ``pytest -s`` to see them."""

import itertools
import math
import time
import zlib

import numpy as np
import pytest

from test_tensor import OPS
from vmivae import distributions as D
from vmivae.data_io import Dataset, binarize, load_mnist, make_toy_joint
from vmivae.em_gmm import GmmParams, em_fit
from vmivae.mi_eval import (
    DiscreteJoint,
    brute_force_mi,
    categorical_accuracy,
    kl_upper_bound,
    lemma1_check,
    mi_lower_bound,
    toy_kl_upper_bound,
    toy_mi_lower_bound,
)
from vmivae.models import AuxModel, Categorical, GaussianSubvector, LatentLayout, VaeModel
from vmivae.objectives import ObjectiveConfig, joint_kl_mc, objective_terms, total_objective
from vmivae.tensor import gradcheck, parameter
from vmivae.training import ModelConfig, TauSchedule, TrainConfig, train


def report(n: int, name: str, ok: bool, detail: str) -> None:
    print(f"\ncriterion {n:2d} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


# --------------------------------------------------------------------- 1


def _dist_cases(rng):
    mu, lv = parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=(3, 4)) * 0.5)
    logits = parameter(rng.normal(size=(3, 5)))
    x = rng.normal(size=(3, 4))
    bits = (rng.random((3, 4)) > 0.5).astype(float)
    eps, g = rng.normal(size=(3, 4)), rng.gumbel(size=(3, 5))
    y = rng.dirichlet(np.ones(5), size=3)
    gp = lambda: D.DiagGaussianParams(mu, lv)
    cp = lambda: D.CategoricalParams(logits, tau=0.7)
    return {
        "reparam_sample": (lambda: (D.reparam_sample(gp(), eps) * x).sum(), [mu, lv]),
        "gaussian_kl": (lambda: D.gaussian_kl_to_std(gp()).sum(), [mu, lv]),
        "gaussian_logpdf": (lambda: D.gaussian_logpdf(x, gp()).sum(), [mu, lv]),
        "gumbel_softmax": (lambda: (D.gumbel_softmax_sample(cp(), g) * y).sum(), [logits]),
        "categorical_kl": (lambda: D.categorical_kl_to_uniform(logits.softmax()).sum(), [logits]),
        "entropy": (lambda: D.entropy(logits.softmax()).sum(), [logits]),
        "categorical_logprob": (lambda: D.categorical_logprob(logits.softmax(), y).sum(), [logits]),
        "bernoulli_logits": (lambda: D.bernoulli_loglik_logits(bits, mu).sum(), [mu]),
        "bernoulli_probs": (lambda: D.bernoulli_loglik(bits, mu.sigmoid()).sum(), [mu]),
    }


def _objective_case(variant, extra, lam, layout, seed):
    rng = np.random.default_rng(seed)
    m = VaeModel(6, layout, rng, (7,), (7,))
    q = AuxModel(6, layout, rng, (5,))
    x = (rng.random((4, 6)) > 0.5).astype(float)
    cfg = ObjectiveConfig(variant, lam=lam, mc_samples=2, **extra)

    def fn():
        b = objective_terms(m, x, D.NoiseSource(seed), cfg, q, tau=0.8)
        return total_objective(b, b.mi_term, cfg.lam)

    return fn, m.parameters() + q.parameters()


def test_criterion_01_gradient_integrity():
    errors = {}
    for name in sorted(OPS):
        rng = np.random.default_rng(zlib.crc32(b"acc" + name.encode()))
        for t in range(3):
            params, fn = OPS[name](rng)
            errors[f"{name}#{t}"] = gradcheck(fn, params)
    for t in range(3):
        for name, (fn, params) in _dist_cases(np.random.default_rng(100 + t)).items():
            errors[f"{name}#{t}"] = gradcheck(fn, params)
    variants = [("elbo", {}), ("beta", {"beta": 2.5}), ("capacity", {"gamma": 1.5, "capacity": 25.0})]
    layouts = [LatentLayout(2, 3, Categorical()), LatentLayout(3, 0, GaussianSubvector((0, 2)))]
    for (variant, extra), lam, (li, layout), seed in itertools.product(variants, (0.0, 1.0), enumerate(layouts), (1, 2)):
        fn, params = _objective_case(variant, extra, lam, layout, seed)
        errors[f"{variant}/lam={lam}/layout{li}/seed{seed}"] = gradcheck(fn, params)
    worst = max(errors, key=errors.get)
    ok = len(errors) >= 100 and errors[worst] < 1e-4
    report(1, "gradient integrity", ok, f"{len(errors)} trials, worst {errors[worst]:.2e} at {worst}, tol 1e-4")


# --------------------------------------------------------------------- 2


def test_criterion_02_resampling_identity():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        nx, ny = rng.integers(1, 6, size=2)
        table = rng.dirichlet(np.ones(nx * ny)).reshape(nx, ny)
        worst = max(worst, lemma1_check(DiscreteJoint(table / table.sum()), rng.normal(size=(nx, ny)) * 3)[2])
    report(2, "resampling identity, exhaustive", worst < 1e-12, f"100 joints, worst |lhs-rhs| {worst:.1e}, tol 1e-12")


# --------------------------------------------------------------------- 3


def test_criterion_03_toy_sandwich():
    lines, ok = [], True
    for kind, k in (("independent", 4), ("identity", 4), ("noisy_channel", 2), ("noisy_channel", 4)):
        joint, toy = make_toy_joint(kind, seed=11, k=k, eps=0.1)
        exact = brute_force_mi(joint)
        lower = toy_mi_lower_bound(toy, 500, seed=1)
        upper = toy_kl_upper_bound(toy)
        tight = toy_mi_lower_bound(toy, 0, seed=2, init="exact")
        sandwich = lower.lower_bound - 3 * lower.lower_se <= exact <= upper + 1e-9
        tightness = abs(tight.lower_bound - exact) <= 3 * tight.lower_se + 1e-12
        ok &= sandwich and tightness
        lines.append(f"{kind}/K={k}: {lower.lower_bound:.4f}<= {exact:.4f} <={upper:.4f}, exact-Q {tight.lower_bound:.4f}")
    report(3, "MI sandwich on enumerable toys", ok, "; ".join(lines))


# --------------------------------------------------------------------- 4


def test_criterion_04_kl_decomposition():
    rng = np.random.default_rng(44)
    worst = 0.0
    for i in range(20):
        g = D.DiagGaussianParams(rng.normal(size=4), rng.normal(size=4) * 0.7)
        c = D.CategoricalParams(rng.normal(size=6) * 1.5)
        _, _, gap, se = joint_kl_mc(g, c, D.NoiseSource(1000 + i), 100_000)
        worst = max(worst, abs(gap) / se)
    report(4, "joint KL decomposition", worst < 3, f"20 posteriors at 1e5 samples, worst |gap|/SE {worst:.2f}, tol 3")


# --------------------------------------------------------------------- 5


def test_criterion_05_em():
    worst_step = math.inf
    for seed in range(50):
        rng = np.random.default_rng(seed)
        k, d = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        truth = GmmParams(rng.dirichlet(np.ones(k)), rng.normal(size=(k, d)) * 3, rng.uniform(0.3, 2.0, size=(k, d)))
        comp = rng.choice(k, size=300, p=truth.weights)
        x = truth.means[comp] + rng.normal(size=(300, d)) * np.sqrt(truth.variances[comp])
        _, trace = em_fit(x, k, iters=40, seed=seed)
        worst_step = min(worst_step, float(np.min(np.diff(trace))))
    rng = np.random.default_rng(5)
    centres = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    x = np.concatenate([c + rng.normal(size=(1000, 2)) for c in centres])
    p, _ = em_fit(x, 3, iters=100, seed=0)
    err = min(max(np.linalg.norm(p.means[list(s)] - centres, axis=1)) for s in itertools.permutations(range(3)))
    ok = worst_step >= -1e-9 and err < 0.1
    report(5, "EM monotone and recovers means", ok, f"worst trace step {worst_step:.2e} (tol -1e-9), mean error {err:.3f} (tol 0.1)")


# --------------------------------------------------------------------- 9


def test_criterion_09_determinism(tmp_path):
    rng = np.random.default_rng(9)
    protos = rng.random((5, 64)) > 0.5
    x = (protos[rng.integers(0, 5, 200)] ^ (rng.random((200, 64)) < 0.05)).astype(float)

    cfg = TrainConfig(
        epochs=2,
        batch_size=32,
        seed=17,
        tau=TauSchedule(1.0, 0.5),
        objective=ObjectiveConfig(lam=2.0, entropy="batch"),
        model=ModelConfig(LatentLayout(4, 5, Categorical()), (32,), (32,), (16,)),
    )
    train(Dataset(x), cfg, tmp_path / "a")
    train(Dataset(x), cfg, tmp_path / "b")
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes() for name in ("metrics.csv", "ckpt_final.bin")}
    report(9, "determinism", all(same.values()), ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items()))


# --------------------------------------------------------------------- 6-8

JOINT_SEEDS = (0, 1, 2)
JOINT_LAM = 5.0
JOINT_EPOCHS = 30
JOINT_BATCH = 256
EVAL_BUDGET = 1000


def _mnist():
    try:
        return binarize(load_mnist("train")), binarize(load_mnist("test"))
    except FileNotFoundError as exc:
        pytest.skip(f"MNIST unavailable: {exc}")


def _joint_config(seed: int, lam: float) -> TrainConfig:
    return TrainConfig(
        epochs=JOINT_EPOCHS,
        batch_size=JOINT_BATCH,
        seed=seed,
        objective=ObjectiveConfig(lam=lam, entropy="batch"),
        model=ModelConfig(LatentLayout(16, 10, Categorical())),
    )


@pytest.fixture(scope="module")
def joint_runs():
    """Per seed: accuracy, categorical KL and fresh-Q bound for the MI model and the lam=0 baseline."""
    tr, te = _mnist()
    start = time.process_time()
    rows = []
    for seed in JOINT_SEEDS:
        row = {}
        for tag, lam in (("mi", JOINT_LAM), ("base", 0.0)):
            model = train(tr, _joint_config(seed, lam)).model
            row[tag] = {
                "acc": categorical_accuracy(model, tr.images, tr.labels, te.images, te.labels),
                "kl": kl_upper_bound(model, te.images),
                "lb": mi_lower_bound(model, te.images, EVAL_BUDGET, seed=seed).lower_bound,
            }
        rows.append(row)
    return rows, (time.process_time() - start) / 60


def _per_seed(rows, key):
    return [r["mi"][key] for r in rows], [r["base"][key] for r in rows]


def _fmt(vals):
    return "[" + ", ".join(f"{v:.3f}" for v in vals) + "]"


def test_criterion_06_joint_accuracy(joint_runs):
    rows, cpu_min = joint_runs
    mi, base = _per_seed(rows, "acc")
    med = float(np.median(mi))
    gain = float(np.median(np.subtract(mi, base)))
    ok = med >= 0.5 and gain >= 0.2 and cpu_min <= 30
    report(6, "joint-latent categorical accuracy", ok,
           f"MI {_fmt(mi)} median {med:.3f} (tol >= 0.50); baseline {_fmt(base)}; median gain {gain:.3f} (tol >= 0.20); "
           f"{cpu_min:.1f} CPU-min for both arms (tol <= 30)")


def test_criterion_07_categorical_kl(joint_runs):
    rows, _ = joint_runs
    mi, base = _per_seed(rows, "kl")
    ok = np.mean(mi) >= 1.5 and np.mean(base) <= 0.5
    report(7, "categorical KL gap", ok, f"MI {_fmt(mi)} mean {np.mean(mi):.3f} (tol >= 1.5); baseline {_fmt(base)} mean {np.mean(base):.3f} (tol <= 0.5)")


def test_criterion_08_mi_ordering(joint_runs):
    rows, _ = joint_runs
    mi, base = _per_seed(rows, "lb")
    gap = float(np.median(np.subtract(mi, base)))
    report(8, "fresh-Q MI bound ordering", gap >= 0.5, f"MI {_fmt(mi)}, baseline {_fmt(base)}, median gap {gap:.3f} (tol >= 0.5)")


# --------------------------------------------------------------------- 10

SWEEP_LAMS = (0.0, 0.1, 1.0, 10.0)


def test_criterion_10_lambda_sweep():
    tr, te = _mnist()
    bounds = []
    for lam in SWEEP_LAMS:
        cfg = TrainConfig(
            epochs=10,
            seed=0,
            objective=ObjectiveConfig(lam=lam),
            model=ModelConfig(LatentLayout(16, 0, GaussianSubvector((0, 1)))),
        )
        bounds.append(mi_lower_bound(train(tr, cfg).model, te.images, EVAL_BUDGET, seed=0).lower_bound)
    inversions = int(np.sum(np.diff(bounds) < 0))
    report(10, "lambda sweep tendency", inversions <= 1,
           f"lam {list(SWEEP_LAMS)} -> bounds {_fmt(bounds)}, {inversions} inversion(s) (tol <= 1)")
