"""Alternating optimisation: per minibatch, ascend on Q with the VAE frozen, then on the VAE with Q frozen."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distributions as D
from .data_io import Dataset
from .models import AuxModel, LatentLayout, VaeModel, save_checkpoint
from .objectives import ObjectiveConfig, _Draw, mi_from_draw, objective_terms, total_objective
from .tensor import Adam, Tensor, clip_grad_norm, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "recon", "kl_gauss", "kl_cat", "mi_term", "total", "tau")


class TrainingDiverged(RuntimeError):
    """Raised when the objective or parameters go non-finite; carries the last good state."""

    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


@dataclass
class TauSchedule:
    start: float = 0.67
    end: float = 0.67
    mode: str = "exp"

    def __post_init__(self):
        if not (self.start >= self.end > 0):
            raise ValueError(f"need start >= end > 0, got start={self.start}, end={self.end}")
        if self.mode not in ("exp", "constant"):
            raise ValueError(f"unknown tau decay mode {self.mode!r}")


def tau_at(step: int, schedule: TauSchedule, total_steps: int) -> float:
    """Exponential interpolation from start (step 0) to end (step total_steps - 1)."""
    if schedule.mode == "constant" or schedule.start == schedule.end or total_steps <= 1:
        return schedule.start
    frac = min(max(step, 0) / (total_steps - 1), 1.0)
    if frac == 1.0:
        return schedule.end
    return schedule.start * (schedule.end / schedule.start) ** frac


@dataclass
class ModelConfig:
    layout: LatentLayout = field(default_factory=lambda: LatentLayout(32))
    encoder_hidden: tuple[int, ...] = (512, 256)
    decoder_hidden: tuple[int, ...] = (256, 512)
    aux_hidden: tuple[int, ...] = (256,)
    activation: str = "tanh"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    vae_lr: float = 1e-3
    q_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    tau: TauSchedule = field(default_factory=TauSchedule)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    q_steps_per_batch: int = 1
    eval_every: int = 1
    clip_norm: float = 5.0
    use_aux: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.q_steps_per_batch < 1:
            raise ValueError("q_steps_per_batch must be >= 1")
        if self.epochs < 0 or self.eval_every < 1:
            raise ValueError("epochs must be >= 0 and eval_every >= 1")


@dataclass
class MetricsRecord:
    step: int
    recon: float
    kl_gauss: float
    kl_cat: float
    mi_term: float
    total: float
    tau: float

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


@dataclass
class TrainState:
    model: VaeModel
    aux: AuxModel | None
    vae_opt: Adam
    q_opt: Adam | None
    noise: D.NoiseSource
    shuffle_rng: np.random.Generator
    step: int = 0
    history: list[MetricsRecord] = field(default_factory=list)


def _seeds(seed: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(4)


def init_state(data_dim: int, cfg: TrainConfig) -> TrainState:
    """Fresh model, auxiliary network and optimisers. Each consumer gets its own RNG stream."""
    s_model, s_aux, s_noise, s_shuffle = _seeds(cfg.seed)
    mc = cfg.model
    model = VaeModel(data_dim, mc.layout, np.random.default_rng(s_model), mc.encoder_hidden, mc.decoder_hidden, mc.activation)
    aux = None
    if cfg.use_aux and mc.layout.mi_target is not None:
        aux = AuxModel(data_dim, mc.layout, np.random.default_rng(s_aux), mc.aux_hidden, mc.activation)
    b1, b2 = cfg.betas
    vae_opt = Adam(model.parameters(), cfg.vae_lr, b1, b2, cfg.eps)
    q_opt = Adam(aux.parameters(), cfg.q_lr, b1, b2, cfg.eps) if aux is not None else None
    if cfg.objective.lam > 0 and aux is None:
        raise ValueError("lam > 0 needs a layout with an MI target")
    return TrainState(model, aux, vae_opt, q_opt, D.NoiseSource(s_noise), np.random.default_rng(s_shuffle))


def _detached(draw: _Draw) -> _Draw:
    return _Draw(
        None if draw.z is None else draw.z.detach(),
        None if draw.c is None else draw.c.detach(),
        draw.logits.detach(),
        None if draw.c_probs is None else draw.c_probs.detach(),
    )


def _finite(params) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)


def _guarded_step(opt: Adam, state: "TrainState") -> None:
    # the optimizer validates every gradient before touching any parameter
    try:
        opt.step()
    except FloatingPointError as exc:
        raise TrainingDiverged(str(exc), state) from exc


def train_step(state: TrainState, batch: np.ndarray, cfg: TrainConfig, tau: float | None = None) -> MetricsRecord:
    """One minibatch of the alternating scheme.

    A single latent draw is taken; phase A fits Q to it with the VAE frozen,
    phase B ascends the VAE objective (plus lam * MI under the updated Q) with Q frozen.
    """
    tau = cfg.tau.start if tau is None else tau
    ocfg = cfg.objective
    terms = objective_terms(state.model, batch, state.noise, ocfg, tau=tau, with_mi=False)
    draw = terms.extras["draw"]

    if state.aux is not None:
        frozen = _detached(draw)
        for _ in range(cfg.q_steps_per_batch):
            state.q_opt.zero_grad()
            q_loss = -mi_from_draw(state.model, state.aux, frozen, ocfg.entropy)
            if not math.isfinite(q_loss.item()):
                raise TrainingDiverged(f"non-finite Q objective at step {state.step + 1}", state)
            q_loss.backward()
            clip_grad_norm(state.aux.parameters(), cfg.clip_norm)
            _guarded_step(state.q_opt, state)

    if state.aux is not None and ocfg.lam > 0:
        mi = mi_from_draw(state.model, state.aux, draw, ocfg.entropy)
    elif state.aux is not None:
        with no_grad():
            mi = mi_from_draw(state.model, state.aux, _detached(draw), ocfg.entropy)
    else:
        mi = Tensor(0.0)
    total = total_objective(terms, mi, ocfg.lam)
    if not math.isfinite(total.item()):
        raise TrainingDiverged(f"non-finite objective at step {state.step + 1}", state)

    state.vae_opt.zero_grad()
    (-total).backward()
    if state.aux is not None:
        state.q_opt.zero_grad()
    clip_grad_norm(state.model.parameters(), cfg.clip_norm)
    _guarded_step(state.vae_opt, state)
    if not _finite(state.model.parameters()):
        raise TrainingDiverged(f"non-finite parameters after step {state.step + 1}", state)

    state.step += 1
    f = terms.floats()
    rec = MetricsRecord(state.step, f["recon"], f["kl_gauss"], f["kl_cat"], mi.item(), total.item(), tau)
    state.history.append(rec)
    return rec


def write_metrics(path, history: list[MetricsRecord], every: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for rec in history:
            if rec.step % every == 0:
                w.writerow(rec.row())


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train(dataset: Dataset, cfg: TrainConfig, output_dir=None, state: TrainState | None = None) -> TrainState:
    """Shuffled minibatch epochs of :func:`train_step`; fully determined by ``cfg.seed``.

    With ``output_dir`` set, writes ``metrics.csv`` and ``ckpt_final.bin`` there.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if state is None:
        state = init_state(dataset.dim, cfg)
    per_epoch = steps_per_epoch(n, cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    out = Path(output_dir) if output_dir is not None else None
    try:
        for epoch in range(cfg.epochs):
            perm = state.shuffle_rng.permutation(n)
            for b in range(per_epoch):
                idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                tau = tau_at(state.step, cfg.tau, total_steps)
                train_step(state, dataset.images[idx], cfg, tau)
            last = state.history[-1]
            log.info("epoch %d/%d recon=%.3f kl_g=%.3f kl_c=%.3f mi=%.3f", epoch + 1, cfg.epochs, last.recon, last.kl_gauss, last.kl_cat, last.mi_term)
    except TrainingDiverged:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out / "ckpt_last_good.bin", state.model, state.aux, state.noise.get_state(), {"step": state.step})
            write_metrics(out / "metrics.csv", state.history, cfg.eval_every)
        raise
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", state.history, cfg.eval_every)
        save_checkpoint(out / "ckpt_final.bin", state.model, state.aux, state.noise.get_state(), {"step": state.step, "image_shape": list(dataset.image_shape) if dataset.image_shape else None})
    return state

