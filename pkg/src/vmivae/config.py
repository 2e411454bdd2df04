"""Sectioned key-value run configuration (INI syntax) with typed defaults."""

from __future__ import annotations

import configparser
import io
from pathlib import Path

from .models import LatentLayout, parse_target
from .objectives import ObjectiveConfig
from .training import ModelConfig, TauSchedule, TrainConfig


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _str(text: str) -> str:
    return str(text).strip()


# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple]] = {
    "train": {
        "epochs": (int, "30"),
        "batch_size": (int, "128"),
        "seed": (int, "0"),
        "vae_lr": (float, "0.001"),
        "q_lr": (float, "0.001"),
        "beta1": (float, "0.9"),
        "beta2": (float, "0.999"),
        "eps": (float, "1e-08"),
        "q_steps_per_batch": (int, "1"),
        "eval_every": (int, "1"),
        "clip_norm": (float, "5.0"),
    },
    "tau": {
        "start": (float, "0.67"),
        "end": (float, "0.67"),
        "mode": (_str, "exp"),
    },
    "objective": {
        "variant": (_str, "elbo"),
        "beta": (float, "1.0"),
        "gamma": (float, "0.0"),
        "capacity": (float, "0.0"),
        "lam": (float, "0.0"),
        "mc_samples": (int, "1"),
        "entropy": (_str, "prior"),
    },
    "model": {
        "gaussian_dim": (int, "32"),
        "categorical_k": (int, "0"),
        "mi_target": (_str, "none"),
        "encoder_hidden": (_ints, "512,256"),
        "decoder_hidden": (_ints, "256,512"),
        "aux_hidden": (_ints, "256"),
        "activation": (_str, "tanh"),
    },
    "data": {
        "dir": (_str, ""),
        "limit": (int, "0"),
        "binarize": (_str, "threshold"),
        "threshold": (float, "0.5"),
    },
    "output": {
        "dir": (_str, "run"),
    },
    "eval": {
        "checkpoint": (_str, ""),
        "split": (_str, "test"),
        "budget": (int, "2000"),
        "q_lr": (float, "0.001"),
        "q_hidden": (_ints, "256"),
        "batch": (int, "128"),
        "tau": (float, "0.67"),
        "bins": (int, "10"),
        "holdout": (float, "0.2"),
        "passes": (int, "10"),
    },
    "traverse": {
        "indices": (_ints, "0"),
        "lo": (float, "-3.0"),
        "hi": (float, "3.0"),
        "steps": (int, "7"),
        "anchor": (int, "0"),
        "anchors": (_ints, "0,1,2,3,4,5,6,7,8,9"),
    },
    "em": {
        "k": (int, "3"),
        "iters": (int, "50"),
        "n_per_cluster": (int, "1000"),
        "dim": (int, "2"),
        "separation": (float, "10.0"),
    },
    "toy": {
        "kind": (_str, "noisy_channel"),
        "k": (int, "2"),
        "eps": (float, "0.1"),
        "budget": (int, "2000"),
        "init": (_str, "random"),
        "lr": (float, "0.05"),
    },
}


class RunConfig:
    """Raw string values for every schema key; typed access via ``get``."""

    def __init__(self):
        self.values: dict[str, dict[str, str]] = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}

    def set(self, section: str, key: str, value: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        parser = SCHEMA[section][key][0]
        try:
            parser(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {value!r} ({exc})") from None
        self.values[section][key] = str(value).strip()

    def get(self, section: str, key: str):
        return SCHEMA[section][key][0](self.values[section][key])

    def update_from_file(self, path) -> None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, value in cp.items(section):
                self.set(section, key, value)

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section in SCHEMA:
            cp[section] = dict(sorted(self.values[section].items()))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    # -- builders ---------------------------------------------------------

    def layout(self) -> LatentLayout:
        return LatentLayout(self.get("model", "gaussian_dim"), self.get("model", "categorical_k"), parse_target(self.get("model", "mi_target")))

    def train_config(self) -> TrainConfig:
        g = lambda k: self.get("train", k)  # noqa: E731
        o = lambda k: self.get("objective", k)  # noqa: E731
        model = ModelConfig(
            layout=self.layout(),
            encoder_hidden=self.get("model", "encoder_hidden"),
            decoder_hidden=self.get("model", "decoder_hidden"),
            aux_hidden=self.get("model", "aux_hidden"),
            activation=self.get("model", "activation"),
        )
        objective = ObjectiveConfig(o("variant"), o("beta"), o("gamma"), o("capacity"), o("lam"), o("mc_samples"), o("entropy"))
        tau = TauSchedule(self.get("tau", "start"), self.get("tau", "end"), self.get("tau", "mode"))
        return TrainConfig(
            epochs=g("epochs"),
            batch_size=g("batch_size"),
            seed=g("seed"),
            vae_lr=g("vae_lr"),
            q_lr=g("q_lr"),
            betas=(g("beta1"), g("beta2")),
            eps=g("eps"),
            tau=tau,
            objective=objective,
            model=model,
            q_steps_per_batch=g("q_steps_per_batch"),
            eval_every=g("eval_every"),
            clip_norm=g("clip_norm"),
        )
