"""Command-line entry point.

Every config key is also a flag, ``--section.key VALUE``; flags override the
``--config`` file, which overrides built-in defaults. Exit codes: 0 ok,
1 user error (bad config, missing file, invalid input), 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import SCHEMA, ConfigError, RunConfig
from .data_io import Dataset, IdxFormatError, binarize, load_mnist, make_toy_joint
from .em_gmm import em_fit
from .figures import cat_traverse, traverse, write_pgm
from .mi_eval import (
    brute_force_mi,
    categorical_accuracy,
    categorical_prob_histogram,
    kl_upper_bound,
    mi_lower_bound,
    onehot_label_counts,
    toy_mi_lower_bound,
)
from .models import load_checkpoint
from .tensor import ContractError, DimensionError
from .training import train

log = logging.getLogger("vmivae")

COMMANDS = ("train", "eval", "traverse", "cat-traverse", "em-demo", "toy-mi")
USER_ERRORS = (ConfigError, FileNotFoundError, IdxFormatError, ContractError, DimensionError, ValueError, IndexError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vmivae", description="VAEs with a mutual-information regulariser.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with [section] key = value entries")
        p.add_argument("--seed", type=int, help="shorthand for --train.seed")
        p.add_argument("--out", help="shorthand for --output.dir")
        p.add_argument("--data-dir", help="shorthand for --data.dir (default: $VMIVAE_DATA_DIR)")
        p.add_argument("--checkpoint", help="shorthand for --eval.checkpoint")
        p.add_argument("-v", "--verbose", action="store_true")
        for section, keys in SCHEMA.items():
            for key in keys:
                p.add_argument(f"--{section}.{key}", dest=f"cfg:{section}.{key}", metavar="VALUE")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        if not Path(args.config).exists():
            raise FileNotFoundError(f"config file {args.config} not found")
        cfg.update_from_file(args.config)
    for dest, value in sorted(vars(args).items()):
        if dest.startswith("cfg:") and value is not None:
            section, key = dest[4:].split(".", 1)
            cfg.set(section, key, value)
    for flag, (section, key) in {
        "seed": ("train", "seed"),
        "out": ("output", "dir"),
        "data_dir": ("data", "dir"),
        "checkpoint": ("eval", "checkpoint"),
    }.items():
        if getattr(args, flag) is not None:
            cfg.set(section, key, str(getattr(args, flag)))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.get("output", "dir"))
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved")
    return out


def _load_data(cfg: RunConfig, split: str) -> Dataset:
    limit = cfg.get("data", "limit") or None
    ds = load_mnist(split, cfg.get("data", "dir") or None, limit)
    return binarize(ds, cfg.get("data", "binarize"), cfg.get("data", "threshold"), seed=cfg.get("train", "seed"))


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _checkpoint(cfg: RunConfig):
    path = cfg.get("eval", "checkpoint")
    if not path:
        raise ConfigError("this command needs --checkpoint")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _image_shape(ckpt, data_dim: int) -> tuple[int, int]:
    shape = ckpt.meta.get("image_shape")
    if shape:
        return tuple(shape)
    side = int(round(data_dim**0.5))
    if side * side != data_dim:
        raise ConfigError(f"cannot infer a square image shape for {data_dim} pixels")
    return side, side


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ds = _load_data(cfg, "train")
    tc = cfg.train_config()
    state = train(ds, tc, out)
    last = state.history[-1]
    print(f"trained {state.step} steps: recon={last.recon:.4f} kl_gauss={last.kl_gauss:.4f} kl_cat={last.kl_cat:.4f} mi={last.mi_term:.4f}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ckpt = _checkpoint(cfg)
    model = ckpt.model
    ds = _load_data(cfg, cfg.get("eval", "split"))
    reports = out / "reports"
    summary = []
    if model.layout.mi_target is not None:
        rep = mi_lower_bound(
            model,
            ds.images,
            cfg.get("eval", "budget"),
            seed=cfg.get("train", "seed"),
            tau=cfg.get("eval", "tau"),
            batch=cfg.get("eval", "batch"),
            lr=cfg.get("eval", "q_lr"),
            hidden=cfg.get("eval", "q_hidden"),
            passes=cfg.get("eval", "passes"),
            holdout=cfg.get("eval", "holdout"),
        )
        rep.upper_bound = kl_upper_bound(model, ds.images)
        _write_csv(
            reports / "mi_report.csv",
            ["lower_bound", "lower_se", "upper_bound", "upper_se", "entropy_const"],
            [[_fmt(rep.lower_bound), _fmt(rep.lower_se), _fmt(rep.upper_bound), _fmt(rep.upper_se), _fmt(rep.entropy_const)]],
        )
        _write_csv(reports / "q_curve.csv", ["step", "lower_bound"], [[i + 1, _fmt(v)] for i, v in enumerate(rep.q_training_curve)])
        summary.append(f"mi_lower_bound = {rep.lower_bound:.4f} +- {rep.lower_se:.4f} nats")
        summary.append(f"kl_upper_bound = {rep.upper_bound:.4f} nats")
    if model.layout.categorical_k >= 2:
        counts, edges = categorical_prob_histogram(model, ds.images, cfg.get("eval", "bins"))
        _write_csv(reports / "prob_histogram.csv", ["bin_lo", "bin_hi", "count"], [[_fmt(edges[i]), _fmt(edges[i + 1]), int(c)] for i, c in enumerate(counts)])
        if ds.labels is not None:
            n_labels = int(ds.labels.max()) + 1
            mat = onehot_label_counts(model, ds.images, ds.labels, n_labels)
            _write_csv(reports / "onehot_counts.csv", ["category"] + [f"label_{j}" for j in range(n_labels)], [[i, *map(int, row)] for i, row in enumerate(mat)])
            train_ds = _load_data(cfg, "train")
            acc = categorical_accuracy(model, train_ds.images, train_ds.labels, ds.images, ds.labels)
            _write_csv(reports / "accuracy.csv", ["accuracy"], [[_fmt(acc)]])
            summary.append(f"categorical_accuracy = {acc:.4f}")
    if not summary:
        summary.append("model has neither an MI target nor a categorical latent; nothing to report")
    text = "\n".join(summary) + "\n"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def _anchor_rows(cfg: RunConfig, idx) -> np.ndarray:
    ds = _load_data(cfg, cfg.get("eval", "split"))
    idx = np.atleast_1d(idx)
    if np.any(idx < 0) or np.any(idx >= len(ds)):
        raise IndexError(f"anchor index outside dataset of size {len(ds)}")
    return ds.images[idx]


def cmd_traverse(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ckpt = _checkpoint(cfg)
    anchor = _anchor_rows(cfg, cfg.get("traverse", "anchor"))
    img = traverse(
        ckpt.model,
        anchor,
        cfg.get("traverse", "indices"),
        cfg.get("traverse", "lo"),
        cfg.get("traverse", "hi"),
        cfg.get("traverse", "steps"),
        _image_shape(ckpt, ckpt.model.data_dim),
    )
    (out / "figures").mkdir(exist_ok=True)
    write_pgm(out / "figures" / "traverse.pgm", img)
    print(f"wrote {out / 'figures' / 'traverse.pgm'} ({img.shape[1]}x{img.shape[0]})")
    return 0


def cmd_cat_traverse(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ckpt = _checkpoint(cfg)
    anchors = _anchor_rows(cfg, np.asarray(cfg.get("traverse", "anchors")))
    img = cat_traverse(ckpt.model, anchors, _image_shape(ckpt, ckpt.model.data_dim))
    (out / "figures").mkdir(exist_ok=True)
    write_pgm(out / "figures" / "cat_traverse.pgm", img)
    print(f"wrote {out / 'figures' / 'cat_traverse.pgm'} ({img.shape[1]}x{img.shape[0]})")
    return 0


def make_clusters(k: int, n_per: int, dim: int, separation: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-variance Gaussian blobs with centres ``separation`` apart along distinct axes of a simplex-like layout."""
    rng = np.random.default_rng(seed)
    centres = np.zeros((k, dim))
    for i in range(k):
        centres[i, i % dim] = separation * (1 + i // dim)
        if i // dim % 2:
            centres[i, i % dim] *= -1
    data = np.concatenate([c + rng.normal(size=(n_per, dim)) for c in centres])
    return data, centres


def cmd_em_demo(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    seed = cfg.get("train", "seed")
    data, centres = make_clusters(cfg.get("em", "k"), cfg.get("em", "n_per_cluster"), cfg.get("em", "dim"), cfg.get("em", "separation"), seed)
    params, trace = em_fit(data, cfg.get("em", "k"), cfg.get("em", "iters"), seed)
    dim = data.shape[1]
    _write_csv(
        out / "reports" / "em_params.csv",
        ["component", "weight"] + [f"mean_{d}" for d in range(dim)] + [f"var_{d}" for d in range(dim)],
        [[i, _fmt(params.weights[i]), *map(_fmt, params.means[i]), *map(_fmt, params.variances[i])] for i in range(params.k)],
    )
    _write_csv(out / "reports" / "em_trace.csv", ["iteration", "mean_loglik"], [[i, _fmt(v)] for i, v in enumerate(trace)])
    print(f"EM: {len(trace) - 1} iterations, mean log-likelihood {trace[0]:.4f} -> {trace[-1]:.4f}")
    return 0


def cmd_toy_mi(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    seed = cfg.get("train", "seed")
    joint, toy = make_toy_joint(cfg.get("toy", "kind"), seed, cfg.get("toy", "k"), cfg.get("toy", "eps"))
    exact = brute_force_mi(joint)
    rep = toy_mi_lower_bound(toy, cfg.get("toy", "budget"), seed, cfg.get("toy", "init"), lr=cfg.get("toy", "lr"))
    _write_csv(
        out / "reports" / "toy_mi.csv",
        ["kind", "exact_mi", "lower_bound", "lower_se", "upper_bound"],
        [[cfg.get("toy", "kind"), _fmt(exact), _fmt(rep.lower_bound), _fmt(rep.lower_se), _fmt(rep.upper_bound)]],
    )
    print(f"exact={exact:.4f} lower={rep.lower_bound:.4f}+-{rep.lower_se:.4f} upper={rep.upper_bound:.4f}")
    return 0


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "traverse": cmd_traverse,
    "cat-traverse": cmd_cat_traverse,
    "em-demo": cmd_em_demo,
    "toy-mi": cmd_toy_mi,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"vmivae: {exc}", file=sys.stderr)
        return 1
    except USER_ERRORS as exc:
        print(f"vmivae: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"vmivae: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
