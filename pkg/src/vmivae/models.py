"""Encoder, decoder and auxiliary networks plus the binary checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .distributions import CategoricalParams, DiagGaussianParams
from .tensor import MLP, ContractError, DimensionError, Tensor, as_tensor, concat


@dataclass(frozen=True)
class GaussianSubvector:
    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if not self.indices:
            raise ValueError("empty Gaussian target")


@dataclass(frozen=True)
class Categorical:
    pass


MiTarget = Union[GaussianSubvector, Categorical]


@dataclass(frozen=True)
class LatentLayout:
    gaussian_dim: int
    categorical_k: int = 0
    mi_target: MiTarget | None = None

    def __post_init__(self):
        if self.gaussian_dim < 0 or self.categorical_k < 0:
            raise ValueError("latent sizes must be non-negative")
        if self.categorical_k == 1:
            raise ValueError("a categorical latent needs K >= 2")
        if self.gaussian_dim == 0 and self.categorical_k == 0:
            raise ValueError("layout has no latent part")
        t = self.mi_target
        if isinstance(t, GaussianSubvector):
            if any(i < 0 or i >= self.gaussian_dim for i in t.indices):
                raise ValueError(f"target indices {t.indices} outside [0, {self.gaussian_dim})")
            if len(set(t.indices)) != len(t.indices):
                raise ValueError("duplicate target indices")
        elif isinstance(t, Categorical) and self.categorical_k < 2:
            raise ValueError("categorical MI target requires a categorical latent")

    @property
    def encoder_out(self) -> int:
        return 2 * self.gaussian_dim + self.categorical_k

    @property
    def decoder_in(self) -> int:
        return self.gaussian_dim + self.categorical_k

    def to_dict(self) -> dict:
        t = self.mi_target
        if isinstance(t, GaussianSubvector):
            target = list(t.indices)
        elif isinstance(t, Categorical):
            target = "categorical"
        else:
            target = None
        return {"gaussian_dim": self.gaussian_dim, "categorical_k": self.categorical_k, "mi_target": target}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentLayout":
        return cls(d["gaussian_dim"], d["categorical_k"], parse_target(d.get("mi_target")))


def parse_target(value) -> MiTarget | None:
    """None / "categorical" / iterable of ints / "1,2" → target object."""
    if value is None or value == "" or value == "none":
        return None
    if isinstance(value, (GaussianSubvector, Categorical)):
        return value
    if value == "categorical":
        return Categorical()
    if isinstance(value, str):
        value = [int(v) for v in value.split(",") if v.strip()]
    return GaussianSubvector(tuple(value))


class VaeModel:
    """Gaussian (plus optional categorical) VAE with a Bernoulli decoder."""

    def __init__(
        self,
        data_dim: int,
        layout: LatentLayout,
        rng: np.random.Generator,
        encoder_hidden: Sequence[int] = (512, 256),
        decoder_hidden: Sequence[int] = (256, 512),
        activation: str = "tanh",
    ):
        self.data_dim = data_dim
        self.layout = layout
        self.activation = activation
        self.encoder = MLP([data_dim, *encoder_hidden, layout.encoder_out], rng, hidden=activation)
        self.decoder = MLP([layout.decoder_in, *decoder_hidden, data_dim], rng, hidden=activation)

    @property
    def encoder_hidden(self) -> list[int]:
        return self.encoder.sizes[1:-1]

    @property
    def decoder_hidden(self) -> list[int]:
        return self.decoder.sizes[1:-1]

    def encoder_parameters(self) -> list[Tensor]:
        return self.encoder.parameters()

    def decoder_parameters(self) -> list[Tensor]:
        return self.decoder.parameters()

    def parameters(self) -> list[Tensor]:
        return self.encoder_parameters() + self.decoder_parameters()


class AuxModel:
    """Network for the auxiliary distribution Q(target | decoder output)."""

    def __init__(
        self,
        data_dim: int,
        layout: LatentLayout,
        rng: np.random.Generator,
        hidden: Sequence[int] = (256,),
        activation: str = "tanh",
        target: MiTarget | None = None,
    ):
        self.target = layout.mi_target if target is None else target
        if self.target is None:
            raise ValueError("layout has no MI target")
        if isinstance(self.target, Categorical):
            out = layout.categorical_k
        else:
            out = 2 * len(self.target.indices)
        self.k = layout.categorical_k
        self.data_dim = data_dim
        self.activation = activation
        self.network = MLP([data_dim, *hidden, out], rng, hidden=activation)

    @property
    def hidden(self) -> list[int]:
        return self.network.sizes[1:-1]

    def parameters(self) -> list[Tensor]:
        return self.network.parameters()


def _check_batch(x: Tensor, dim: int) -> None:
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"expected a [batch, {dim}] input, got {x.shape}")


def encode(m: VaeModel, x, tau: float = 1.0) -> tuple[DiagGaussianParams | None, CategoricalParams | None]:
    """Posterior parameters of q(z | x) and q(c | x); the two parts are independent given x."""
    x = as_tensor(x)
    _check_batch(x, m.data_dim)
    h = m.encoder(x)
    g, k = m.layout.gaussian_dim, m.layout.categorical_k
    gauss = DiagGaussianParams(h[:, :g], h[:, g : 2 * g]) if g else None
    cat = CategoricalParams(h[:, 2 * g :], tau) if k else None
    return gauss, cat


def decode_logits(m: VaeModel, z=None, c=None) -> Tensor:
    g, k = m.layout.gaussian_dim, m.layout.categorical_k
    parts = []
    if g:
        if z is None:
            raise ContractError("layout has a Gaussian latent but no z was given")
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != g:
            raise DimensionError(f"z must be [batch, {g}], got {z.shape}")
        parts.append(z)
    if k:
        if c is None:
            raise ContractError("layout has a categorical latent but no c was given")
        c = as_tensor(c)
        if c.ndim != 2 or c.shape[1] != k:
            raise DimensionError(f"c must be [batch, {k}], got {c.shape}")
        parts.append(c)
    h = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    return m.decoder(h)


def decode(m: VaeModel, z=None, c=None) -> Tensor:
    """Bernoulli means in (0, 1) for every pixel."""
    return decode_logits(m, z, c).sigmoid()


def q_infer(q: AuxModel, x_like) -> DiagGaussianParams | CategoricalParams:
    x_like = as_tensor(x_like)
    _check_batch(x_like, q.data_dim)
    h = q.network(x_like)
    if isinstance(q.target, Categorical):
        return CategoricalParams(h)
    n = len(q.target.indices)
    return DiagGaussianParams(h[:, :n], h[:, n:])


def check_target(m: VaeModel, q: AuxModel) -> None:
    if q.target != m.layout.mi_target:
        raise ContractError(f"aux target {q.target} does not match model target {m.layout.mi_target}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"VMIVAECK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model: VaeModel
    aux: AuxModel | None = None
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _mlp_tensors(prefix: str, mlp: MLP) -> list[tuple[str, Tensor]]:
    out = []
    for i, layer in enumerate(mlp.layers):
        out.append((f"{prefix}.{i}.weight", layer.weights))
        out.append((f"{prefix}.{i}.bias", layer.bias))
    return out


def _named_tensors(model: VaeModel, aux: AuxModel | None) -> list[tuple[str, Tensor]]:
    named = _mlp_tensors("encoder", model.encoder) + _mlp_tensors("decoder", model.decoder)
    if aux is not None:
        named += _mlp_tensors("aux", aux.network)
    return named


def save_checkpoint(path, model: VaeModel, aux: AuxModel | None = None, rng_state: dict | None = None, meta: dict | None = None) -> None:
    """Write a deterministic binary dump: magic, version, JSON header, raw little-endian float64 blocks."""
    named = _named_tensors(model, aux)
    header = {
        "version": CKPT_VERSION,
        "data_dim": model.data_dim,
        "layout": model.layout.to_dict(),
        "activation": model.activation,
        "encoder_hidden": model.encoder_hidden,
        "decoder_hidden": model.decoder_hidden,
        "aux": None if aux is None else {"hidden": aux.hidden, "activation": aux.activation},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named],
        "rng_state": rng_state,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    layout = LatentLayout.from_dict(header["layout"])
    rng = np.random.default_rng(0)
    model = VaeModel(header["data_dim"], layout, rng, header["encoder_hidden"], header["decoder_hidden"], header["activation"])
    aux = None
    if header["aux"] is not None:
        aux = AuxModel(header["data_dim"], layout, rng, header["aux"]["hidden"], header["aux"]["activation"])
    named = dict(_named_tensors(model, aux))
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        target = named[entry["name"]]
        if target.shape != shape:
            raise ValueError(f"{path}: tensor {entry['name']} has shape {shape}, expected {target.shape}")
        target.data = arr.astype(np.float64)
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(model, aux, header["rng_state"], header["meta"])
