"""Encoder/decoder stacks, the additive-coupling Koopman operator and baselines.

All maps act on row vectors: a batch of latents is an ``n x d`` array and a
linear map with matrix ``W`` sends ``z`` to ``z @ W``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .errors import ConfigurationError, UnsupportedOperation

VARIANTS = ("KIA", "KAE", "CKAE")
CHECKPOINT_FORMAT = "kia-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass
class Dense:
    weight: Tensor  # in x out
    bias: Tensor  # out
    activation: bool

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.add_row(ad.matmul(x, self.weight), self.bias)
        return ad.tanh(y) if self.activation else y


class DenseStack:
    """Feed-forward stack; tanh after every layer except the last."""

    def __init__(self, layers: Sequence[Dense]):
        for a, b in zip(layers, layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ConfigurationError(
                    f"layer widths do not chain: {a.weight.shape} -> {b.weight.shape}"
                )
        self.layers = list(layers)

    @classmethod
    def build(cls, sizes: Sequence[int], rng: np.random.Generator, prefix: str = "") -> "DenseStack":
        layers = []
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = Tensor(glorot(rng, fi, fo), requires_grad=True, name=f"{prefix}{i}.weight")
            b = Tensor(np.zeros(fo), requires_grad=True, name=f"{prefix}{i}.bias")
            layers.append(Dense(w, b, activation=i < len(sizes) - 2))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def sizes(self) -> List[int]:
        return [self.in_dim] + [l.weight.shape[1] for l in self.layers]

    def parameters(self) -> List[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"expected input width {self.in_dim}, got shape {x.shape}")
        for layer in self.layers:
            x = layer(x)
        return x


class CouplingBlock:
    """Additive coupling: ``v1 = u1 + t2(u2)``, ``v2 = u2 + t1(v1)``.

    ``t1`` and ``t2`` are square linear maps on half-latents. With
    ``bias=True`` they become affine, which breaks exact linearity of the
    composed operator but keeps it invertible.
    """

    def __init__(self, t1: Tensor, t2: Tensor, b1: Optional[Tensor] = None, b2: Optional[Tensor] = None):
        h = t1.shape[0]
        if t1.shape != (h, h) or t2.shape != (h, h):
            raise ConfigurationError(f"coupling maps must be square halves, got {t1.shape}, {t2.shape}")
        self.t1, self.t2, self.b1, self.b2 = t1, t2, b1, b2

    @classmethod
    def build(cls, half: int, rng: np.random.Generator, bias: bool = False, prefix: str = "") -> "CouplingBlock":
        t1 = Tensor(glorot(rng, half, half), requires_grad=True, name=prefix + "t1")
        t2 = Tensor(glorot(rng, half, half), requires_grad=True, name=prefix + "t2")
        b1 = b2 = None
        if bias:
            b1 = Tensor(np.zeros(half), requires_grad=True, name=prefix + "b1")
            b2 = Tensor(np.zeros(half), requires_grad=True, name=prefix + "b2")
        return cls(t1, t2, b1, b2)

    @property
    def half(self) -> int:
        return self.t1.shape[0]

    def parameters(self) -> List[Tensor]:
        ps = [self.t1, self.t2]
        if self.b1 is not None:
            ps += [self.b1, self.b2]
        return ps

    def _shift(self, x: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
        y = ad.matmul(x, w)
        return y if b is None else ad.add_row(y, b)

    def forward_halves(self, u1: Tensor, u2: Tensor) -> Tuple[Tensor, Tensor]:
        v1 = ad.add(u1, self._shift(u2, self.t2, self.b2))
        v2 = ad.add(u2, self._shift(v1, self.t1, self.b1))
        return v1, v2

    def inverse_halves(self, v1: Tensor, v2: Tensor) -> Tuple[Tensor, Tensor]:
        u2 = ad.sub(v2, self._shift(v1, self.t1, self.b1))
        u1 = ad.sub(v1, self._shift(u2, self.t2, self.b2))
        return u1, u2


def _split(z: Tensor, half: int) -> Tuple[Tensor, Tensor]:
    if z.shape[-1] != 2 * half:
        raise DimensionError(f"latent width {z.shape[-1]} does not match coupling halves {half}")
    return ad.cols(z, 0, half), ad.cols(z, half, 2 * half)


def coupling_forward(block: CouplingBlock, z: Tensor) -> Tensor:
    return ad.hcat(block.forward_halves(*_split(z, block.half)))


def coupling_inverse(block: CouplingBlock, v: Tensor) -> Tensor:
    return ad.hcat(block.inverse_halves(*_split(v, block.half)))


class InnKoopman:
    """Sequence of coupling blocks. One Koopman step runs every block in order."""

    kind = "inn"

    def __init__(self, blocks: Sequence[CouplingBlock]):
        if not blocks:
            raise ConfigurationError("InnKoopman needs at least one coupling block")
        self.blocks = list(blocks)
        self.dim = 2 * self.blocks[0].half

    @classmethod
    def build(
        cls, dim: int, depth: int, rng: np.random.Generator, bias: bool = False, init: str = "rotation"
    ) -> "InnKoopman":
        """Fresh operator.

        ``init="rotation"`` makes the first block a set of independent plane
        rotations (``t2 = diag(a)``, ``t1 = -diag(a)``, angles drawn from
        (0.01, 0.8) rad) and zeroes the rest, so the operator starts with
        every eigenvalue on the unit circle. ``init="glorot"`` draws all
        coupling maps uniformly like the dense layers.
        """
        if dim % 2:
            raise ConfigurationError(f"latent dimension must be even for coupling, got {dim}")
        if depth < 1:
            raise ConfigurationError("coupling depth must be >= 1")
        if init not in ("rotation", "glorot"):
            raise ConfigurationError(f"unknown coupling init {init!r}")
        half = dim // 2
        blocks = [CouplingBlock.build(half, rng, bias, prefix=f"koopman.{i}.") for i in range(depth)]
        if init == "rotation":
            a = 2.0 * np.sin(rng.uniform(0.01, 0.8, size=half) / 2.0)
            for i, block in enumerate(blocks):
                block.t2.data = np.diag(a) if i == 0 else np.zeros((half, half))
                block.t1.data = -np.diag(a) if i == 0 else np.zeros((half, half))
        return cls(blocks)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def bias(self) -> bool:
        return self.blocks[0].b1 is not None

    def parameters(self) -> List[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def forward_halves(self, z1, z2):
        for b in self.blocks:
            z1, z2 = b.forward_halves(z1, z2)
        return z1, z2

    def inverse_halves(self, z1, z2):
        for b in reversed(self.blocks):
            z1, z2 = b.inverse_halves(z1, z2)
        return z1, z2

    def split(self, z: Tensor):
        return _split(z, self.dim // 2)

    def join(self, state) -> Tensor:
        return ad.hcat(state)

    def step(self, state, backward: bool = False):
        return self.inverse_halves(*state) if backward else self.forward_halves(*state)

    def matrix(self) -> np.ndarray:
        """Row-convention matrix of one forward step (bias-free mode only)."""
        eye = Tensor(np.eye(self.dim))
        return self.join(self.step(self.split(eye))).data


class LinearKoopman:
    """Plain linear latent operator; ``backward_matrix`` is set for the C-KAE baseline."""

    kind = "linear"

    def __init__(self, matrix: Tensor, backward_matrix: Optional[Tensor] = None):
        d = matrix.shape[0]
        if matrix.shape != (d, d):
            raise ConfigurationError(f"Koopman matrix must be square, got {matrix.shape}")
        if backward_matrix is not None and backward_matrix.shape != matrix.shape:
            raise ConfigurationError(
                f"backward matrix {backward_matrix.shape} must match forward {matrix.shape}"
            )
        self.K = matrix
        self.K_b = backward_matrix
        self.dim = d

    @classmethod
    def build(
        cls, dim: int, rng: np.random.Generator, paired: bool = False, init: str = "rotation"
    ) -> "LinearKoopman":
        """Fresh operator.

        ``init="rotation"`` starts ``K`` as a random orthogonal matrix (and
        ``K_b`` as its transpose), so every eigenvalue is on the unit circle.
        ``init="glorot"`` draws ``K`` and ``K_b`` independently like the dense layers.
        """
        if init == "rotation":
            k = random_orthogonal(rng, dim)
            kb = k.T.copy()
        elif init == "glorot":
            k = glorot(rng, dim, dim)
            kb = glorot(rng, dim, dim) if paired else None
        else:
            raise ConfigurationError(f"unknown Koopman init {init!r}")
        K = Tensor(k, requires_grad=True, name="koopman.K")
        K_b = Tensor(kb, requires_grad=True, name="koopman.K_b") if paired else None
        return cls(K, K_b)

    def parameters(self) -> List[Tensor]:
        return [self.K] if self.K_b is None else [self.K, self.K_b]

    def split(self, z: Tensor):
        return z

    def join(self, state) -> Tensor:
        return state

    def step(self, state, backward: bool = False):
        if backward:
            if self.K_b is None:
                raise UnsupportedOperation("forward-only linear Koopman has no backward step")
            return ad.matmul(state, self.K_b)
        return ad.matmul(state, self.K)

    def consistency(self) -> Tensor:
        """``|K K_b - I|_F^2 + |K_b K - I|_F^2``."""
        if self.K_b is None:
            raise UnsupportedOperation("consistency penalty needs a backward matrix")
        eye = Tensor(np.eye(self.dim))
        a = ad.sub(ad.matmul(self.K, self.K_b), eye)
        b = ad.sub(ad.matmul(self.K_b, self.K), eye)
        return ad.add(ad.sum_squares(a), ad.sum_squares(b))


Koopman = Union[InnKoopman, LinearKoopman]


@dataclass
class ModelSpec:
    """Architecture record stored in checkpoint headers."""

    variant: str = "KIA"
    input_dim: int = 64
    latent_dim: int = 8
    encoder_hidden: Tuple[int, ...] = (128, 64)
    decoder_hidden: Tuple[int, ...] = (64, 128)
    depth: int = 1
    coupling_bias: bool = False
    koopman_init: Optional[str] = None  # None: "rotation" for KIA, "glorot" for KAE/CKAE
    seed: int = 0
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.koopman_init is None:
            self.koopman_init = "rotation" if self.variant == "KIA" else "glorot"

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["encoder_hidden"] = tuple(d["encoder_hidden"])
        d["decoder_hidden"] = tuple(d["decoder_hidden"])
        return cls(**d)


class KiaModel:
    """Encoder, latent Koopman operator and decoder.

    ``shift``/``scale`` are fixed (untrained) input standardization:
    the encoder sees ``(x - shift) / scale`` and the decoder output is mapped
    back, so losses and forecasts are always in observation units.
    """

    def __init__(self, spec: ModelSpec, encoder: DenseStack, koopman: Koopman, decoder: DenseStack):
        if spec.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {spec.variant!r}; expected one of {VARIANTS}")
        if not (encoder.out_dim == koopman.dim == decoder.in_dim):
            raise ConfigurationError(
                f"encoder out {encoder.out_dim}, koopman {koopman.dim} and decoder in "
                f"{decoder.in_dim} must agree"
            )
        if encoder.in_dim != decoder.out_dim:
            raise ConfigurationError("encoder input and decoder output widths differ")
        self.spec = spec
        self.encoder = encoder
        self.koopman = koopman
        self.decoder = decoder

    @classmethod
    def build(cls, spec: ModelSpec, rng: Optional[np.random.Generator] = None) -> "KiaModel":
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        m, d = spec.input_dim, spec.latent_dim
        encoder = DenseStack.build([m, *spec.encoder_hidden, d], rng, "encoder.")
        if spec.variant == "KIA":
            koopman = InnKoopman.build(d, spec.depth, rng, bias=spec.coupling_bias,
                                       init=spec.koopman_init)
        else:
            koopman = LinearKoopman.build(d, rng, paired=spec.variant == "CKAE", init=spec.koopman_init)
        decoder = DenseStack.build([d, *spec.decoder_hidden, m], rng, "decoder.")
        return cls(spec, encoder, koopman, decoder)

    @property
    def variant(self) -> str:
        return self.spec.variant

    @property
    def input_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def latent_dim(self) -> int:
        return self.koopman.dim

    def parameters(self) -> List[Tensor]:
        return self.encoder.parameters() + self.koopman.parameters() + self.decoder.parameters()

    def get_state(self) -> List[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def set_state(self, state: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(state) != len(params):
            raise ContractError(f"state has {len(state)} arrays, model has {len(params)} parameters")
        for p, s in zip(params, state):
            if p.shape != s.shape:
                raise DimensionError(f"parameter {p.name}: {p.shape} vs state {s.shape}")
            p.data = np.array(s, dtype=np.float64, copy=True)

    def encode(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"observation width {x.shape[-1]} != model input {self.input_dim}")
        if self.spec.shift != 0.0 or self.spec.scale != 1.0:
            x = ad.scale(ad.sub(x, Tensor(np.full(x.shape, self.spec.shift))), 1.0 / self.spec.scale)
        return self.encoder(x)

    def decode(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape[-1] != self.latent_dim:
            raise DimensionError(f"latent width {z.shape[-1]} != model latent {self.latent_dim}")
        y = self.decoder(z)
        if self.spec.shift != 0.0 or self.spec.scale != 1.0:
            y = ad.add(ad.scale(y, self.spec.scale), Tensor(np.full(y.shape, self.spec.shift)))
        return y

    def koopman_power(self, z, l: int) -> Tensor:
        """Apply the latent operator ``l`` times; negative ``l`` runs it backward."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        l = int(l)
        if l < 0 and self.variant == "KAE":
            raise UnsupportedOperation("KAE is forward-only; negative Koopman powers are undefined")
        if l == 0:
            return z
        state = self.koopman.split(z)
        for _ in range(abs(l)):
            state = self.koopman.step(state, backward=l < 0)
        return self.koopman.join(state)


def encode(model: KiaModel, x) -> Tensor:
    return model.encode(x)


def decode(model: KiaModel, z) -> Tensor:
    return model.decode(z)


def koopman_power(model: KiaModel, z, l: int) -> Tensor:
    return model.koopman_power(z, l)


def _param_layout(model: KiaModel) -> List[dict]:
    return [{"name": p.name, "shape": list(p.shape)} for p in model.parameters()]


def save_checkpoint(model: KiaModel, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.spec.to_json(),
        "params": _param_layout(model),
    }
    if extra:
        header["extra"] = extra
    blob = b"".join(p.data.astype("<f8").tobytes(order="C") for p in model.parameters())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(blob)


def load_checkpoint(path: Union[str, Path]) -> KiaModel:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} unsupported")
    spec = ModelSpec.from_json(header["architecture"])
    model = KiaModel.build(spec, np.random.default_rng(0))
    layout = _param_layout(model)
    if [l["shape"] for l in layout] != [l["shape"] for l in header["params"]]:
        raise CheckpointError(f"{path}: parameter layout does not match architecture")
    payload = raw[nl + 1:]
    expected = 8 * sum(int(np.prod(l["shape"])) for l in layout)
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f8")
    offset = 0
    for p in model.parameters():
        n = p.data.size
        p.data = values[offset:offset + n].astype(np.float64).reshape(p.shape)
        offset += n
    return model


def checkpoint_extra(path: Union[str, Path]) -> dict:
    raw = Path(path).read_bytes()
    return json.loads(raw[: raw.find(b"\n")].decode("utf-8")).get("extra", {})
