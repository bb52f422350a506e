"""Losses, Adam and the early-stopped training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .errors import ConfigurationError, UnsupportedOperation
from .models import KiaModel

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "L_recon", "L_fwd", "L_bwd", "L_total_train", "L_total_val")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, component: str, value: float):
        super().__init__(f"non-finite {component} ({value}) at epoch {epoch}")
        self.epoch = epoch
        self.component = component


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    fwd: float = 1.0
    bwd: float = 0.5
    con: float = 0.2

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"loss weight {name}={v} must be finite and >= 0")

    def for_variant(self, variant: str) -> "LossWeights":
        """KAE has no backward operator, so its backward weight is pinned to zero."""
        return replace(self, bwd=0.0) if variant == "KAE" else self


@dataclass(frozen=True)
class TrainConfig:
    k_steps: int = 16
    batch_size: int = 64
    learning_rate: float = 1e-3
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.k_steps < 1:
            raise ConfigurationError("k_steps must be >= 1")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")


# ---------------------------------------------------------------------------
# losses


def _as_batch(X) -> Tensor:
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.data.ndim != 2:
        raise DimensionError(f"expected an n x m batch, got shape {X.shape}")
    return X


def loss_recon(model: KiaModel, X) -> Tensor:
    """Mean squared reconstruction norm ``(1/n) sum |dec(enc(x)) - x|^2``."""
    X = _as_batch(X)
    if X.shape[0] == 0:
        raise ContractError("reconstruction loss of an empty batch")
    return ad.scale(ad.mse(model.decode(model.encode(X)), X), X.shape[1])


def _rollout_loss(model: KiaModel, X, targets, backward: bool) -> Tensor:
    X = _as_batch(X)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 3 or targets.shape[1:] != X.shape:
        raise ContractError(
            f"targets must be k x n x m matching the anchors {X.shape}, got {targets.shape}"
        )
    k, n, m = targets.shape
    if k < 1:
        raise ContractError("window has no targets")
    state = model.koopman.split(model.encode(X))
    latents = []
    for _ in range(k):
        state = model.koopman.step(state, backward=backward)
        latents.append(model.koopman.join(state))
    pred = model.decode(ad.vcat(latents))
    return ad.scale(ad.mse(pred, Tensor(targets.reshape(k * n, m))), m)


def loss_forward(model: KiaModel, X, future) -> Tensor:
    """``(1/(k n)) sum_l sum_t |dec(K^l enc(x_t)) - x_{t+l}|^2``.

    ``future[l-1]`` holds the targets ``l`` steps ahead of each anchor row.
    """
    return _rollout_loss(model, X, future, backward=False)


def loss_backward(model: KiaModel, X, past) -> Tensor:
    """Backward counterpart of :func:`loss_forward`; ``past[l-1]`` is ``l`` steps earlier."""
    if model.variant == "KAE":
        raise UnsupportedOperation("KAE has no backward operator")
    return _rollout_loss(model, X, past, backward=True)


def total_loss(components: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """Exact weighted sum of whichever components are present."""
    out = None
    for name in ("recon", "fwd", "bwd", "con"):
        term = components.get(name)
        if term is None:
            continue
        term = ad.scale(term, getattr(weights, name))
        out = term if out is None else ad.add(out, term)
    return out if out is not None else Tensor(0.0)


# ---------------------------------------------------------------------------
# windows


@dataclass
class Windows:
    anchors: np.ndarray
    x: np.ndarray  # n x m
    fwd: Optional[np.ndarray] = None  # k x n x m
    bwd: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.anchors)

    def subset(self, idx: np.ndarray) -> "Windows":
        return Windows(
            self.anchors[idx],
            self.x[idx],
            None if self.fwd is None else self.fwd[:, idx],
            None if self.bwd is None else self.bwd[:, idx],
        )


def window_anchors(length: int, k: int, direction: str) -> np.ndarray:
    if direction not in ("fwd", "bwd", "both"):
        raise ConfigurationError(f"unknown window direction {direction!r}")
    if length <= 2 * k:
        raise ConfigurationError(f"split of length {length} is too short for k={k} (need > {2 * k})")
    lo = k if direction in ("bwd", "both") else 0
    hi = length - k - 1 if direction in ("fwd", "both") else length - 1
    return np.arange(lo, hi + 1)


def build_windows(series, k: int, direction: str = "both") -> Windows:
    """Anchor/target windows that stay inside one contiguous split."""
    series = np.asarray(series, dtype=np.float64)
    anchors = window_anchors(len(series), k, direction)
    steps = np.arange(1, k + 1)
    fwd = series[anchors[None, :] + steps[:, None]] if direction in ("fwd", "both") else None
    bwd = series[anchors[None, :] - steps[:, None]] if direction in ("bwd", "both") else None
    return Windows(anchors, series[anchors], fwd, bwd)


def direction_for(variant: str) -> str:
    return "fwd" if variant == "KAE" else "both"


def objective(model: KiaModel, windows: Windows, weights: LossWeights):
    """Total loss tensor plus the individual component tensors."""
    parts: Dict[str, Tensor] = {"recon": loss_recon(model, windows.x)}
    if windows.fwd is not None:
        parts["fwd"] = loss_forward(model, windows.x, windows.fwd)
    if windows.bwd is not None and model.variant != "KAE":
        parts["bwd"] = loss_backward(model, windows.x, windows.bwd)
    if model.variant == "CKAE":
        parts["con"] = model.koopman.consistency()
    return total_loss(parts, weights.for_variant(model.variant)), parts


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` is either the mapping returned by ``backward`` (missing entries
    count as zero) or a sequence aligned with ``params``.
    """
    if isinstance(grads, Mapping):
        grads = [grads.get(p) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ContractError("params, grads and optimizer state are not aligned")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: KiaModel
    history: List[dict]
    best_epoch: int
    stopped_early: bool


def _component_values(parts: Mapping[str, Tensor]) -> Dict[str, float]:
    return {name: parts[name].item() if name in parts else 0.0 for name in ("recon", "fwd", "bwd", "con")}


def _check_finite(epoch: int, total: float, parts: Mapping[str, float]) -> None:
    for name, value in parts.items():
        if not math.isfinite(value):
            raise TrainingDiverged(epoch, f"L_{name}", value)
    if not math.isfinite(total):
        raise TrainingDiverged(epoch, "L_total", total)


def split_arrays(dataset):
    """(train, validation, test) observation blocks of a dataset."""
    obs = np.asarray(dataset.observations)
    a, b, _ = dataset.split
    return obs[:a], obs[a:a + b], obs[a + b:]


def train(
    model: KiaModel,
    dataset,
    config: TrainConfig = TrainConfig(),
    weights: LossWeights = LossWeights(),
    progress=None,
) -> TrainResult:
    """Train in place with early stopping on the total validation loss.

    ``dataset`` needs ``observations`` and ``split``. On return the model
    holds the parameters of the best validation epoch.
    """
    train_obs, val_obs, _ = split_arrays(dataset)
    if len(val_obs) == 0:
        raise ConfigurationError("dataset has no validation split")
    direction = direction_for(model.variant)
    weights = weights.for_variant(model.variant)
    train_w = build_windows(train_obs, config.k_steps, direction)
    val_w = build_windows(val_obs, config.k_steps, direction)

    params = model.parameters()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(config.seed)

    history: List[dict] = []
    best_val = math.inf
    best_state = model.get_state()
    best_epoch = 0
    stale = 0
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_w))
        sums = {"recon": 0.0, "fwd": 0.0, "bwd": 0.0, "con": 0.0}
        total_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = train_w.subset(order[start:start + config.batch_size])
            loss, parts = objective(model, batch, weights)
            values = _component_values(parts)
            _check_finite(epoch, loss.item(), values)
            grads = ad.backward(loss)
            adam_step(params, grads, state, config.learning_rate)
            n = len(batch)
            total_sum += loss.item() * n
            for name in sums:
                sums[name] += values[name] * n
        count = len(train_w)
        val_loss, val_parts = objective(model, val_w, weights)
        val = val_loss.item()
        _check_finite(epoch, val, _component_values(val_parts))
        history.append({
            "epoch": epoch,
            "L_recon": sums["recon"] / count,
            "L_fwd": sums["fwd"] / count,
            "L_bwd": sums["bwd"] / count,
            "L_total_train": total_sum / count,
            "L_total_val": val,
        })
        if progress is not None:
            progress(history[-1])
        if val < best_val - 1e-12:
            best_val, best_epoch, stale = val, epoch, 0
            best_state = model.get_state()
        else:
            stale += 1
            if stale >= config.patience:
                stopped = True
                break
    model.set_state(best_state)
    log.info("trained %s for %d epochs, best epoch %d (val %.6g)", model.variant, len(history), best_epoch, best_val)
    return TrainResult(model, history, best_epoch, stopped)


def write_history(history: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
