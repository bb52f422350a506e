"""Experiment configuration: JSON file, command-line overrides, metadata echo.

Schema (every key optional, defaults shown by ``ExperimentConfig().to_json()``)::

    {
      "kind": "pendulum" | "climate",
      "variant": "KIA" | "KAE" | "CKAE" | "persistence" | "climatology",
      "seed": 0,
      "noise_std": 0.0,
      "pendulum": {"theta0", "omega0", "g", "length", "t_span", "n_points",
                   "substeps", "embed_dim", "lengths"},
      "climate": {"H", "W", "years", "weather_std", "weather_corr",
                  "drift_per_year", "split_years"},
      "model": {"latent_dim", "encoder_hidden", "decoder_hidden", "depth",
                "coupling_bias", "koopman_init"},
      "train": {"k_steps", "batch_size", "learning_rate", "max_epochs", "patience"},
      "weights": {"recon", "fwd", "bwd", "con"},
      "evaluate": {"horizon", "inits", "k_day", "clean_targets"}
    }

Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .data import PendulumParams
from .errors import ConfigurationError
from .models import ModelSpec
from .training import LossWeights, TrainConfig

FORMAT_VERSION = 1
KINDS = ("pendulum", "climate")
MODEL_VARIANTS = ("KIA", "KAE", "CKAE")
BASELINES = ("persistence", "climatology")

DEFAULTS: Dict[str, Any] = {
    "kind": "pendulum",
    "variant": "KIA",
    "seed": 0,
    "noise_std": 0.0,
    "pendulum": {
        "theta0": 0.8, "omega0": 0.0, "g": 9.8, "length": 1.0, "t_span": [0.0, 400.0],
        "n_points": 4000, "substeps": 100, "embed_dim": 64, "lengths": [400, 1500, 2100],
    },
    "climate": {
        "H": 8, "W": 8, "years": 5, "weather_std": 0.4, "weather_corr": 0.9,
        "drift_per_year": 0.05, "split_years": None,
    },
    "model": {
        "latent_dim": 8, "encoder_hidden": [128, 64], "decoder_hidden": [64, 128], "depth": None,
        "coupling_bias": False, "koopman_init": None,
    },
    "train": {"k_steps": None, "batch_size": 64, "learning_rate": 1e-3, "max_epochs": 500, "patience": 20},
    "weights": {"recon": 1.0, "fwd": 1.0, "bwd": 0.5, "con": 0.2},
    "evaluate": {"horizon": None, "inits": 30, "k_day": [1, 7, 14, 21, 30], "clean_targets": False},
}

# per-task defaults for keys left as None above
K_STEPS = {"pendulum": 16, "climate": 4}
DEPTH = {"pendulum": 1, "climate": 2}
HORIZON = {"pendulum": 2000, "climate": 180}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigurationError(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass
class ExperimentConfig:
    """Nested experiment settings; ``raw`` mirrors the JSON layout exactly."""

    raw: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    explicit: set = field(default_factory=set)  # dotted keys set by file or flag

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(_merge(DEFAULTS, d), set(_dotted(d)))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path}: {exc}") from None
        return cls.from_dict(d)

    def override(self, dotted: str, value) -> "ExperimentConfig":
        """Set ``section.key`` (or a top-level key) and mark it explicit."""
        parts = dotted.split(".")
        patch: dict = {}
        cur = patch
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
        return ExperimentConfig(_merge(self.raw, patch), self.explicit | {dotted})

    def validate(self) -> None:
        r = self.raw
        if r["kind"] not in KINDS:
            raise ConfigurationError(f"kind must be one of {KINDS}, got {r['kind']!r}")
        if r["variant"] not in MODEL_VARIANTS + BASELINES:
            raise ConfigurationError(f"unknown variant {r['variant']!r}")
        if r["variant"] == "climatology" and r["kind"] != "climate":
            raise ConfigurationError("the climatology baseline needs a climate dataset")
        if r["variant"] == "KAE" and "weights.bwd" in self.explicit and r["weights"]["bwd"] > 0:
            raise ConfigurationError(
                f"KAE has no backward operator; lambda_bwd={r['weights']['bwd']} is not allowed (use 0)"
            )
        if r["noise_std"] < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {r['noise_std']}")
        self.loss_weights()
        self.train_config()
        if self.kind == "pendulum":
            self.pendulum_params()

    # -- typed views --------------------------------------------------------

    @property
    def kind(self) -> str:
        return self.raw["kind"]

    @property
    def variant(self) -> str:
        return self.raw["variant"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def pendulum_params(self) -> PendulumParams:
        p = self.raw["pendulum"]
        return PendulumParams(
            theta0=float(p["theta0"]), omega0=float(p["omega0"]), g=float(p["g"]),
            length=float(p["length"]), t_span=tuple(float(t) for t in p["t_span"]),
            n_points=int(p["n_points"]), substeps=int(p["substeps"]),
        )

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        t = self.raw["train"]
        k = t["k_steps"] if t["k_steps"] is not None else K_STEPS[self.kind]
        return TrainConfig(
            k_steps=int(k), batch_size=int(t["batch_size"]), learning_rate=float(t["learning_rate"]),
            max_epochs=int(t["max_epochs"]), patience=int(t["patience"]),
            seed=self.seed if seed is None else seed,
        )

    def loss_weights(self) -> LossWeights:
        w = self.raw["weights"]
        return LossWeights(float(w["recon"]), float(w["fwd"]), float(w["bwd"]), float(w["con"]))

    def model_spec(self, input_dim: int, seed: int, shift: float = 0.0, scale: float = 1.0) -> ModelSpec:
        m = self.raw["model"]
        return ModelSpec(
            variant=self.variant, input_dim=int(input_dim), latent_dim=int(m["latent_dim"]),
            encoder_hidden=tuple(int(h) for h in m["encoder_hidden"]),
            decoder_hidden=tuple(int(h) for h in m["decoder_hidden"]),
            depth=self.depth, coupling_bias=bool(m["coupling_bias"]),
            koopman_init=m["koopman_init"], seed=int(seed), shift=float(shift), scale=float(scale),
        )

    @property
    def depth(self) -> int:
        d = self.raw["model"]["depth"]
        return int(d) if d is not None else DEPTH[self.kind]

    @property
    def horizon(self) -> int:
        h = self.raw["evaluate"]["horizon"]
        return int(h) if h is not None else HORIZON[self.kind]

    def effective(self) -> dict:
        """The config with task-dependent defaults resolved."""
        r = copy.deepcopy(self.raw)
        r["train"]["k_steps"] = self.train_config().k_steps
        r["evaluate"]["horizon"] = self.horizon
        r["model"]["depth"] = self.depth
        if r["model"]["koopman_init"] is None and r["variant"] in MODEL_VARIANTS:
            r["model"]["koopman_init"] = "rotation" if r["variant"] == "KIA" else "glorot"
        return r

    def to_json(self) -> str:
        return json.dumps(self.effective(), indent=2, sort_keys=True)


def _dotted(d: dict, prefix: str = ""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _dotted(v, prefix + k + ".")
        else:
            yield prefix + k


def metadata(command: str, config: ExperimentConfig, **extra) -> dict:
    """Record written into every output directory; enough to re-run the command."""
    from . import data, models

    return {
        "command": command,
        "config": config.effective(),
        "seed": config.seed,
        "format_versions": {
            "config": FORMAT_VERSION,
            "dataset": data.SCHEMA_VERSION,
            "checkpoint": models.CHECKPOINT_VERSION,
        },
        **extra,
    }


def write_metadata(out_dir, record: dict) -> Path:
    path = Path(out_dir) / "metadata.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path
