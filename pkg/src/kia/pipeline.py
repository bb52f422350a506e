"""Config-driven building blocks shared by the CLI and the experiment scripts."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .data import (
    GridSeries,
    TrajectoryDataset,
    derive_seed,
    generate_synthetic_sst,
    make_pendulum_dataset,
    split_dataset,
)
from .errors import ConfigurationError
from .evaluation import Climatology, KDayResult, Persistence, evaluate_horizon, evaluate_k_day
from .models import KiaModel
from .training import TrainResult, train


def make_dataset(cfg: ExperimentConfig):
    """Dataset described by ``cfg`` (pendulum trajectory or synthetic grid)."""
    if cfg.kind == "pendulum":
        p = cfg.raw["pendulum"]
        return make_pendulum_dataset(
            noise_std=float(cfg.raw["noise_std"]), seed=cfg.seed, m=int(p["embed_dim"]),
            lengths=tuple(int(x) for x in p["lengths"]), params=cfg.pendulum_params(),
        )
    c = cfg.raw["climate"]
    split_years = None if c["split_years"] is None else tuple(int(y) for y in c["split_years"])
    return generate_synthetic_sst(
        H=int(c["H"]), W=int(c["W"]), years=int(c["years"]), seed=derive_seed(cfg.seed, "data"),
        weather_std=float(c["weather_std"]), weather_corr=float(c["weather_corr"]),
        drift_per_year=float(c["drift_per_year"]), split_years=split_years,
    )


def dataset_kind(dataset) -> str:
    return "climate" if isinstance(dataset, GridSeries) else "pendulum"


def standardization(dataset) -> Tuple[float, float]:
    """Scalar shift/scale from the training split; identity for the pendulum."""
    if not isinstance(dataset, GridSeries):
        return 0.0, 1.0
    train_obs = dataset.observations[: dataset.split[0]]
    return float(train_obs.mean()), float(train_obs.std())


def build_model(cfg: ExperimentConfig, dataset) -> KiaModel:
    if cfg.variant not in ("KIA", "KAE", "CKAE"):
        raise ConfigurationError(f"{cfg.variant} is a baseline and has nothing to train")
    shift, scale = standardization(dataset)
    spec = cfg.model_spec(dataset.dim, derive_seed(cfg.seed, "init"), shift, scale)
    return KiaModel.build(spec)


def fit(cfg: ExperimentConfig, dataset, progress=None) -> TrainResult:
    """Build and train the configured model on ``dataset``."""
    model = build_model(cfg, dataset)
    return train(model, dataset, cfg.train_config(seed=derive_seed(cfg.seed, "shuffle")),
                 cfg.loss_weights(), progress=progress)


def baseline(name: str, dataset):
    if name == "persistence":
        return Persistence()
    if name == "climatology":
        if not isinstance(dataset, GridSeries) or dataset.climatology is None:
            raise ConfigurationError("the climatology baseline needs a grid dataset with a climatology")
        return Climatology(dataset.climatology, dataset.start_doy)
    raise ConfigurationError(f"unknown baseline {name!r}")


def check_compatible(model: KiaModel, dataset) -> None:
    if model.input_dim != dataset.dim:
        raise ConfigurationError(
            f"model expects observations of shape (*, {model.input_dim}) but the dataset has shape "
            f"{tuple(np.shape(dataset.observations))}"
        )


def horizon_report(forecaster, dataset, cfg: ExperimentConfig, horizon: Optional[int] = None,
                   inits: Optional[int] = None):
    ev = cfg.raw["evaluate"]
    metric = "celsius" if isinstance(dataset, GridSeries) else "relative"
    rep = evaluate_horizon(
        forecaster, dataset, n_inits=int(inits if inits is not None else ev["inits"]),
        horizon=int(horizon if horizon is not None else cfg.horizon), metric=metric,
        clean_targets=bool(ev["clean_targets"]),
    )
    rep.meta.update(setting_meta(dataset, cfg))
    return rep


def setting_meta(dataset, cfg: ExperimentConfig) -> dict:
    meta = {"seed": cfg.seed, "kind": dataset_kind(dataset)}
    if isinstance(dataset, TrajectoryDataset):
        meta["theta0"] = dataset.meta.get("theta0")
        meta["noise_std"] = float(dataset.noise_std)
        meta["train_points"] = int(dataset.split[0])
    else:
        meta["region"] = dataset.region
    return meta


def k_day_table(forecaster, dataset, leads: Sequence[int]) -> KDayResult:
    return evaluate_k_day(forecaster, dataset, leads=tuple(int(k) for k in leads))


def truncated(dataset: TrajectoryDataset, size: int) -> TrajectoryDataset:
    """Keep only the last ``size`` training points; validation and test unchanged."""
    a, b, c = dataset.split
    if size > a:
        raise ConfigurationError(f"training size {size} exceeds the {a} available training points")
    if size < 1:
        raise ConfigurationError(f"training size must be positive, got {size}")
    return split_dataset(dataset, (size, b, c))
