"""Forecast rollouts, error metrics, climate baselines and evaluation protocols."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .autodiff import ContractError, DimensionError
from .errors import ConfigurationError
from .models import KiaModel

K_DAY_LEADS = (1, 7, 14, 21, 30)
WINDOWS = ("all", "first100", "last100")


def rollout(model: KiaModel, x0, horizon: int) -> np.ndarray:
    """Forecast ``horizon`` steps from ``x0`` with one encode and per-step decodes.

    ``x0`` may be a single observation (result ``L x m``) or a batch of
    initial observations (result ``L x n x m``). Predictions are never
    re-encoded.
    """
    if horizon < 1:
        raise ContractError(f"horizon must be >= 1, got {horizon}")
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    batch = x0[None, :] if single else x0
    state = model.koopman.split(model.encode(batch))
    out = np.empty((horizon,) + batch.shape)
    for l in range(horizon):
        state = model.koopman.step(state)
        out[l] = model.decode(model.koopman.join(state)).data
    return out[:, 0] if single else out


def relative_error(pred, target) -> np.ndarray:
    """``|pred - target|_2 / |target|_2`` along the last axis.

    Rows whose target has zero norm come back as NaN; callers count and skip
    them.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"relative_error: {pred.shape} vs {target.shape}")
    num = np.linalg.norm(pred - target, axis=-1)
    den = np.linalg.norm(target, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def celsius_mae(pred, truth) -> np.ndarray:
    """Mean absolute difference over grid cells (trailing axes after the first ``ndim-2``)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"celsius_mae: {pred.shape} vs {truth.shape}")
    return np.abs(pred - truth).mean(axis=-1)


def mean_abs_error(pred, truth) -> float:
    return float(celsius_mae(np.asarray(pred).reshape(1, -1), np.asarray(truth).reshape(1, -1))[0])


# ---------------------------------------------------------------------------
# baselines


class Persistence:
    """Tomorrow (and every later day) looks like today."""

    variant = "persistence"

    def forecast(self, series: np.ndarray, anchors: np.ndarray, horizon: int) -> np.ndarray:
        x0 = series[np.asarray(anchors)]
        return np.broadcast_to(x0, (horizon,) + x0.shape).copy()


class Climatology:
    """Calendar-day mean field from the training years."""

    variant = "climatology"

    def __init__(self, climatology: Optional[np.ndarray], start_doy: int = 0):
        if climatology is None:
            raise ConfigurationError("climatology forecast needs a climatology field")
        clim = np.asarray(climatology, dtype=np.float64)
        self.table = clim.reshape(clim.shape[0], -1)
        self.start_doy = int(start_doy)

    def at(self, t) -> np.ndarray:
        return self.table[(self.start_doy + np.asarray(t)) % self.table.shape[0]]

    def forecast(self, series: np.ndarray, anchors: np.ndarray, horizon: int) -> np.ndarray:
        anchors = np.asarray(anchors)
        targets = anchors[None, :] + np.arange(1, horizon + 1)[:, None]
        return self.at(targets)


class ModelForecaster:
    def __init__(self, model: KiaModel):
        self.model = model
        self.variant = model.variant

    def forecast(self, series: np.ndarray, anchors: np.ndarray, horizon: int) -> np.ndarray:
        return rollout(self.model, series[np.asarray(anchors)], horizon)

    def lead(self, series: np.ndarray, anchors: np.ndarray, K: int) -> np.ndarray:
        """Prediction exactly ``K`` steps after each anchor."""
        z = self.model.koopman_power(self.model.encode(series[np.asarray(anchors)]), K)
        return self.model.decode(z).data


def persistence_forecast(series, t0: int, K: int) -> np.ndarray:
    """Forecast for ``t0 + K``: the observation at ``t0``."""
    series = np.asarray(series)
    return series[t0].copy()


def climatology_forecast(series, climatology, t0: int, K: int, start_doy: int = 0) -> np.ndarray:
    """Forecast for ``t0 + K``: the climatology of that calendar day."""
    clim = Climatology(climatology, start_doy)
    shape = np.asarray(climatology).shape[1:]
    return clim.at(t0 + K).reshape(shape)


def as_forecaster(model):
    if isinstance(model, KiaModel):
        return ModelForecaster(model)
    if hasattr(model, "forecast"):
        return model
    raise ConfigurationError(f"cannot forecast with {type(model).__name__}")


def _lead_predictions(forecaster, series: np.ndarray, anchors: np.ndarray, K: int) -> np.ndarray:
    if hasattr(forecaster, "lead"):
        return forecaster.lead(series, anchors, K)
    if K == 0:
        return series[anchors].copy()
    return forecaster.forecast(series, anchors, K)[K - 1]


# ---------------------------------------------------------------------------
# reports


@dataclass
class ForecastReport:
    """Per-step errors for each initial condition plus summary statistics."""

    errors: np.ndarray  # n_inits x horizon, NaN where excluded
    anchors: np.ndarray  # indices into the test split
    metric: str
    meta: dict = field(default_factory=dict)
    excluded: int = 0

    @property
    def horizon(self) -> int:
        return self.errors.shape[1]

    def window(self, name: str) -> np.ndarray:
        span = min(100, self.horizon)
        return {
            "all": self.errors,
            "first100": self.errors[:, :span],
            "last100": self.errors[:, -span:],
        }[name]

    def aggregates(self) -> Dict[str, Dict[str, float]]:
        """Mean and std across initial conditions of each init's window mean."""
        out = {}
        for name in WINDOWS:
            with np.errstate(invalid="ignore"):
                per_init = np.nanmean(self.window(name), axis=1)
            out[name] = {"mean": float(np.mean(per_init)), "std": float(np.std(per_init))}
        return out

    def summary(self) -> dict:
        return {
            "metric": self.metric,
            "horizon": self.horizon,
            "n_inits": int(self.errors.shape[0]),
            "anchors": [int(a) for a in self.anchors],
            "excluded_steps": int(self.excluded),
            "aggregates": self.aggregates(),
            "meta": self.meta,
        }

    def write(self, csv_path: Union[str, Path], json_path: Union[str, Path]) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["init", "anchor", "step", "error"])
            for i, a in enumerate(self.anchors):
                for s in range(self.horizon):
                    w.writerow([i, int(a), s + 1, repr(float(self.errors[i, s]))])
        with open(json_path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, csv_path: Union[str, Path], json_path: Union[str, Path]) -> "ForecastReport":
        summary = json.loads(Path(json_path).read_text())
        n, L = summary["n_inits"], summary["horizon"]
        errors = np.full((n, L), np.nan)
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                errors[int(row["init"]), int(row["step"]) - 1] = float(row["error"])
        return cls(errors, np.array(summary["anchors"]), summary["metric"], summary.get("meta", {}),
                   summary.get("excluded_steps", 0))

    def table_line(self) -> str:
        agg = self.aggregates()
        cells = [f"{agg[w]['mean']:.3f} ± {agg[w]['std']:.3f}" for w in WINDOWS]
        return " | ".join(cells)


def evenly_spaced_anchors(n_valid: int, n_inits: int) -> np.ndarray:
    if n_inits == 1:
        return np.array([0])
    return np.round(np.linspace(0, n_valid - 1, n_inits)).astype(int)


def evaluate_horizon(
    model,
    dataset,
    n_inits: int = 30,
    horizon: int = 2000,
    metric: str = "relative",
    clean_targets: bool = False,
) -> ForecastReport:
    """Roll out from ``n_inits`` test observations and score every step.

    Initial observations are evenly spaced over the anchors whose whole
    horizon fits in the test split. ``metric`` is ``"relative"`` (pendulum)
    or ``"celsius"`` (gridded temperatures).
    """
    a, b, n_test = dataset.split
    if n_test < horizon + n_inits:
        raise ConfigurationError(
            f"test split has {n_test} points; horizon {horizon} with {n_inits} inits needs "
            f"at least {horizon + n_inits}"
        )
    obs = np.asarray(dataset.observations)[a + b:]
    truth = np.asarray(dataset.targets(clean_targets))[a + b:]
    anchors = evenly_spaced_anchors(n_test - horizon, n_inits)
    forecaster = as_forecaster(model)
    pred = forecaster.forecast(obs, anchors, horizon)  # L x n x m
    idx = anchors[None, :] + np.arange(1, horizon + 1)[:, None]
    target = truth[idx]
    if metric == "relative":
        err = relative_error(pred, target)
    elif metric == "celsius":
        err = celsius_mae(pred, target)
    else:
        raise ConfigurationError(f"unknown metric {metric!r}")
    err = err.T.copy()
    excluded = int(np.isnan(err).sum())
    meta = {"variant": getattr(forecaster, "variant", "?"), "clean_targets": bool(clean_targets)}
    return ForecastReport(err, anchors, metric, meta, excluded)


@dataclass
class KDayResult:
    leads: List[int]
    per_day: Dict[int, np.ndarray]  # lead -> MAE for each scored test day
    days: Dict[int, np.ndarray]  # lead -> test-day indices (into the whole series)
    skipped: Dict[int, int]

    def means(self) -> Dict[int, float]:
        return {K: float(np.mean(self.per_day[K])) for K in self.leads}

    def to_rows(self, label: str, region: str = ""):
        m = self.means()
        return [label, region] + [m[K] for K in self.leads]


def evaluate_k_day(model, series, leads: Sequence[int] = K_DAY_LEADS, test_days: Optional[np.ndarray] = None) -> KDayResult:
    """Score a ``K``-day-ahead forecast for every day of the test split.

    Each forecast starts from the observation ``K`` days earlier, which may
    fall in the validation year; days without that much history are skipped.
    """
    a, b, n_test = series.split
    obs = np.asarray(series.observations)
    if test_days is None:
        test_days = np.arange(a + b, a + b + n_test)
    forecaster = as_forecaster(model)
    per_day, days, skipped = {}, {}, {}
    for K in leads:
        if K < 0:
            raise ConfigurationError(f"lead must be >= 0, got {K}")
        ok = test_days[test_days - K >= 0]
        skipped[K] = int(len(test_days) - len(ok))
        pred = _lead_predictions(forecaster, obs, ok - K, K)
        per_day[K] = celsius_mae(pred, obs[ok])
        days[K] = ok
    return KDayResult(list(leads), per_day, days, skipped)
