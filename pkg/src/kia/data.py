"""Pendulum trajectories, synthetic gridded temperature series and their file format.

File layout (both dataset kinds): one line of JSON header, ``\\n``, then a
little-endian float64 payload. Trajectory payload order is embedding matrix
(if any), observations, clean observations (if any). Grid payload order is
the ``T x H x W`` grid followed by the ``365 x H x W`` climatology (if any).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import ConfigurationError

SCHEMA_VERSION = 1
DAYS_PER_YEAR = 365

PathLike = Union[str, Path]


class DatasetFormatError(ValueError):
    """Base class for load failures."""


class VersionMismatch(DatasetFormatError):
    pass


class TruncatedPayload(DatasetFormatError):
    pass


class ShapeMismatch(DatasetFormatError):
    pass


@dataclass(frozen=True)
class PendulumParams:
    theta0: float = 0.8
    omega0: float = 0.0
    g: float = 9.8
    length: float = 1.0
    t_span: Tuple[float, float] = (0.0, 400.0)
    n_points: int = 4000
    substeps: int = 100

    def __post_init__(self):
        if self.n_points < 2:
            raise ConfigurationError("n_points must be >= 2")
        if self.length <= 0 or self.g <= 0:
            raise ConfigurationError("length and g must be positive")
        if self.t_span[1] <= self.t_span[0]:
            raise ConfigurationError("t_span must be increasing")

    @property
    def dt(self) -> float:
        return (self.t_span[1] - self.t_span[0]) / self.n_points


@dataclass
class TrajectoryDataset:
    observations: np.ndarray  # n_points x m
    dt: float
    split: Tuple[int, int, int]
    embedding: Optional[np.ndarray] = None  # m x 2
    noise_std: float = 0.0
    seed: int = 0
    clean: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.ascontiguousarray(self.observations, dtype=np.float64)
        if sum(self.split) != len(self.observations):
            raise ConfigurationError(
                f"split {self.split} does not partition {len(self.observations)} points"
            )

    @property
    def n_points(self) -> int:
        return len(self.observations)

    @property
    def dim(self) -> int:
        return self.observations.shape[1]

    def targets(self, clean: bool = False) -> np.ndarray:
        """Series forecasts are scored against (observed by default)."""
        if clean and self.clean is not None:
            return self.clean
        return self.observations

    def part(self, name: str) -> np.ndarray:
        a, b, _ = self.split
        sl = {"train": slice(0, a), "val": slice(a, a + b), "test": slice(a + b, None)}[name]
        return self.observations[sl]


def simulate_pendulum(params: PendulumParams = PendulumParams()) -> TrajectoryDataset:
    """Integrate ``theta'' = -(g/l) sin(theta)`` with classic RK4.

    Returns states ``(theta, omega)`` at ``n_points`` evenly spaced times,
    with ``substeps`` RK4 steps between consecutive outputs.
    """
    dt = params.dt
    h = dt / params.substeps
    w2 = params.g / params.length
    states = np.empty((params.n_points, 2))
    th, om = float(params.theta0), float(params.omega0)
    states[0] = th, om
    sin = math.sin
    for i in range(1, params.n_points):
        for _ in range(params.substeps):
            k1t, k1o = om, -w2 * sin(th)
            k2t, k2o = om + 0.5 * h * k1o, -w2 * sin(th + 0.5 * h * k1t)
            k3t, k3o = om + 0.5 * h * k2o, -w2 * sin(th + 0.5 * h * k2t)
            k4t, k4o = om + h * k3o, -w2 * sin(th + h * k3t)
            th += h / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
            om += h / 6.0 * (k1o + 2.0 * k2o + 2.0 * k3o + k4o)
        states[i] = th, om
    n = params.n_points
    return TrajectoryDataset(
        states, dt, (n, 0, 0),
        meta={"system": "pendulum", "theta0": params.theta0, "omega0": params.omega0,
              "g": params.g, "length": params.length, "t_span": list(params.t_span),
              "n_points": n, "substeps": params.substeps},
    )


def pendulum_energy(states: np.ndarray, g: float = 9.8, length: float = 1.0) -> np.ndarray:
    theta, omega = states[:, 0], states[:, 1]
    return 0.5 * omega ** 2 + (g / length) * (1.0 - np.cos(theta))


def orthonormal_columns(a: np.ndarray, tol: float = 1e-8) -> Optional[np.ndarray]:
    """Gram-Schmidt with one re-orthogonalization pass; ``None`` if rank deficient."""
    q = np.zeros_like(a, dtype=np.float64)
    for j in range(a.shape[1]):
        v = a[:, j].astype(np.float64).copy()
        for _ in range(2):
            for i in range(j):
                v -= (q[:, i] @ v) * q[:, i]
        norm = np.linalg.norm(v)
        if norm <= tol * max(1.0, np.linalg.norm(a[:, j])):
            return None
        q[:, j] = v / norm
    return q


def orthogonal_embed(dataset: TrajectoryDataset, m: int = 64, seed: int = 0) -> TrajectoryDataset:
    """Lift 2-D states into ``R^m`` with a seeded random orthonormal ``m x 2`` map."""
    states = dataset.observations
    if states.shape[1] != 2:
        raise ConfigurationError(f"orthogonal_embed expects 2-D states, got width {states.shape[1]}")
    sub = 0
    while True:
        rng = np.random.default_rng([seed, sub])
        Q = orthonormal_columns(rng.standard_normal((m, 2)))
        if Q is not None:
            break
        sub += 1
    obs = states @ Q.T
    meta = dict(dataset.meta, embedding_dim=m, embedding_seed=seed, embedding_subseed=sub)
    return replace(dataset, observations=obs, embedding=Q, clean=None, seed=seed, meta=meta)


def add_gaussian_noise(dataset: TrajectoryDataset, std: float, seed: int = 0) -> TrajectoryDataset:
    """Add iid ``N(0, std^2)`` to every observation coordinate of every split."""
    if std < 0 or not math.isfinite(std):
        raise ConfigurationError(f"noise std must be finite and >= 0, got {std}")
    if std == 0:
        return replace(dataset, clean=None, noise_std=0.0)
    rng = np.random.default_rng(seed)
    clean = dataset.observations
    noisy = clean + std * rng.standard_normal(clean.shape)
    meta = dict(dataset.meta, noise_seed=seed)
    return replace(dataset, observations=noisy, clean=clean.copy(), noise_std=float(std), meta=meta)


def split_dataset(dataset: TrajectoryDataset, lengths: Tuple[int, int, int]) -> TrajectoryDataset:
    """Assign contiguous chronological train/validation/test lengths.

    A sum smaller than the series keeps the *last* points: the ablation
    ``(200, 1500, 2100)`` of a 4000-point series drops the 200 earliest
    training points so validation and test stay on the same indices.
    """
    lengths = tuple(int(x) for x in lengths)
    if len(lengths) != 3 or any(x < 0 for x in lengths):
        raise ConfigurationError(f"bad split lengths {lengths}")
    total = sum(lengths)
    n = dataset.n_points
    if total > n:
        raise ConfigurationError(f"split {lengths} needs {total} points, dataset has {n}")
    if total == n:
        return replace(dataset, split=lengths)
    drop = n - total
    if drop > dataset.split[0] and dataset.split != (n, 0, 0):
        raise ConfigurationError(f"truncating {drop} points would cut into validation data")
    return replace(
        dataset,
        observations=dataset.observations[drop:],
        clean=None if dataset.clean is None else dataset.clean[drop:],
        split=lengths,
        meta=dict(dataset.meta, dropped_leading=drop + dataset.meta.get("dropped_leading", 0)),
    )


def make_pendulum_dataset(
    theta0: float = 0.8,
    noise_std: float = 0.0,
    seed: int = 0,
    m: int = 64,
    lengths: Tuple[int, int, int] = (400, 1500, 2100),
    params: Optional[PendulumParams] = None,
) -> TrajectoryDataset:
    """Simulate, embed, perturb and split, with sub-seeds fanned out from ``seed``."""
    params = params or PendulumParams(theta0=theta0)
    ds = simulate_pendulum(params)
    ds = orthogonal_embed(ds, m, seed=derive_seed(seed, "embed"))
    ds = add_gaussian_noise(ds, noise_std, seed=derive_seed(seed, "noise"))
    ds = split_dataset(ds, lengths)
    ds.seed = seed
    return ds


SEED_OFFSETS = {"data": 0, "embed": 1, "noise": 2, "init": 3, "shuffle": 4}


def derive_seed(master: int, stage: str) -> int:
    """Fixed-offset sub-seed, so changing one stage's seed leaves the others alone."""
    return int(master) * 16 + SEED_OFFSETS[stage]


# ---------------------------------------------------------------------------
# gridded temperature series


@dataclass
class GridSeries:
    grid: np.ndarray  # T x H x W, deg C
    split: Tuple[int, int, int]
    region: str = "synthetic"
    start_doy: int = 0
    climatology: Optional[np.ndarray] = None  # 365 x H x W
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3:
            raise ConfigurationError(f"grid must be T x H x W, got shape {self.grid.shape}")
        if sum(self.split) != len(self.grid):
            raise ConfigurationError(f"split {self.split} does not partition {len(self.grid)} days")
        if not np.isfinite(self.grid).all():
            raise ConfigurationError("grid contains non-finite temperatures")

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.grid))

    @property
    def n_points(self) -> int:
        return len(self.grid)

    @property
    def cell_shape(self) -> Tuple[int, int]:
        return self.grid.shape[1:]

    @property
    def observations(self) -> np.ndarray:
        return self.grid.reshape(len(self.grid), -1)

    @property
    def dim(self) -> int:
        return self.observations.shape[1]

    def targets(self, clean: bool = False) -> np.ndarray:
        return self.observations

    def day_of_year(self, t) -> np.ndarray:
        return (self.start_doy + np.asarray(t)) % DAYS_PER_YEAR


def compute_climatology(series: GridSeries) -> np.ndarray:
    """Per calendar day mean over the training split only."""
    n_train = series.split[0]
    doy = series.day_of_year(np.arange(n_train))
    clim = np.full((DAYS_PER_YEAR,) + series.cell_shape, np.nan)
    for d in range(DAYS_PER_YEAR):
        rows = series.grid[:n_train][doy == d]
        if len(rows):
            clim[d] = rows.mean(axis=0)
    if np.isnan(clim).any():
        raise ConfigurationError("training split does not cover every calendar day")
    return clim


def _smooth_field(rng: np.random.Generator, H: int, W: int, modes: int = 3) -> np.ndarray:
    """Random low-order Fourier field in [-1, 1]."""
    y = np.linspace(0.0, 1.0, H)[:, None]
    x = np.linspace(0.0, 1.0, W)[None, :]
    f = np.zeros((H, W))
    for p in range(modes):
        for q in range(modes):
            a, ph = rng.standard_normal(), rng.uniform(0, 2 * np.pi)
            f += a / (1 + p + q) * np.cos(np.pi * (p * y + q * x) + ph)
    f -= f.mean()
    return f / max(np.abs(f).max(), 1e-12)


def generate_synthetic_sst(
    H: int = 8,
    W: int = 8,
    years: int = 5,
    seed: int = 0,
    weather_std: float = 0.4,
    weather_corr: float = 0.9,
    drift_per_year: float = 0.05,
    split_years: Optional[Tuple[int, int, int]] = None,
    region: str = "synthetic",
) -> GridSeries:
    """Seasonal field plus slow drift plus AR(1) weather anomalies.

    ``field = base + amp * sin(2 pi t / 365 + phase) + drift * t / 365 + weather``;
    the weather term is stationary with marginal std ``weather_std`` and lag-one
    correlation ``weather_corr`` (0 gives white noise). Values are clipped to
    the physical range [-2, 40] deg C.
    """
    if H < 4 or W < 4:
        raise ConfigurationError("grid must be at least 4 x 4")
    if years < 3:
        raise ConfigurationError("need at least 3 years")
    if not 0.0 <= weather_corr < 1.0:
        raise ConfigurationError("weather_corr must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    base = 27.0 + 3.0 * _smooth_field(rng, H, W)
    amp = 3.0 + 1.5 * _smooth_field(rng, H, W)
    phase = 0.6 * _smooth_field(rng, H, W)
    T = years * DAYS_PER_YEAR
    t = np.arange(T, dtype=np.float64)[:, None, None]
    grid = base + amp * np.sin(2 * np.pi * t / DAYS_PER_YEAR + phase) + drift_per_year * t / DAYS_PER_YEAR
    if weather_std > 0:
        innov = weather_std * math.sqrt(1.0 - weather_corr ** 2)
        shocks = rng.standard_normal((T, H, W))
        w = np.empty((T, H, W))
        w[0] = weather_std * shocks[0]
        for i in range(1, T):
            w[i] = weather_corr * w[i - 1] + innov * shocks[i]
        grid = grid + w
    grid = np.clip(grid, -2.0, 40.0)
    if split_years is None:
        split_years = (years - 2, 1, 1)
    if sum(split_years) != years:
        raise ConfigurationError(f"split years {split_years} must sum to {years}")
    split = tuple(int(y * DAYS_PER_YEAR) for y in split_years)
    series = GridSeries(
        grid, split, region=region, seed=seed,
        meta={"H": H, "W": W, "years": years, "weather_std": weather_std,
              "weather_corr": weather_corr, "drift_per_year": drift_per_year},
    )
    series.climatology = compute_climatology(series)
    return series


# ---------------------------------------------------------------------------
# persistence


def _write(path: PathLike, header: dict, arrays) -> None:
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))


def _read(path: PathLike):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DatasetFormatError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: unreadable header ({exc})") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise VersionMismatch(
            f"{path}: schema version {header.get('schema_version')!r}, expected {SCHEMA_VERSION}"
        )
    return header, raw[nl + 1:]


def _take(payload: bytes, offset: int, shape, path) -> Tuple[np.ndarray, int]:
    n = int(np.prod(shape))
    end = offset + 8 * n
    if end > len(payload):
        raise TruncatedPayload(f"{path}: payload ends at byte {len(payload)}, header needs {end}")
    arr = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
    return arr, end


def save_dataset(dataset: TrajectoryDataset, path: PathLike) -> None:
    emb = dataset.embedding
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": "trajectory",
        "shape": list(dataset.observations.shape),
        "dt": dataset.dt,
        "splits": list(dataset.split),
        "seed": dataset.seed,
        "noise_std": dataset.noise_std,
        "embedding_shape": None if emb is None else list(emb.shape),
        "has_clean": dataset.clean is not None,
        "meta": dataset.meta,
    }
    arrays = ([] if emb is None else [emb]) + [dataset.observations]
    if dataset.clean is not None:
        arrays.append(dataset.clean)
    _write(path, header, arrays)


def save_grid(series: GridSeries, path: PathLike) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": "grid",
        "shape": list(series.grid.shape),
        "splits": list(series.split),
        "region": series.region,
        "start_doy": series.start_doy,
        "seed": series.seed,
        "climatology_shape": None if series.climatology is None else list(series.climatology.shape),
        "meta": series.meta,
    }
    arrays = [series.grid] + ([] if series.climatology is None else [series.climatology])
    _write(path, header, arrays)


def load_dataset(path: PathLike) -> Union[TrajectoryDataset, GridSeries]:
    """Read either file kind, validating the header against the payload."""
    header, payload = _read(path)
    kind = header.get("kind", "trajectory")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise ShapeMismatch(f"{path}: bad shape {shape!r}")
    splits = tuple(header.get("splits", ()))
    if len(splits) != 3 or sum(splits) != shape[0]:
        raise ShapeMismatch(f"{path}: splits {splits} do not partition {shape[0]} rows")
    off = 0
    if kind == "trajectory":
        if len(shape) != 2:
            raise ShapeMismatch(f"{path}: trajectory shape must be 2-D, got {shape}")
        emb = None
        if header.get("embedding_shape") is not None:
            es = header["embedding_shape"]
            if es[0] != shape[1]:
                raise ShapeMismatch(f"{path}: embedding {es} does not match width {shape[1]}")
            emb, off = _take(payload, off, es, path)
        obs, off = _take(payload, off, shape, path)
        clean = None
        if header.get("has_clean"):
            clean, off = _take(payload, off, shape, path)
        if off != len(payload):
            raise ShapeMismatch(f"{path}: {len(payload) - off} unexpected trailing bytes")
        return TrajectoryDataset(
            obs, float(header["dt"]), splits, embedding=emb,
            noise_std=float(header.get("noise_std", 0.0)), seed=int(header.get("seed", 0)),
            clean=clean, meta=header.get("meta", {}),
        )
    if kind == "grid":
        if len(shape) != 3:
            raise ShapeMismatch(f"{path}: grid shape must be 3-D, got {shape}")
        grid, off = _take(payload, off, shape, path)
        clim = None
        cs = header.get("climatology_shape")
        if cs is not None:
            if cs != [DAYS_PER_YEAR] + shape[1:]:
                raise ShapeMismatch(f"{path}: climatology shape {cs} does not match grid {shape}")
            clim, off = _take(payload, off, cs, path)
        if off != len(payload):
            raise ShapeMismatch(f"{path}: {len(payload) - off} unexpected trailing bytes")
        return GridSeries(
            grid, splits, region=header.get("region", ""), start_doy=int(header.get("start_doy", 0)),
            climatology=clim, seed=int(header.get("seed", 0)), meta=header.get("meta", {}),
        )
    raise DatasetFormatError(f"{path}: unknown dataset kind {kind!r}")
