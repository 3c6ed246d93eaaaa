"""Shared domain types, run configuration, and deterministic RNG plumbing.

Everything downstream (feature engineering, model, trainer, evaluation)
imports its value types and its randomness from here, so reproducibility
is decided in exactly one place.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from datetime import date as _date, timedelta
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

EPOCH = _date(1970, 1, 1)

# Concentrations below this are dropped before the log transform.
PM25_DETECTION_FLOOR = 0.005


class GridfreeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GridfreeError):
    """Invalid configuration or usage (CLI exit code 1)."""


class DataError(GridfreeError):
    """Invalid, inconsistent, or missing data (CLI exit code 2)."""


class TrainingError(GridfreeError):
    """Runtime failure inside the training loop (CLI exit code 3)."""


def date_to_days(d: _date) -> int:
    """Calendar date -> integer days since 1970-01-01."""
    return (d - EPOCH).days


def days_to_date(days: int) -> _date:
    return EPOCH + timedelta(days=int(days))


def parse_iso_date(text: str) -> int:
    """Parse ``YYYY-MM-DD`` into days since epoch."""
    try:
        return date_to_days(_date.fromisoformat(text))
    except ValueError as exc:
        raise DataError(f"invalid date {text!r}: {exc}") from None


_SEASON_BY_MONTH = {
    12: "winter", 1: "winter", 2: "winter",
    3: "spring", 4: "spring", 5: "spring",
    6: "summer", 7: "summer", 8: "summer",
    9: "fall", 10: "fall", 11: "fall",
}


def season_of(days: int) -> str:
    """Meteorological season (DJF winter, MAM spring, JJA summer, SON fall)."""
    return _SEASON_BY_MONTH[days_to_date(days).month]


class FeatureSetKind(str, Enum):
    """Which covariates enter the sensor and query feature vectors."""

    MINIMAL = "minimal"
    FULL = "full"


# Covariates added on top of the minimal set, in canonical layout order.
FULL_EXTRA_COVARIATES = (
    "tmin", "tmax", "rhmin", "rhmax", "precip",
    "wind_speed", "wind_dir", "pop_day", "pop_night", "elevation",
)


@dataclass(frozen=True)
class SensorRecord:
    """One (site, day) observation with its colocated covariates.

    ``date`` is integer days since 1970-01-01; after colocated aggregation
    there is at most one record per (site_id, date).
    """

    site_id: str
    lat: float
    lon: float
    date: int
    pm25: float
    land_cover: int
    elevation: float
    tmin: float
    tmax: float
    rhmin: float
    rhmax: float
    precip: float
    wind_speed: float
    wind_dir: float
    pop_day: float
    pop_night: float

    def key(self) -> tuple[str, int]:
        return (self.site_id, self.date)


def validate_record(rec: SensorRecord) -> None:
    """Raise DataError naming the first field that violates its invariant."""
    if not -90.0 <= rec.lat <= 90.0:
        raise DataError(f"lat {rec.lat} outside [-90, 90]")
    if not -180.0 <= rec.lon <= 180.0:
        raise DataError(f"lon {rec.lon} outside [-180, 180]")
    if not np.isfinite(rec.pm25) or rec.pm25 < 0.0:
        raise DataError(f"pm25 {rec.pm25} must be finite and >= 0")
    checks = (
        ("rhmin", rec.rhmin, 0.0, 100.0),
        ("rhmax", rec.rhmax, 0.0, 100.0),
        ("wind_dir", rec.wind_dir, 0.0, 360.0 - 1e-12),
    )
    for name, value, lo, hi in checks:
        if not lo <= value <= hi:
            raise DataError(f"{name} {value} outside [{lo}, {hi}]")
    for name in ("precip", "wind_speed", "pop_day", "pop_night"):
        if getattr(rec, name) < 0.0:
            raise DataError(f"{name} {getattr(rec, name)} must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a reproducible run.

    Defaults follow the shipped baseline; architecture sizes are engine
    defaults, not externally mandated values. Serializes to a flat
    ``key = value`` text file, see :func:`config_to_text`.
    """

    feature_set: FeatureSetKind = FeatureSetKind.MINIMAL
    n_sensors: int = 16                # sensors sampled per query
    sampling_sigma: float = 0.1        # Gaussian radius, normalized coords
    lag_window: int = 15               # days of lagged history per sensor
    latent_count: int = 32
    latent_dim: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    recycle_count: int = 3             # weight-shared passes over the blocks
    fourier_bands: int = 8
    fourier_period: float = 2.0
    embed_dim: int = 12                # land-cover embedding width
    batch_size: int = 64
    n_batches: int = 50
    n_epochs: int = 30
    learning_rate: float = 1e-3
    mc_samples: int = 10               # Monte Carlo subsets for uncertainty
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    optimizer: str = "adam"            # "adam" or "gd" (plain gradient descent)
    patience: int = 10                 # early-stopping epochs on val loss

    def __post_init__(self) -> None:
        if abs(sum(self.split_fractions) - 1.0) > 1e-12:
            raise ConfigError(
                f"split_fractions {self.split_fractions} must sum to 1"
            )
        if self.n_sensors < 1:
            raise ConfigError("n_sensors must be >= 1")
        if self.mc_samples < 2:
            raise ConfigError("mc_samples must be >= 2")
        if self.lag_window < 1:
            raise ConfigError("lag_window must be >= 1")
        if self.fourier_bands < 1:
            raise ConfigError("fourier_bands must be >= 1")
        if self.fourier_period <= 0:
            raise ConfigError("fourier_period must be > 0")
        if self.optimizer not in ("adam", "gd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for name in ("latent_count", "latent_dim", "n_heads", "n_blocks",
                     "recycle_count", "embed_dim", "batch_size", "n_batches",
                     "n_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.latent_dim % self.n_heads != 0:
            raise ConfigError("latent_dim must be divisible by n_heads")

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


def _format_value(value) -> str:
    if isinstance(value, FeatureSetKind):
        return value.value
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: RunConfig) -> str:
    """Serialize to the flat ``key = value`` format (UTF-8, # comments)."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}"
             for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> RunConfig:
    """Parse the flat key-value format back into a RunConfig.

    Unknown keys and malformed lines raise ConfigError with the line number.
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        raw[key.strip()] = value.strip()

    known = {f.name: f for f in fields(RunConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            kwargs[key] = _parse_field(key, value)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return RunConfig(**kwargs)


def _parse_field(name: str, value: str):
    if name == "feature_set":
        return FeatureSetKind(value.lower())
    if name == "split_fractions":
        parts = tuple(float(p) for p in value.split(","))
        if len(parts) != 3:
            raise ValueError("expected three comma-separated fractions")
        return parts
    if name == "optimizer":
        return value
    if name in ("sampling_sigma", "fourier_period", "learning_rate"):
        return float(value)
    return int(value)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))


def config_hash(cfg: RunConfig) -> str:
    """Stable hex digest of the canonical config text."""
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/val/test index sets over a record list."""

    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self) -> None:
        sets = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(s) for s in sets)
        union = set().union(*sets)
        if len(union) != total:
            raise DataError("split index sets overlap")

    @property
    def n_total(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)

    def indices(self, name: str) -> tuple[int, ...]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random stream; identical seeds give identical draws."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent substream keyed by (seed, *keys).

    Used for per-batch / per-member streams so that reproducibility does
    not depend on consumption order or worker identity.
    """
    tag = ":".join([str(seed)] + [str(k) for k in keys])
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return np.random.Generator(
        np.random.PCG64(int.from_bytes(digest[:8], "little"))
    )


def derive_seed(seed: int, *keys) -> int:
    """64-bit integer seed from (seed, *keys), for torch generators."""
    tag = ":".join([str(seed)] + [str(k) for k in keys])
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
