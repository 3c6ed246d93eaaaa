"""Synthetic ground-truth PM2.5 fields for desk-scale verification.

The field is a sum of Gaussian plumes whose centers drift linearly in
time over a smooth baseline, so the true concentration is analytically
evaluable at any (lat, lon, day). Sensor records sample the field at
random fixed sites with additive Gaussian noise; covariates are smooth
deterministic functions of location and day, with wind aligned to the
drift of the nearest plume.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .core import DataError, SensorRecord, derive_rng, parse_iso_date
from .geo import EARTH_RADIUS_KM, haversine_km_array

KM_PER_DEG_LAT = math.pi * EARTH_RADIUS_KM / 180.0
SECONDS_PER_DAY = 86400.0

SITE_LAYOUTS = ("uniform", "dense_west", "two_clusters")


@dataclass(frozen=True)
class GaussianSource:
    """One drifting plume: center moves linearly, amplitude is fixed."""

    lat: float
    lon: float
    amplitude: float          # peak contribution, ug/m3
    width_km: float           # spatial standard deviation
    drift_lat_per_day: float  # degrees/day
    drift_lon_per_day: float

    def center_at(self, day_offset: float) -> tuple[float, float]:
        return (self.lat + self.drift_lat_per_day * day_offset,
                self.lon + self.drift_lon_per_day * day_offset)


@dataclass(frozen=True)
class SyntheticFieldSpec:
    """Full analytic description of the ground-truth field."""

    n_sites: int
    n_days: int
    sources: tuple[GaussianSource, ...]
    baseline: float
    noise_sd: float
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    start_date: int                  # days since epoch
    layout: str = "uniform"
    dense_fraction: float = 0.85     # share of sites in the dense half

    def __post_init__(self) -> None:
        if not self.sources:
            raise DataError("need at least one source")
        if self.layout not in SITE_LAYOUTS:
            raise DataError(f"unknown site layout {self.layout!r}")
        if self.lat_max <= self.lat_min or self.lon_max <= self.lon_min:
            raise DataError("domain bounds must be increasing")
        if self.noise_sd < 0:
            raise DataError("noise_sd must be >= 0")

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def lon_mid(self) -> float:
        return 0.5 * (self.lon_min + self.lon_max)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["sources"] = [asdict(s) for s in self.sources]
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SyntheticFieldSpec":
        doc = json.loads(text)
        doc["sources"] = tuple(GaussianSource(**s) for s in doc["sources"])
        if "layout" in doc:
            doc["layout"] = str(doc["layout"])
        return cls(**doc)


def make_field_spec(
    n_sites: int = 100,
    n_days: int = 120,
    n_sources: int = 3,
    noise_sd: float = 0.5,
    seed: int = 0,
    layout: str = "uniform",
    start_date: str = "2019-01-01",
    domain: tuple[float, float, float, float] = (38.0, 42.0, -112.0, -108.0),
) -> SyntheticFieldSpec:
    """Draw plausible source parameters from a seeded stream.

    The domain is ~4 by 4 degrees so that typical site spacing stays
    well inside the 50 km IDW2 search cutoff at 100 sites.
    """
    rng = derive_rng(seed, "field-spec")
    lat_min, lat_max, lon_min, lon_max = domain
    sources = []
    for _ in range(n_sources):
        # Keep centers away from the border so plumes stay influential.
        lat = rng.uniform(lat_min + 0.8, lat_max - 0.8)
        lon = rng.uniform(lon_min + 0.8, lon_max - 0.8)
        amplitude = rng.uniform(12.0, 25.0)
        # Plume widths sit between a ~35 km dense-network spacing (field
        # resolvable) and a ~80 km sparse-network spacing (under-sampled),
        # so sensor density genuinely limits what is knowable.
        width = rng.uniform(50.0, 90.0)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        speed = rng.uniform(0.008, 0.016)  # degrees/day
        sources.append(GaussianSource(
            lat=float(lat), lon=float(lon),
            amplitude=float(amplitude), width_km=float(width),
            drift_lat_per_day=float(speed * math.cos(angle)),
            drift_lon_per_day=float(speed * math.sin(angle)),
        ))
    return SyntheticFieldSpec(
        n_sites=n_sites, n_days=n_days, sources=tuple(sources),
        baseline=7.5, noise_sd=noise_sd,
        lat_min=lat_min, lat_max=lat_max, lon_min=lon_min, lon_max=lon_max,
        start_date=parse_iso_date(start_date), layout=layout,
    )


def field_value(spec: SyntheticFieldSpec, lat, lon, date):
    """Analytic ground truth in ug/m3; vectorized over lat/lon arrays."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    day_offset = np.asarray(date, dtype=float) - spec.start_date
    total = np.full(np.broadcast(lat, lon, day_offset).shape, spec.baseline)
    for source in spec.sources:
        c_lat = source.lat + source.drift_lat_per_day * day_offset
        c_lon = source.lon + source.drift_lon_per_day * day_offset
        # Local equirectangular distance: exact enough at these scales
        # and analytically smooth in the drift parameter.
        d_ns = (lat - c_lat) * KM_PER_DEG_LAT
        d_ew = (lon - c_lon) * KM_PER_DEG_LAT * np.cos(np.radians(lat))
        d2 = d_ns ** 2 + d_ew ** 2
        total = total + source.amplitude * np.exp(
            -d2 / (2.0 * source.width_km ** 2)
        )
    return float(total) if total.ndim == 0 else total


def _nearest_source_drift(
    spec: SyntheticFieldSpec, lat: float, lon: float, day_offset: float,
) -> tuple[float, float]:
    """(bearing degrees, speed m/s) of the closest plume's drift."""
    centers = [s.center_at(day_offset) for s in spec.sources]
    dists = haversine_km_array(
        lat, lon,
        np.array([c[0] for c in centers]),
        np.array([c[1] for c in centers]),
    )
    source = spec.sources[int(np.argmin(dists))]
    d_lat = source.drift_lat_per_day
    d_lon = source.drift_lon_per_day * math.cos(math.radians(lat))
    bearing = math.degrees(math.atan2(d_lon, d_lat)) % 360.0
    km_per_day = math.hypot(d_lat, d_lon) * KM_PER_DEG_LAT
    speed = km_per_day * 1000.0 / SECONDS_PER_DAY
    return bearing, speed


def covariates_at(spec: SyntheticFieldSpec, lat: float, lon: float,
                  date: int) -> dict:
    """Smooth deterministic covariates, consistent for repeated queries."""
    day_offset = float(date - spec.start_date)
    season = math.sin(2.0 * math.pi * (date % 365.25) / 365.25)
    tmin = 4.0 + 10.0 * season - 0.8 * (lat - spec.lat_min)
    rhmin = min(max(35.0 + 18.0 * math.sin(0.9 * lon + 0.05 * day_offset),
                    0.0), 74.0)
    bearing, speed = _nearest_source_drift(spec, lat, lon, day_offset)
    pop_day = 500.0 + 450.0 * (1.0 + math.sin(2.1 * lat) * math.cos(1.7 * lon))
    elevation = 1400.0 + 700.0 * math.sin(0.9 * lat) * math.cos(0.7 * lon)
    return {
        "land_cover": int((math.floor(lat * 2.0) + math.floor(lon * 2.0)) % 5),
        "elevation": elevation,
        "tmin": tmin,
        "tmax": tmin + 9.0,
        "rhmin": rhmin,
        "rhmax": min(rhmin + 24.0, 100.0),
        "precip": max(0.0, 3.0 * math.sin(2.0 * math.pi * day_offset / 31.0
                                          + 0.6 * lon)),
        "wind_speed": speed + 1.0,
        "wind_dir": bearing,
        "pop_day": pop_day,
        "pop_night": 0.8 * pop_day + 150.0,
    }


def place_sites(spec: SyntheticFieldSpec, seed: int) -> list[tuple[str, float, float]]:
    """Fixed site locations per layout; ids are stable across runs."""
    rng = derive_rng(seed, "sites")
    n = spec.n_sites
    lats = np.empty(n)
    lons = np.empty(n)
    if spec.layout == "uniform":
        lats[:] = rng.uniform(spec.lat_min, spec.lat_max, size=n)
        lons[:] = rng.uniform(spec.lon_min, spec.lon_max, size=n)
    elif spec.layout == "dense_west":
        n_dense = int(round(spec.dense_fraction * n))
        lats[:] = rng.uniform(spec.lat_min, spec.lat_max, size=n)
        lons[:n_dense] = rng.uniform(spec.lon_min, spec.lon_mid, size=n_dense)
        lons[n_dense:] = rng.uniform(spec.lon_mid, spec.lon_max, size=n - n_dense)
    else:  # two_clusters
        half = n // 2
        lat_span = spec.lat_max - spec.lat_min
        lon_span = spec.lon_max - spec.lon_min
        centers = (
            (spec.lat_min + 0.3 * lat_span, spec.lon_min + 0.25 * lon_span),
            (spec.lat_min + 0.7 * lat_span, spec.lon_min + 0.75 * lon_span),
        )
        for i, (c_lat, c_lon) in enumerate(centers):
            count = half if i == 0 else n - half
            sl = slice(0, half) if i == 0 else slice(half, n)
            lats[sl] = np.clip(rng.normal(c_lat, 0.18 * lat_span, size=count),
                               spec.lat_min, spec.lat_max)
            lons[sl] = np.clip(rng.normal(c_lon, 0.14 * lon_span, size=count),
                               spec.lon_min, spec.lon_max)
    return [(f"S{i:04d}", float(lats[i]), float(lons[i])) for i in range(n)]


def generate_synthetic(
    spec: SyntheticFieldSpec,
    seed: int,
) -> tuple[list[SensorRecord], Callable]:
    """Sample the field at fixed random sites for every day.

    Returns (records, oracle) where oracle(lat, lon, date) evaluates the
    noiseless ground truth. With noise_sd=0 every record's pm25 equals
    the oracle at its coordinates exactly.
    """
    sites = place_sites(spec, seed)
    noise_rng = derive_rng(seed, "noise")
    records = []
    for site_id, lat, lon in sites:
        dates = np.arange(spec.start_date, spec.start_date + spec.n_days)
        truth = field_value(spec, lat, lon, dates)
        noise = (noise_rng.normal(0.0, spec.noise_sd, size=spec.n_days)
                 if spec.noise_sd > 0 else np.zeros(spec.n_days))
        for i, date in enumerate(dates):
            cov = covariates_at(spec, lat, lon, int(date))
            records.append(SensorRecord(
                site_id=site_id, lat=lat, lon=lon, date=int(date),
                pm25=max(float(truth[i] + noise[i]), 0.0),
                **cov,
            ))

    def oracle(lat, lon, date):
        return field_value(spec, lat, lon, date)

    return records, oracle
