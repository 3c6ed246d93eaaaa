"""Monte Carlo sensor-subset uncertainty quantification.

Prediction sensitivity to which sensors are supplied is an epistemic
signal: M independent subsets are drawn from the same policy used in
training, each member predicts in log space, members are back-
transformed to ug/m3, and the spread across members gives the mean,
unbiased variance, and coefficient of variation at the query point.

Per-member randomness is derived from (seed, query id, member index),
so members are reproducible independently of evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .core import ConfigError, DataError, RunConfig, derive_rng
from .model import (
    DTYPE,
    FeatureTable,
    FieldInterpolator,
    QueryPoint,
    assemble_query_token,
)
from .scalers import ScalerSet
from .training import BatchSampler, sample_nearby_sensors

# Below this mean (ug/m3) the coefficient of variation is numerically
# unstable and is reported as missing rather than a huge ratio.
CV_MEAN_FLOOR = 0.1


@dataclass(frozen=True)
class SubsetPolicy:
    """How Monte Carlo members choose their sensor subsets.

    "gaussian" mirrors the training sampler (size and sigma default to
    the training configuration); "full" is the degenerate policy that
    always supplies every candidate, making all members identical.
    """

    kind: str = "gaussian"
    n_sensors: int | None = None
    sigma: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "full"):
            raise ConfigError(f"unknown subset policy {self.kind!r}")


@dataclass(frozen=True)
class PredictionWithUncertainty:
    mean: float
    variance: float
    cv: float                     # nan when mean <= CV_MEAN_FLOOR
    members: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.members) < 2:
            raise ConfigError("uncertainty needs at least 2 members")


class UQRow(NamedTuple):
    lat: float
    lon: float
    date: int
    mean: float
    variance: float
    cv: float
    m: int


def _member_subset(
    policy: SubsetPolicy,
    config: RunConfig,
    features: FeatureTable,
    candidates: np.ndarray,
    exclude_index: int | None,
    query_coords3: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    cand = np.asarray(candidates)
    if exclude_index is not None:
        cand = cand[cand != exclude_index]
    if cand.size == 0:
        raise DataError("no candidate sensors for this query")
    if policy.kind == "full":
        return cand
    n = policy.n_sensors if policy.n_sensors is not None else config.n_sensors
    sigma = policy.sigma if policy.sigma is not None else config.sampling_sigma
    delta = features.coords3[cand] - query_coords3
    d2 = np.einsum("ij,ij->i", delta, delta)
    log_w = -(d2 - d2.min()) / (2.0 * sigma * sigma)
    if n >= cand.size:
        return cand
    u = rng.random(cand.size)
    keys = log_w - np.log(-np.log(u))
    return cand[np.argpartition(-keys, n - 1)[:n]]


def _forward_members(
    model: FieldInterpolator,
    features: FeatureTable,
    subsets: Sequence[np.ndarray],
    query_numeric: np.ndarray,
    query_class: int,
) -> np.ndarray:
    """One batched forward pass over all member subsets; log-space output."""
    m = len(subsets)
    n_max = max(s.size for s in subsets)
    width = features.sensor_numeric.shape[1]
    sensor_numeric = np.zeros((m, n_max, width))
    sensor_class = np.zeros((m, n_max), dtype=np.int64)
    mask = np.zeros((m, n_max), dtype=bool)
    for j, subset in enumerate(subsets):
        k = subset.size
        sensor_numeric[j, :k] = features.sensor_numeric[subset]
        sensor_class[j, :k] = features.class_index[subset]
        mask[j, :k] = True
    with torch.no_grad():
        out = model(
            torch.as_tensor(sensor_numeric, dtype=DTYPE),
            torch.as_tensor(sensor_class, dtype=torch.long),
            torch.as_tensor(np.tile(query_numeric, (m, 1)), dtype=DTYPE),
            torch.as_tensor(np.full(m, query_class), dtype=torch.long),
            torch.as_tensor(mask, dtype=torch.bool),
        )
    return out.numpy()


def _aggregate(members: np.ndarray) -> PredictionWithUncertainty:
    mean = float(np.mean(members))
    variance = float(np.var(members, ddof=1))
    cv = (math.sqrt(variance) / mean) if mean > CV_MEAN_FLOOR else float("nan")
    return PredictionWithUncertainty(
        mean=mean, variance=variance, cv=cv,
        members=tuple(float(v) for v in members),
    )


def mc_predict(
    model: FieldInterpolator,
    features: FeatureTable,
    candidates: np.ndarray,
    query_numeric: np.ndarray,
    query_class: int,
    query_coords3: np.ndarray,
    config: RunConfig,
    scalers: ScalerSet,
    m: int,
    policy: SubsetPolicy,
    seed: int,
    query_id,
    exclude_index: int | None = None,
) -> PredictionWithUncertainty:
    """Mean/variance/CV from M independent sensor subsets at one query.

    Member j draws its subset from the rng derived from
    (seed, "mc", query_id, j); members are back-transformed to ug/m3
    before any statistic is computed.
    """
    if m < 2:
        raise ConfigError(f"Monte Carlo member count must be >= 2, got {m}")
    subsets = [
        _member_subset(
            policy, config, features, candidates, exclude_index,
            query_coords3, derive_rng(seed, "mc", query_id, j),
        )
        for j in range(m)
    ]
    scaled = _forward_members(model, features, subsets, query_numeric,
                              query_class)
    members = np.asarray(scalers.invert("pm25", scaled), dtype=float)
    return _aggregate(members)


def cv_field_rows(
    model: FieldInterpolator,
    sampler: BatchSampler,
    query_indices: Sequence[int],
    config: RunConfig,
    scalers: ScalerSet,
    m: int | None = None,
    policy: SubsetPolicy = SubsetPolicy(),
    seed: int | None = None,
) -> list[UQRow]:
    """mc_predict applied to feature-table rows (queries by index).

    Candidates come from the sampler's training pool on the query's
    date; a query that is itself a training row never sees itself.
    The query id keying member rngs is the (site, date) pair, so the
    field is stable under reordering of the query list.
    """
    f = sampler.features
    m = m if m is not None else config.mc_samples
    seed = seed if seed is not None else config.seed
    rows = []
    for i in query_indices:
        i = int(i)
        candidates = sampler.candidates_on(int(f.date[i]))
        result = mc_predict(
            model, f, candidates,
            f.query_numeric[i], int(f.class_index[i]), f.coords3[i],
            config, scalers, m, policy, seed,
            query_id=f"{f.site_ids[i]}@{int(f.date[i])}",
            exclude_index=i,
        )
        rows.append(UQRow(
            lat=float(f.lat[i]), lon=float(f.lon[i]), date=int(f.date[i]),
            mean=result.mean, variance=result.variance, cv=result.cv, m=m,
        ))
    return rows


def mc_predict_points(
    model: FieldInterpolator,
    sampler: BatchSampler,
    points: Sequence[QueryPoint],
    config: RunConfig,
    scalers: ScalerSet,
    m: int | None = None,
    policy: SubsetPolicy = SubsetPolicy(),
    seed: int | None = None,
) -> list[UQRow]:
    """mc_predict at arbitrary query points (no exclusion applies)."""
    from .geo import encode_latlon

    m = m if m is not None else config.mc_samples
    seed = seed if seed is not None else config.seed
    rows = []
    for point in points:
        numeric, cls = assemble_query_token(point, scalers, model.schema)
        candidates = sampler.candidates_on(point.date)
        if candidates.size == 0:
            raise DataError(
                f"no sensors available on date {point.date} for query "
                f"({point.lat}, {point.lon})"
            )
        result = mc_predict(
            model, sampler.features, candidates, numeric, cls,
            encode_latlon(point.lat, point.lon).as_array(),
            config, scalers, m, policy, seed,
            query_id=f"{point.lat!r},{point.lon!r}@{point.date}",
        )
        rows.append(UQRow(
            lat=point.lat, lon=point.lon, date=point.date,
            mean=result.mean, variance=result.variance, cv=result.cv, m=m,
        ))
    return rows


def uq_table_text(rows: Sequence[UQRow]) -> str:
    """CSV: lat,lon,date,mean,variance,cv,m (cv empty when missing)."""
    from .core import days_to_date

    lines = ["lat,lon,date,mean,variance,cv,m"]
    for r in rows:
        cv_text = "" if math.isnan(r.cv) else f"{r.cv:.9g}"
        lines.append(
            f"{r.lat:.9g},{r.lon:.9g},{days_to_date(r.date).isoformat()},"
            f"{r.mean:.9g},{r.variance:.9g},{cv_text},{r.m}"
        )
    return "\n".join(lines) + "\n"
