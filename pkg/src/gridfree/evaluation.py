"""Metrics, seasonal/spatial aggregation, parity export, LOSO harness.

MAPE uses a 0.1 ug/m3 target floor (percentage error is unstable near
zero). R^2 is the coefficient of determination about the target mean.
Spearman's rho is the Pearson correlation of average ranks; its p-value
comes from the standard t approximation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .core import DataError, SensorRecord, days_to_date, season_of
from .geo import hex_index
from .scalers import ScalerSet
from .training import BatchSampler, PreparedData
from .uncertainty import SubsetPolicy, UQRow, cv_field_rows

MAPE_EPS = 0.1
SEASONAL_HEX_RESOLUTION = 3


@dataclass(frozen=True)
class MetricReport:
    mae: float
    mape: float          # percent; nan when no target exceeds the floor
    r2: float
    n: int
    range_low: float | None = None
    range_high: float | None = None

    def to_dict(self) -> dict:
        out = {"mae": self.mae, "mape": self.mape, "r2": self.r2, "n": self.n}
        if self.range_low is not None or self.range_high is not None:
            out["range_low"] = self.range_low
            out["range_high"] = self.range_high
        return out


def metrics(
    preds: Sequence[float],
    targets: Sequence[float],
    range_filter: tuple[float, float] | None = None,
    eps: float = MAPE_EPS,
) -> MetricReport:
    """MAE, MAPE (targets > eps only), and R^2 about the target mean."""
    p = np.asarray(preds, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape or p.ndim != 1:
        raise DataError("preds and targets must be equal-length vectors")
    if p.size == 0:
        raise DataError("cannot compute metrics on zero pairs")
    low = high = None
    if range_filter is not None:
        low, high = range_filter
        keep = (t >= low) & (t <= high)
        p, t = p[keep], t[keep]
        if p.size == 0:
            raise DataError(
                f"no targets inside range filter [{low}, {high}]"
            )
    err = p - t
    mae = float(np.mean(np.abs(err)))
    over = t > eps
    mape = (float(np.mean(np.abs(err[over] / t[over])) * 100.0)
            if over.any() else float("nan"))
    sst = float(np.sum((t - t.mean()) ** 2))
    if sst == 0.0:
        raise DataError("targets are constant; R^2 undefined")
    r2 = 1.0 - float(np.sum(err ** 2)) / sst
    return MetricReport(mae=mae, mape=mape, r2=r2, n=int(p.size),
                        range_low=low, range_high=high)


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Rank correlation: Pearson correlation of average-ranked values."""
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("inputs must be equal-length vectors")
    if x.size < 3:
        raise DataError("need at least 3 pairs for rank correlation")
    rx = stats.rankdata(x, method="average")
    ry = stats.rankdata(y, method="average")
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float(np.dot(rx, rx)) * float(np.dot(ry, ry)))
    if denom == 0.0:
        raise DataError("constant vector; rank correlation undefined")
    return float(np.dot(rx, ry) / denom)


def spearman_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """(rho, two-sided p-value) via the t approximation."""
    rho = spearman(a, b)
    n = len(a)
    if abs(rho) >= 1.0:
        return rho, 0.0
    t_stat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(stats.t.sf(abs(t_stat), df=n - 2))
    return rho, p


class SeasonalRow(NamedTuple):
    season: str
    cell: int
    mape: float
    n: int


def seasonal_report(
    preds: Sequence[float],
    targets: Sequence[float],
    dates: Sequence[int],
    lats: Sequence[float],
    lons: Sequence[float],
    resolution: int = SEASONAL_HEX_RESOLUTION,
    eps: float = MAPE_EPS,
) -> list[SeasonalRow]:
    """Per-(season, coarse hex cell) MAPE. Groups with no usable targets
    (all at or below the floor) are omitted."""
    p = np.asarray(preds, dtype=float)
    t = np.asarray(targets, dtype=float)
    if not (len(p) == len(t) == len(dates) == len(lats) == len(lons)):
        raise DataError("seasonal report inputs must share a length")
    if p.size == 0:
        raise DataError("cannot build a seasonal report from zero rows")
    groups: dict[tuple[str, int], list[int]] = {}
    for i in range(p.size):
        key = (season_of(int(dates[i])),
               hex_index(float(lats[i]), float(lons[i]), resolution).id)
        groups.setdefault(key, []).append(i)
    rows = []
    for season, cell in sorted(groups):
        idx = np.array(groups[(season, cell)])
        over = t[idx] > eps
        if not over.any():
            continue
        sel = idx[over]
        mape = float(np.mean(np.abs((p[sel] - t[sel]) / t[sel])) * 100.0)
        rows.append(SeasonalRow(season=season, cell=cell, mape=mape,
                                n=int(sel.size)))
    return rows


def seasonal_table_text(rows: Sequence[SeasonalRow]) -> str:
    lines = ["season,cell,mape,n"]
    lines += [f"{r.season},{r.cell},{r.mape:.9g},{r.n}" for r in rows]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RegionMask:
    """A named spatial membership predicate over records."""

    region_id: str
    predicate: Callable[[SensorRecord], bool]

    def contains(self, rec: SensorRecord) -> bool:
        return bool(self.predicate(rec))

    @classmethod
    def from_bbox(cls, region_id: str, lat_min: float, lat_max: float,
                  lon_min: float, lon_max: float) -> "RegionMask":
        def inside(rec: SensorRecord) -> bool:
            return (lat_min <= rec.lat <= lat_max
                    and lon_min <= rec.lon <= lon_max)
        return cls(region_id=region_id, predicate=inside)

    @classmethod
    def from_sites(cls, region_id: str,
                   site_ids: Sequence[str]) -> "RegionMask":
        members = frozenset(site_ids)
        return cls(region_id=region_id,
                   predicate=lambda rec: rec.site_id in members)

    @classmethod
    def parse(cls, text: str) -> "RegionMask":
        """Parse ``bbox:NAME:lat_min,lat_max,lon_min,lon_max`` or
        ``sites:NAME:id1;id2;...``."""
        parts = text.split(":", 2)
        if len(parts) != 3:
            raise DataError(
                f"region {text!r} must look like kind:name:spec"
            )
        kind, name, spec = parts
        if kind == "bbox":
            try:
                lat0, lat1, lon0, lon1 = (float(v) for v in spec.split(","))
            except ValueError:
                raise DataError(
                    f"bbox region needs four comma-separated bounds, "
                    f"got {spec!r}"
                ) from None
            return cls.from_bbox(name, lat0, lat1, lon0, lon1)
        if kind == "sites":
            ids = [s for s in spec.split(";") if s]
            if not ids:
                raise DataError("sites region needs at least one site id")
            return cls.from_sites(name, ids)
        raise DataError(f"unknown region kind {kind!r}")


def loso_split(
    records: Sequence[SensorRecord],
    region: RegionMask,
) -> tuple[list[SensorRecord], list[SensorRecord]]:
    """(outside-region records for training, inside-region records).

    Enforces strict spatial exclusion: no site id may appear on both
    sides, so downstream training can never see the held-out region.
    """
    inside = [r for r in records if region.contains(r)]
    outside = [r for r in records if not region.contains(r)]
    if not inside:
        raise DataError(f"region {region.region_id!r} covers no records")
    straddle = ({r.site_id for r in inside}
                & {r.site_id for r in outside})
    if straddle:
        raise DataError(
            f"region {region.region_id!r} splits sites across the "
            f"boundary: {sorted(straddle)[:5]}"
        )
    return outside, inside


class ParityRow(NamedTuple):
    date: int
    lat: float
    lon: float
    observed: float
    predicted: float


def parity_export(
    preds: Sequence[float],
    targets: Sequence[float],
    meta: Sequence[tuple[int, float, float]],
) -> str:
    """CSV rows ``date,lat,lon,observed,predicted`` at 9 significant digits."""
    if not (len(preds) == len(targets) == len(meta)):
        raise DataError("parity export inputs must share a length")
    lines = ["date,lat,lon,observed,predicted"]
    for (date, lat, lon), obs, pred in zip(meta, targets, preds):
        lines.append(
            f"{days_to_date(int(date)).isoformat()},{lat:.9g},{lon:.9g},"
            f"{obs:.9g},{pred:.9g}"
        )
    return "\n".join(lines) + "\n"


def parse_parity(text: str) -> list[ParityRow]:
    from .core import parse_iso_date

    rows = []
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "date,lat,lon,observed,predicted":
        raise DataError("parity file header mismatch")
    for line in lines[1:]:
        date_s, lat_s, lon_s, obs_s, pred_s = line.split(",")
        rows.append(ParityRow(
            date=parse_iso_date(date_s), lat=float(lat_s), lon=float(lon_s),
            observed=float(obs_s), predicted=float(pred_s),
        ))
    return rows


def predict_split(
    model,
    data: PreparedData,
    sampler: BatchSampler,
    scalers: ScalerSet,
    config,
    indices: Sequence[int],
    m: int | None = None,
    policy: SubsetPolicy = SubsetPolicy(),
    seed: int | None = None,
) -> tuple[np.ndarray, np.ndarray, list[tuple[int, float, float]], list[UQRow]]:
    """Monte Carlo mean predictions for feature-table rows.

    Returns (predictions ug/m3, observed targets, (date, lat, lon) meta,
    full UQ rows). Queries whose date has no training-candidate sensors
    are skipped.
    """
    f = data.features
    usable = sampler.usable_queries(indices)
    if usable.size == 0:
        raise DataError("no evaluable queries: no dates overlap training")
    rows = cv_field_rows(model, sampler, usable, config, scalers,
                         m=m, policy=policy, seed=seed)
    preds = np.array([r.mean for r in rows])
    targets = f.pm25[usable]
    meta = [(int(f.date[i]), float(f.lat[i]), float(f.lon[i]))
            for i in usable]
    return preds, targets, meta, rows


def summary_json(reports: dict) -> str:
    """Serialize a {key: MetricReport-or-value} tree to stable JSON."""
    def convert(node):
        if isinstance(node, MetricReport):
            return convert(node.to_dict())
        if isinstance(node, dict):
            return {k: convert(v) for k, v in node.items()}
        if isinstance(node, float) and math.isnan(node):
            return None
        return node
    return json.dumps(convert(reports), sort_keys=True, indent=2) + "\n"
