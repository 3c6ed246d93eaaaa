"""Ingestion, cleaning, gap filling, lag features, and dataset splitting.

The pipeline turns raw station CSV rows into validated records, merges
colocated monitors, drops readings below the instrument detection floor,
builds the 15-day lagged PM2.5 vector with a two-stage imputation
cascade (spatial IDW2, then temporal linear interpolation, then
padding), and fits the per-variable scaler policy.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    PM25_DETECTION_FLOOR,
    DataError,
    DatasetSplit,
    FeatureSetKind,
    SensorRecord,
    days_to_date,
    parse_iso_date,
    seeded_rng,
    validate_record,
)
from .geo import (
    aggregate_scalar_to_hex,
    aggregate_wind_to_hex,
    haversine_km_array,
    hex_index,
)
from .scalers import (
    DEFAULT_CAP_PERCENTILES,
    ScalerKind,
    ScalerParams,
    ScalerSet,
    apply_scaler,
    fit_scaler,
    percentile_caps,
)

STATION_HEADER = (
    "site_id", "lat", "lon", "date", "pm25", "land_cover", "elevation",
    "tmin", "tmax", "rhmin", "rhmax", "precip", "wind_speed", "wind_dir",
    "pop_day", "pop_night",
)
GRID_HEADER = ("cell_lat", "cell_lon", "date", "variable", "value",
               "overlap_weight")

# Expanding search radii for spatial gap filling; the outermost radius is
# the hard cutoff beyond which a day stays unfilled by this stage.
IDW2_RADII_KM = (5.0, 10.0, 20.0, 35.0, 50.0)
IDW2_MAX_NEIGHBORS = 32
IDW2_COINCIDENT_KM = 0.001  # closer than 1 m: take the value directly

MET_POP_VARIABLES = ("tmin", "tmax", "rhmin", "rhmax", "precip",
                     "wind_speed", "wind_dir", "pop_day", "pop_night")


class LagProvenance(str, Enum):
    OBSERVED = "observed"
    IDW2 = "idw2"
    LINEAR = "linear"
    PADDED = "padded"


@dataclass(frozen=True)
class LagVector:
    """Scaled lagged PM2.5, most recent day first, with imputation source."""

    values: tuple[float, ...]
    provenance: tuple[LagProvenance, ...]

    def __post_init__(self) -> None:
        if len(self.values) != len(self.provenance):
            raise DataError("lag values and provenance lengths differ")
        if not all(np.isfinite(self.values)):
            raise DataError("lag vector contains non-finite entries")


@dataclass
class IngestReport:
    rows_read: int = 0
    records_out: int = 0
    elevation_capped: int = 0
    dropped_below_detection: int = 0
    colocated_merged: int = 0


def aggregate_colocated(records: Sequence[SensorRecord]) -> list[SensorRecord]:
    """Merge duplicate (site_id, date) readings into one mean record.

    Coordinates must agree across duplicates; covariates are taken from
    the first duplicate (identical by construction upstream).
    """
    groups: dict[tuple[str, int], list[SensorRecord]] = defaultdict(list)
    for rec in records:
        groups[rec.key()].append(rec)
    out = []
    for key in sorted(groups):
        dupes = groups[key]
        first = dupes[0]
        for other in dupes[1:]:
            if other.lat != first.lat or other.lon != first.lon:
                raise DataError(
                    f"site {first.site_id!r} has conflicting coordinates "
                    f"({first.lat}, {first.lon}) vs ({other.lat}, {other.lon})"
                )
        if len(dupes) == 1:
            out.append(first)
        else:
            mean_pm25 = float(np.mean([d.pm25 for d in dupes]))
            out.append(replace(first, pm25=mean_pm25))
    return out


def drop_below_detection(
    records: Sequence[SensorRecord],
    floor: float = PM25_DETECTION_FLOOR,
) -> tuple[list[SensorRecord], int]:
    kept = [r for r in records if r.pm25 >= floor]
    return kept, len(records) - len(kept)


class StationTable:
    """Indexed view over aggregated records for spatial/temporal lookups."""

    def __init__(self, records: Sequence[SensorRecord]):
        self.records: tuple[SensorRecord, ...] = tuple(
            sorted(records, key=lambda r: r.key())
        )
        self._by_key: dict[tuple[str, int], SensorRecord] = {}
        self._by_date: dict[int, list[SensorRecord]] = defaultdict(list)
        series: dict[str, list[tuple[int, float]]] = defaultdict(list)
        for rec in self.records:
            if rec.key() in self._by_key:
                raise DataError(
                    f"duplicate (site, date) {rec.key()}; aggregate first"
                )
            self._by_key[rec.key()] = rec
            self._by_date[rec.date].append(rec)
            series[rec.site_id].append((rec.date, rec.pm25))
        self._series = {
            site: (np.array([d for d, _ in pts], dtype=np.int64),
                   np.array([v for _, v in pts], dtype=float))
            for site, pts in series.items()
        }

    def __len__(self) -> int:
        return len(self.records)

    def get(self, site_id: str, date: int) -> SensorRecord | None:
        return self._by_key.get((site_id, date))

    def on_date(self, date: int) -> list[SensorRecord]:
        return self._by_date.get(date, [])

    def site_series(self, site_id: str) -> tuple[np.ndarray, np.ndarray]:
        """(dates ascending, pm25) for one site; empty arrays if unknown."""
        if site_id not in self._series:
            return np.empty(0, dtype=np.int64), np.empty(0)
        return self._series[site_id]

    def site_ids(self) -> list[str]:
        return sorted(self._series)

    def site_location(self, site_id: str) -> tuple[float, float]:
        dates, _ = self.site_series(site_id)
        if dates.size == 0:
            raise DataError(f"unknown site {site_id!r}")
        rec = self._by_key[(site_id, int(dates[0]))]
        return rec.lat, rec.lon


def idw2_interpolate(
    lat: float,
    lon: float,
    date: int,
    candidates: Sequence[SensorRecord],
    exclude_site: str | None = None,
) -> tuple[float, bool]:
    """Inverse-distance-squared estimate with expanding search radii.

    Radii grow through IDW2_RADII_KM until at least one candidate falls
    inside; the nearest <= 32 candidates within that radius contribute
    v_i/d_i^2 weights. A candidate closer than 1 m short-circuits to its
    own value. Returns (nan, False) when nothing lies within the last
    radius.
    """
    pool = [c for c in candidates
            if c.date == date and c.site_id != exclude_site]
    if not pool:
        return float("nan"), False
    lats = np.array([c.lat for c in pool])
    lons = np.array([c.lon for c in pool])
    values = np.array([c.pm25 for c in pool])
    dists = haversine_km_array(lat, lon, lats, lons)
    for radius in IDW2_RADII_KM:
        inside = np.nonzero(dists <= radius)[0]
        if inside.size == 0:
            continue
        order = inside[np.argsort(dists[inside], kind="stable")]
        take = order[:IDW2_MAX_NEIGHBORS]
        d = dists[take]
        v = values[take]
        if d[0] < IDW2_COINCIDENT_KM:
            return float(v[0]), True
        weights = 1.0 / np.square(d)
        return float(np.dot(weights, v) / weights.sum()), True
    return float("nan"), False


def _linear_fill(dates: np.ndarray, values: np.ndarray,
                 day: int) -> float | None:
    """Linear interpolation if >= 2 observations bracket the gap day."""
    if dates.size < 2:
        return None
    pos = np.searchsorted(dates, day)
    if pos == 0 or pos >= dates.size:
        return None
    d0, d1 = int(dates[pos - 1]), int(dates[pos])
    if not d0 < day < d1:
        return None
    v0, v1 = float(values[pos - 1]), float(values[pos])
    return v0 + (v1 - v0) * (day - d0) / (d1 - d0)


def build_lag_vector(
    record: SensorRecord,
    table: StationTable,
    log_params: ScalerParams,
    lag_window: int = 15,
) -> LagVector:
    """Lagged PM2.5 for the ``lag_window`` days before ``record.date``.

    Fill cascade per day: the site's own observation, then spatial IDW2
    from other sites, then linear interpolation within the site's series,
    then padding with the current-day value. Output is log-scaled.
    """
    dates, series_values = table.site_series(record.site_id)
    raw: list[float] = []
    provenance: list[LagProvenance] = []
    for back in range(1, lag_window + 1):
        day = record.date - back
        own = table.get(record.site_id, day)
        if own is not None:
            raw.append(own.pm25)
            provenance.append(LagProvenance.OBSERVED)
            continue
        value, found = idw2_interpolate(
            record.lat, record.lon, day, table.on_date(day),
            exclude_site=record.site_id,
        )
        if found:
            raw.append(value)
            provenance.append(LagProvenance.IDW2)
            continue
        linear = _linear_fill(dates, series_values, day)
        if linear is not None:
            raw.append(linear)
            provenance.append(LagProvenance.LINEAR)
            continue
        raw.append(record.pm25)
        provenance.append(LagProvenance.PADDED)
    scaled = apply_scaler(log_params, np.array(raw, dtype=float))
    return LagVector(values=tuple(float(v) for v in np.atleast_1d(scaled)),
                     provenance=tuple(provenance))


def split_dataset(
    records: Sequence[SensorRecord],
    fractions: tuple[float, float, float],
    seed: int,
) -> DatasetSplit:
    """Record-level shuffle then partition; deterministic under seed."""
    n = len(records)
    if n < 10:
        raise DataError(f"need at least 10 records to split, got {n}")
    if abs(sum(fractions) - 1.0) > 1e-12:
        raise DataError(f"split fractions {fractions} must sum to 1")
    perm = seeded_rng(seed).permutation(n)
    n_train = int(n * fractions[0] + 1e-9)
    n_val = int(n * fractions[1] + 1e-9)
    return DatasetSplit(
        train=tuple(int(i) for i in perm[:n_train]),
        val=tuple(int(i) for i in perm[n_train:n_train + n_val]),
        test=tuple(int(i) for i in perm[n_train + n_val:]),
    )


def _parse_station_row(row: list[str], lineno: int,
                       path: str) -> SensorRecord:
    if len(row) != len(STATION_HEADER):
        raise DataError(
            f"{path}: line {lineno}: expected {len(STATION_HEADER)} fields, "
            f"got {len(row)}"
        )
    try:
        rec = SensorRecord(
            site_id=row[0].strip(),
            lat=float(row[1]),
            lon=float(row[2]),
            date=parse_iso_date(row[3].strip()),
            pm25=float(row[4]),
            land_cover=int(row[5]),
            elevation=float(row[6]),
            tmin=float(row[7]),
            tmax=float(row[8]),
            rhmin=float(row[9]),
            rhmax=float(row[10]),
            precip=float(row[11]),
            wind_speed=float(row[12]),
            wind_dir=float(row[13]),
            pop_day=float(row[14]),
            pop_night=float(row[15]),
        )
    except (ValueError, DataError) as exc:
        raise DataError(f"{path}: line {lineno}: {exc}") from None
    return rec


def ingest_stations(path) -> tuple[list[SensorRecord], IngestReport]:
    """Parse, validate, cap, deduplicate, and floor-filter a station CSV.

    Lines starting with '#' are artifact metadata and are skipped.
    Structural problems (bad field counts, unparsable values, coordinate
    or covariate invariant violations) raise DataError with the line
    number; negative elevations are capped to 0 and counted.
    """
    path = str(path)
    report = IngestReport()
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise DataError(f"station file not found: {path}") from None

    parsed: list[SensorRecord] = []
    header_seen = False
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        row = next(csv.reader([line]))
        if not header_seen:
            got = tuple(c.strip() for c in row)
            if got != STATION_HEADER:
                raise DataError(
                    f"{path}: line {lineno}: header mismatch; expected "
                    f"{','.join(STATION_HEADER)}"
                )
            header_seen = True
            continue
        report.rows_read += 1
        rec = _parse_station_row(row, lineno, path)
        if rec.elevation < 0.0:
            rec = replace(rec, elevation=0.0)
            report.elevation_capped += 1
        try:
            validate_record(rec)
        except DataError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
        parsed.append(rec)
    if not header_seen:
        raise DataError(f"{path}: missing header line")

    kept, dropped = drop_below_detection(parsed)
    report.dropped_below_detection = dropped
    merged = aggregate_colocated(kept)
    report.colocated_merged = len(kept) - len(merged)
    report.records_out = len(merged)
    return merged, report


def write_stations(path, records: Iterable[SensorRecord],
                   comments: Sequence[str] = ()) -> None:
    """Write records in the station CSV schema (comments as '#' lines)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(STATION_HEADER)
        for rec in records:
            writer.writerow([
                rec.site_id,
                repr(rec.lat), repr(rec.lon),
                days_to_date(rec.date).isoformat(),
                repr(rec.pm25), rec.land_cover, repr(rec.elevation),
                repr(rec.tmin), repr(rec.tmax),
                repr(rec.rhmin), repr(rec.rhmax), repr(rec.precip),
                repr(rec.wind_speed), repr(rec.wind_dir),
                repr(rec.pop_day), repr(rec.pop_night),
            ])


@dataclass(frozen=True)
class CovariateTable:
    """Hex-aggregated covariates: (cell id, date) -> variable -> value."""

    resolution: int
    cells: Mapping[tuple[int, int], Mapping[str, float]]

    def lookup(self, lat: float, lon: float,
               date: int) -> Mapping[str, float] | None:
        cell = hex_index(lat, lon, self.resolution)
        return self.cells.get((cell.id, date))


def ingest_covariate_grid(path, resolution: int = 8) -> CovariateTable:
    """Aggregate a pre-tabulated covariate grid onto hex cells.

    Scalar variables use overlap-weighted means. Wind rows are special:
    wind_speed and wind_dir must come in pairs per source grid cell and
    are vector-averaged so opposing flows cancel instead of averaging to
    a fictitious direction.
    """
    path = str(path)
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise DataError(f"covariate grid file not found: {path}") from None

    # (hex id, date) -> variable -> list of (source key, value, weight)
    groups: dict[tuple[int, int], dict[str, list]] = defaultdict(
        lambda: defaultdict(list)
    )
    header_seen = False
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        row = next(csv.reader([line]))
        if not header_seen:
            if tuple(c.strip() for c in row) != GRID_HEADER:
                raise DataError(
                    f"{path}: line {lineno}: header mismatch; expected "
                    f"{','.join(GRID_HEADER)}"
                )
            header_seen = True
            continue
        if len(row) != len(GRID_HEADER):
            raise DataError(
                f"{path}: line {lineno}: expected {len(GRID_HEADER)} fields"
            )
        try:
            cell_lat, cell_lon = float(row[0]), float(row[1])
            date = parse_iso_date(row[2].strip())
            variable = row[3].strip()
            value, weight = float(row[4]), float(row[5])
        except (ValueError, DataError) as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
        cell = hex_index(cell_lat, cell_lon, resolution)
        source_key = (row[0].strip(), row[1].strip())
        groups[(cell.id, date)][variable].append((source_key, value, weight))
    if not header_seen:
        raise DataError(f"{path}: missing header line")

    cells: dict[tuple[int, int], dict[str, float]] = {}
    for group_key in sorted(groups):
        bucket = groups[group_key]
        out: dict[str, float] = {}
        has_speed = "wind_speed" in bucket
        has_dir = "wind_dir" in bucket
        if has_speed != has_dir:
            raise DataError(
                f"cell {group_key}: wind_speed and wind_dir rows must pair up"
            )
        if has_speed:
            dirs = {src: (val, w) for src, val, w in bucket.pop("wind_dir")}
            entries = []
            for src, speed, weight in bucket.pop("wind_speed"):
                if src not in dirs:
                    raise DataError(
                        f"cell {group_key}: wind_speed at {src} has no "
                        f"matching wind_dir row"
                    )
                entries.append((speed, dirs.pop(src)[0], weight))
            if dirs:
                raise DataError(
                    f"cell {group_key}: unmatched wind_dir rows at "
                    f"{sorted(dirs)}"
                )
            wind = aggregate_wind_to_hex(entries)
            out["wind_speed"] = wind.speed
            out["wind_dir"] = wind.direction
        for variable in sorted(bucket):
            rows = bucket[variable]
            out[variable] = aggregate_scalar_to_hex(
                [(val, w) for _, val, w in rows]
            )
        cells[group_key] = out
    return CovariateTable(resolution=resolution, cells=cells)


def fit_default_scalers(
    records: Sequence[SensorRecord],
    feature_set: FeatureSetKind = FeatureSetKind.MINIMAL,
) -> ScalerSet:
    """Per-variable scaler policy.

    PM2.5 and its lags share one base-10 log scaler with the 0.001 floor;
    time is min-max to [0, 1] over the training date range; coordinates
    use the unit-sphere encoder; land cover is categorical. The full
    feature set adds standardized meteorology/population variables capped
    at their 0.1/99.9 percentiles and min-max elevation with a hard lower
    cap of 0.
    """
    recs = list(records)
    if not recs:
        raise DataError("cannot fit scalers on zero records")
    scalers = ScalerSet()
    scalers["pm25"] = fit_scaler(ScalerKind.LOG)
    scalers["time"] = fit_scaler(
        ScalerKind.MINMAX, [float(r.date) for r in recs]
    )
    scalers["latlon"] = fit_scaler(ScalerKind.LATLON)
    scalers["land_cover"] = fit_scaler(
        ScalerKind.CATEGORICAL, [r.land_cover for r in recs]
    )
    if feature_set is FeatureSetKind.FULL:
        for name in MET_POP_VARIABLES:
            values = [getattr(r, name) for r in recs]
            scalers[name] = fit_scaler(
                ScalerKind.STANDARD, values, percentile_caps(values)
            )
        elevations = [r.elevation for r in recs]
        upper = float(np.percentile(elevations, DEFAULT_CAP_PERCENTILES[1]))
        scalers["elevation"] = fit_scaler(
            ScalerKind.MINMAX, elevations, caps=(0.0, upper)
        )
    return scalers
