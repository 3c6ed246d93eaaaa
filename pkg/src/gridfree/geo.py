"""Coordinate encodings, great-circle distance, hexagonal indexing, and
area-weighted aggregation of gridded covariates onto hex cells.

All operations here are pure functions and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .core import DataError

EARTH_RADIUS_KM = 6371.0088

# Mean hexagon area (km^2) of the reference grid at resolution 8; each
# coarser level multiplies the area by 7.
HEX_AREA_KM2_RES8 = 0.737327598
MAX_HEX_RESOLUTION = 15


@dataclass(frozen=True)
class SphericalCoord:
    """Unit-sphere Cartesian point plus its projected planar pair."""

    x: float
    y: float
    z: float
    x_norm: float
    y_norm: float

    def as_array(self) -> np.ndarray:
        """Three coordinates fed to the encoder: (x_norm, y_norm, z).

        z is kept alongside the normalized pair so the two hemispheres
        stay distinguishable.
        """
        return np.array([self.x_norm, self.y_norm, self.z])


def encode_latlon(lat: float, lon: float) -> SphericalCoord:
    """Map latitude/longitude (degrees) onto the unit sphere.

    x = cos(lat)cos(lon), y = cos(lat)sin(lon), z = sin(lat), then the
    (x, y) pair is renormalized by the vector length (a no-op up to
    rounding, since the point already lies on the sphere).
    """
    if not -90.0 <= lat <= 90.0:
        raise DataError(f"lat {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise DataError(f"lon {lon} outside [-180, 180]")
    phi = math.radians(lat)
    lam = math.radians(lon)
    x = math.cos(phi) * math.cos(lam)
    y = math.cos(phi) * math.sin(lam)
    z = math.sin(phi)
    norm = math.sqrt(x * x + y * y + z * z)
    return SphericalCoord(x=x, y=y, z=z, x_norm=x / norm, y_norm=y / norm)


def encode_latlon_array(lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Vectorized encode_latlon; returns (n, 3) array of (x_norm, y_norm, z)."""
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    if np.any((lats < -90) | (lats > 90)):
        raise DataError("latitude outside [-90, 90]")
    if np.any((lons < -180) | (lons > 180)):
        raise DataError("longitude outside [-180, 180]")
    phi = np.radians(lats)
    lam = np.radians(lons)
    x = np.cos(phi) * np.cos(lam)
    y = np.cos(phi) * np.sin(lam)
    z = np.sin(phi)
    norm = np.sqrt(x * x + y * y + z * z)
    return np.stack([x / norm, y / norm, z], axis=-1)


def fourier_encode(x: float, n_bands: int, period: float) -> np.ndarray:
    """Sine-cosine positional encoding of a scalar.

    Returns [sin(2*pi*1*x/P), ..., sin(2*pi*Nf*x/P),
             cos(2*pi*1*x/P), ..., cos(2*pi*Nf*x/P)].
    """
    if n_bands < 1:
        raise DataError("n_bands must be >= 1")
    if period <= 0:
        raise DataError("period must be > 0")
    bands = np.arange(1, n_bands + 1)
    angles = 2.0 * np.pi * bands * x / period
    return np.concatenate([np.sin(angles), np.cos(angles)])


def fourier_encode_array(values: np.ndarray, n_bands: int,
                         period: float) -> np.ndarray:
    """Vectorized fourier_encode over the trailing axis.

    Input (..., k) -> output (..., k * 2 * n_bands), each scalar expanded
    to its sin block followed by its cos block.
    """
    if n_bands < 1:
        raise DataError("n_bands must be >= 1")
    if period <= 0:
        raise DataError("period must be > 0")
    values = np.asarray(values, dtype=float)
    bands = np.arange(1, n_bands + 1)
    angles = 2.0 * np.pi * values[..., None] * bands / period
    enc = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return enc.reshape(*values.shape[:-1], values.shape[-1] * 2 * n_bands)


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in kilometers."""
    p1, l1, p2, l2 = map(math.radians, (lat1, lon1, lat2, lon2))
    dphi = p2 - p1
    dlam = l2 - l1
    a = (math.sin(dphi / 2.0) ** 2
         + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def haversine_km_array(lat: float, lon: float, lats: np.ndarray,
                       lons: np.ndarray) -> np.ndarray:
    """Distances from one point to many, in kilometers."""
    p1 = math.radians(lat)
    l1 = math.radians(lon)
    p2 = np.radians(np.asarray(lats, dtype=float))
    l2 = np.radians(np.asarray(lons, dtype=float))
    a = (np.sin((p2 - p1) / 2.0) ** 2
         + math.cos(p1) * np.cos(p2) * np.sin((l2 - l1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(a)))


@dataclass(frozen=True)
class HexCellId:
    """Opaque 64-bit cell identifier at a given resolution."""

    id: int
    resolution: int


class HexGrid:
    """Pluggable hexagonal index: (lat, lon, resolution) -> stable cell id.

    Implementations must be deterministic and give all points inside a
    cell the same id; cell areas should track HEX_AREA_KM2_RES8 * 7**(8-r).
    """

    def cell(self, lat: float, lon: float, resolution: int) -> HexCellId:
        raise NotImplementedError

    def centroid(self, cell: HexCellId) -> tuple[float, float]:
        raise NotImplementedError


class AxialHexGrid(HexGrid):
    """Default index: pointy-top axial hex grid on the equirectangular plane.

    Latitude/longitude are mapped to planar kilometers (x = R*lon_rad,
    y = R*lat_rad), snapped to the containing hexagon by cube rounding.
    The edge length at each resolution matches the reference cell area
    scale. Not a geodesic grid: only id stability and area scale are
    contractual.
    """

    _Q_BITS = 30
    _OFFSET = 1 << (_Q_BITS - 1)

    @staticmethod
    def edge_length_km(resolution: int) -> float:
        if not 0 <= resolution <= MAX_HEX_RESOLUTION:
            raise DataError(
                f"resolution {resolution} outside [0, {MAX_HEX_RESOLUTION}]"
            )
        area = HEX_AREA_KM2_RES8 * 7.0 ** (8 - resolution)
        return math.sqrt(2.0 * area / (3.0 * math.sqrt(3.0)))

    def cell(self, lat: float, lon: float, resolution: int) -> HexCellId:
        edge = self.edge_length_km(resolution)
        if not -90.0 <= lat <= 90.0:
            raise DataError(f"lat {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise DataError(f"lon {lon} outside [-180, 180]")
        x = math.radians(lon) * EARTH_RADIUS_KM
        y = math.radians(lat) * EARTH_RADIUS_KM
        qf = (math.sqrt(3.0) / 3.0 * x - y / 3.0) / edge
        rf = (2.0 / 3.0 * y) / edge
        q, r = _cube_round(qf, rf)
        packed = ((resolution << (2 * self._Q_BITS))
                  | ((q + self._OFFSET) << self._Q_BITS)
                  | (r + self._OFFSET))
        return HexCellId(id=packed, resolution=resolution)

    def centroid(self, cell: HexCellId) -> tuple[float, float]:
        mask = (1 << self._Q_BITS) - 1
        resolution = cell.id >> (2 * self._Q_BITS)
        q = ((cell.id >> self._Q_BITS) & mask) - self._OFFSET
        r = (cell.id & mask) - self._OFFSET
        edge = self.edge_length_km(resolution)
        x = edge * math.sqrt(3.0) * (q + r / 2.0)
        y = edge * 1.5 * r
        lat = math.degrees(y / EARTH_RADIUS_KM)
        lon = math.degrees(x / EARTH_RADIUS_KM)
        return (lat, lon)


def _cube_round(qf: float, rf: float) -> tuple[int, int]:
    """Snap fractional axial coordinates to the nearest hex center."""
    xf, zf = qf, rf
    yf = -xf - zf
    x, y, z = round(xf), round(yf), round(zf)
    dx, dy, dz = abs(x - xf), abs(y - yf), abs(z - zf)
    if dx > dy and dx > dz:
        x = -y - z
    elif dy > dz:
        y = -x - z
    else:
        z = -x - y
    return int(x), int(z)


DEFAULT_GRID = AxialHexGrid()


def hex_index(lat: float, lon: float, resolution: int,
              grid: HexGrid | None = None) -> HexCellId:
    """Index a point into its hexagonal cell (default grid unless given)."""
    return (grid or DEFAULT_GRID).cell(lat, lon, resolution)


def aggregate_scalar_to_hex(
    cells: Sequence[tuple[float, float]],
) -> float:
    """Area-weighted mean of (value, overlap_weight) pairs."""
    if not cells:
        raise DataError("no cells to aggregate")
    values = np.array([v for v, _ in cells], dtype=float)
    weights = np.array([w for _, w in cells], dtype=float)
    if np.any(weights < 0):
        raise DataError("overlap weights must be >= 0")
    total = weights.sum()
    if total <= 0:
        raise DataError("all overlap weights are zero")
    return float(np.dot(values, weights) / total)


class WindAggregate(NamedTuple):
    speed: float        # m/s
    direction: float    # degrees in [0, 360)
    calm: bool          # True when the components cancelled exactly


def aggregate_wind_to_hex(
    entries: Sequence[tuple[float, float, float]],
) -> WindAggregate:
    """Vector-average wind (speed, direction, weight) entries.

    Directions are decomposed into U = s*sin(theta) (east-west) and
    V = s*cos(theta) (north-south), averaged with the overlap weights,
    and recombined; this sidesteps the circular-mean failure of naive
    direction averaging. The same sin/cos convention is used both ways,
    so the single-entry round trip is exact regardless of whether the
    inputs are "direction from" or "direction to".
    """
    if not entries:
        raise DataError("no wind entries to aggregate")
    speeds = np.array([s for s, _, _ in entries], dtype=float)
    dirs = np.array([d for _, d, _ in entries], dtype=float)
    weights = np.array([w for _, _, w in entries], dtype=float)
    if np.any(speeds < 0):
        raise DataError("wind speeds must be >= 0")
    if np.any((dirs < 0) | (dirs >= 360)):
        raise DataError("wind directions must lie in [0, 360)")
    if np.any(weights < 0):
        raise DataError("weights must be >= 0")
    total = weights.sum()
    if total <= 0:
        raise DataError("all weights are zero")
    theta = np.radians(dirs)
    u = float(np.dot(weights, speeds * np.sin(theta)) / total)
    v = float(np.dot(weights, speeds * np.cos(theta)) / total)
    speed = math.hypot(u, v)
    if speed == 0.0:
        return WindAggregate(speed=0.0, direction=0.0, calm=True)
    direction = math.degrees(math.atan2(u, v)) % 360.0
    if direction == 360.0:       # tiny negative angles round up under %
        direction = 0.0
    return WindAggregate(speed=speed, direction=direction, calm=False)
