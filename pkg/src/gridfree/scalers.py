"""Per-variable normalization: fit, apply, invert, and persistence.

Five scaler kinds cover the pipeline's variables: min-max to a fixed
range (temporal, elevation), z-score standardization (meteorology,
population), base-10 log with a positivity floor (PM2.5 and its lags),
unit-sphere coordinate encoding (latitude/longitude), and categorical
index encoding (land cover). Fitted parameters are persisted as a single
JSON document so a run can be reproduced bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import DataError
from .geo import encode_latlon_array


class ScalerKind(str, Enum):
    MINMAX = "minmax"
    STANDARD = "standard"
    LOG = "log"
    LATLON = "latlon"
    CATEGORICAL = "categorical"


DEFAULT_LOG_BASE = 10.0
DEFAULT_LOG_FLOOR = 0.001
DEFAULT_CAP_PERCENTILES = (0.1, 99.9)


@dataclass(frozen=True)
class ScalerParams:
    """Fitted parameters for one variable.

    Only the fields belonging to ``kind`` are set; the rest stay None.
    ``cap_lower``/``cap_upper`` clamp inputs before the transform.
    """

    kind: ScalerKind
    x_min: float | None = None
    x_max: float | None = None
    range_low: float = 0.0
    range_high: float = 1.0
    mean: float | None = None
    std: float | None = None
    base: float | None = None
    floor: float | None = None
    classes: tuple | None = None
    cap_lower: float | None = None
    cap_upper: float | None = None

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        for name in ("x_min", "x_max", "mean", "std", "base", "floor",
                     "cap_lower", "cap_upper"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.kind is ScalerKind.MINMAX:
            out["range_low"] = self.range_low
            out["range_high"] = self.range_high
        if self.classes is not None:
            out["classes"] = list(self.classes)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScalerParams":
        kwargs = dict(data)
        kwargs["kind"] = ScalerKind(kwargs["kind"])
        if "classes" in kwargs:
            kwargs["classes"] = tuple(kwargs["classes"])
        return cls(**kwargs)


def cap_outliers(values, lower: float, upper: float):
    """Clamp values into [lower, upper]; scalars stay scalar."""
    if lower > upper:
        raise DataError(f"cap lower {lower} exceeds upper {upper}")
    arr = np.clip(np.asarray(values, dtype=float), lower, upper)
    return float(arr) if np.isscalar(values) or arr.ndim == 0 else arr


def percentile_caps(
    samples: Sequence[float],
    percentiles: tuple[float, float] = DEFAULT_CAP_PERCENTILES,
) -> tuple[float, float]:
    """Default cap thresholds: the (0.1, 99.9) percentiles of training data."""
    arr = np.asarray(samples, dtype=float)
    lo, hi = np.percentile(arr, percentiles)
    return float(lo), float(hi)


def fit_scaler(
    kind: ScalerKind,
    samples: Sequence[float] | None = None,
    caps: tuple[float, float] | None = None,
    *,
    feature_range: tuple[float, float] = (0.0, 1.0),
    base: float = DEFAULT_LOG_BASE,
    floor: float = DEFAULT_LOG_FLOOR,
) -> ScalerParams:
    """Fit one scaler. Caps, when given, are applied before statistics."""
    cap_lower, cap_upper = (caps if caps is not None else (None, None))

    if kind is ScalerKind.LATLON:
        return ScalerParams(kind=kind)

    if kind is ScalerKind.LOG:
        if floor <= 0:
            raise DataError("log floor must be > 0")
        if base <= 1:
            raise DataError("log base must be > 1")
        return ScalerParams(kind=kind, base=base, floor=floor,
                            cap_lower=cap_lower, cap_upper=cap_upper)

    if samples is None:
        raise DataError(f"{kind.value} scaler needs samples to fit")

    if kind is ScalerKind.CATEGORICAL:
        classes = tuple(sorted(set(samples)))
        if not classes:
            raise DataError("categorical scaler needs at least one class")
        return ScalerParams(kind=kind, classes=classes)

    arr = np.asarray(samples, dtype=float)
    if caps is not None:
        arr = cap_outliers(arr, cap_lower, cap_upper)

    if kind is ScalerKind.MINMAX:
        a, b = feature_range
        if b <= a:
            raise DataError(f"feature range {feature_range} must increase")
        x_min, x_max = float(arr.min()), float(arr.max())
        if x_max <= x_min:
            raise DataError("minmax scaler needs >= 2 distinct samples")
        return ScalerParams(kind=kind, x_min=x_min, x_max=x_max,
                            range_low=a, range_high=b,
                            cap_lower=cap_lower, cap_upper=cap_upper)

    if kind is ScalerKind.STANDARD:
        # Population sigma (divide by n); fixed so fitted parameters are
        # reproducible from the same sample multiset.
        mu = float(arr.mean())
        sigma = float(arr.std(ddof=0))
        if sigma <= 0:
            raise DataError("standard scaler fit on constant data "
                            "(degenerate sigma)")
        return ScalerParams(kind=kind, mean=mu, std=sigma,
                            cap_lower=cap_lower, cap_upper=cap_upper)

    raise DataError(f"unknown scaler kind {kind!r}")


def _capped(params: ScalerParams, x):
    if params.cap_lower is not None or params.cap_upper is not None:
        lo = params.cap_lower if params.cap_lower is not None else -np.inf
        hi = params.cap_upper if params.cap_upper is not None else np.inf
        return cap_outliers(x, lo, hi)
    return x


def apply_scaler(params: ScalerParams, x):
    """Transform a value (or array) with fitted parameters.

    LatLon expects an (lat, lon) pair and returns the three encoder
    coordinates (x_norm, y_norm, z). Categorical expects a class label.
    """
    if params.kind is ScalerKind.LATLON:
        lat, lon = x
        return encode_latlon_array(np.asarray(lat), np.asarray(lon))

    if params.kind is ScalerKind.CATEGORICAL:
        try:
            return params.classes.index(x)
        except ValueError:
            raise DataError(
                f"unknown categorical class {x!r}; "
                f"known: {list(params.classes)}"
            ) from None

    value = _capped(params, x)
    scalar_in = np.isscalar(value)
    arr = np.asarray(value, dtype=float)

    if params.kind is ScalerKind.MINMAX:
        scale = (params.range_high - params.range_low) / (params.x_max - params.x_min)
        out = (arr - params.x_min) * scale + params.range_low
    elif params.kind is ScalerKind.STANDARD:
        out = (arr - params.mean) / params.std
    elif params.kind is ScalerKind.LOG:
        floored = np.maximum(arr, params.floor)
        out = np.log(floored) / math.log(params.base)
    else:
        raise DataError(f"unknown scaler kind {params.kind!r}")

    return float(out) if scalar_in or out.ndim == 0 else out


def invert_scaler(params: ScalerParams, y):
    """Exact algebraic inverse of apply_scaler on the capped range."""
    if params.kind is ScalerKind.LATLON:
        arr = np.asarray(y, dtype=float)
        x_norm, y_norm, z = arr[..., 0], arr[..., 1], arr[..., 2]
        lat = np.degrees(np.arcsin(np.clip(z, -1.0, 1.0)))
        lon = np.degrees(np.arctan2(y_norm, x_norm))
        return lat, lon

    if params.kind is ScalerKind.CATEGORICAL:
        idx = int(y)
        if not 0 <= idx < len(params.classes):
            raise DataError(f"categorical index {idx} out of range")
        return params.classes[idx]

    scalar_in = np.isscalar(y)
    arr = np.asarray(y, dtype=float)

    if params.kind is ScalerKind.MINMAX:
        scale = (params.range_high - params.range_low) / (params.x_max - params.x_min)
        out = (arr - params.range_low) / scale + params.x_min
    elif params.kind is ScalerKind.STANDARD:
        out = arr * params.std + params.mean
    elif params.kind is ScalerKind.LOG:
        out = np.power(params.base, arr)
    else:
        raise DataError(f"unknown scaler kind {params.kind!r}")

    return float(out) if scalar_in or out.ndim == 0 else out


class ScalerSet:
    """Named collection of fitted scalers, persisted as one JSON document."""

    def __init__(self, scalers: Mapping[str, ScalerParams] | None = None):
        self._scalers: dict[str, ScalerParams] = dict(scalers or {})

    def __contains__(self, name: str) -> bool:
        return name in self._scalers

    def __getitem__(self, name: str) -> ScalerParams:
        try:
            return self._scalers[name]
        except KeyError:
            raise DataError(f"no scaler fitted for variable {name!r}") from None

    def __setitem__(self, name: str, params: ScalerParams) -> None:
        self._scalers[name] = params

    def names(self) -> list[str]:
        return sorted(self._scalers)

    def apply(self, name: str, x):
        return apply_scaler(self[name], x)

    def invert(self, name: str, y):
        return invert_scaler(self[name], y)

    def to_json(self) -> str:
        doc = {name: self._scalers[name].to_dict()
               for name in sorted(self._scalers)}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def content_hash(self) -> str:
        """Digest of the serialized parameters, for artifact cross-checks."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_json(cls, text: str) -> "ScalerSet":
        doc = json.loads(text)
        return cls({name: ScalerParams.from_dict(d) for name, d in doc.items()})

    def save(self, path) -> None:
        """Atomic write: byte-stable under identical inputs."""
        payload = self.to_json().encode("utf-8")
        directory = os.path.dirname(os.fspath(path)) or "."
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "ScalerSet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())
