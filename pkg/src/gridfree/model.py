"""Cross-attention interpolator: sensor set -> latents -> scalar at a query.

A learned latent array cross-attends to an unordered set of sensor
tokens (encoder), and a query token cross-attends to the latents
(decoder) to produce one scalar in log-PM2.5 space. The same block
weights are recycled across passes, so the parameter count is
independent of sensor count, query count, and recycle depth.

Token layouts are governed by a FeatureSchema whose hash is stored in
the model artifact; loading rejects artifacts whose layout does not
match the runtime configuration.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .artifacts import load_artifact, save_artifact
from .core import (
    FULL_EXTRA_COVARIATES,
    ConfigError,
    DataError,
    FeatureSetKind,
    RunConfig,
    SensorRecord,
    config_from_text,
    config_hash,
    config_to_text,
    derive_seed,
)
from .geo import encode_latlon_array, fourier_encode_array
from .pipeline import LagVector, StationTable, build_lag_vector
from .scalers import ScalerSet

DTYPE = torch.float64


@dataclass(frozen=True)
class FeatureSchema:
    """Canonical token layout for one feature set and configuration.

    Sensor numeric layout: scaled pm25, the lag window (most recent
    first), scaled time, then the Fourier-encoded spherical coordinates,
    then (full set only) the extra scaled covariates. Query layout drops
    everything PM2.5-derived and the time slot: coordinates plus (full
    set) the extras. The land-cover class index is carried separately
    and embedded inside the model so the embedding stays trainable.
    """

    feature_set: FeatureSetKind
    lag_window: int
    fourier_bands: int
    fourier_period: float
    embed_dim: int
    n_classes: int

    @property
    def coord_width(self) -> int:
        return 3 * 2 * self.fourier_bands

    @property
    def extra_width(self) -> int:
        if self.feature_set is FeatureSetKind.FULL:
            return len(FULL_EXTRA_COVARIATES)
        return 0

    @property
    def sensor_numeric_width(self) -> int:
        return 1 + self.lag_window + 1 + self.coord_width + self.extra_width

    @property
    def query_numeric_width(self) -> int:
        return self.coord_width + self.extra_width

    def sensor_fields(self) -> tuple[str, ...]:
        names = ["pm25"]
        names += [f"lag{k:02d}" for k in range(1, self.lag_window + 1)]
        names.append("time")
        names += self._coord_fields()
        names += self._extra_fields()
        return tuple(names)

    def query_fields(self) -> tuple[str, ...]:
        return tuple(self._coord_fields() + self._extra_fields())

    def _coord_fields(self) -> list[str]:
        out = []
        for axis in ("cx", "cy", "cz"):
            out += [f"{axis}_sin{b}" for b in range(1, self.fourier_bands + 1)]
            out += [f"{axis}_cos{b}" for b in range(1, self.fourier_bands + 1)]
        return out

    def _extra_fields(self) -> list[str]:
        if self.feature_set is FeatureSetKind.FULL:
            return list(FULL_EXTRA_COVARIATES)
        return []

    def layout_text(self) -> str:
        return "\n".join([
            f"feature_set={self.feature_set.value}",
            f"fourier_period={self.fourier_period!r}",
            f"embed_dim={self.embed_dim}",
            f"n_classes={self.n_classes}",
            "sensor=" + ",".join(self.sensor_fields()),
            "query=" + ",".join(self.query_fields()),
        ]) + "\n"

    def schema_hash(self) -> str:
        digest = hashlib.sha256(self.layout_text().encode("utf-8"))
        return digest.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "feature_set": self.feature_set.value,
            "lag_window": self.lag_window,
            "fourier_bands": self.fourier_bands,
            "fourier_period": self.fourier_period,
            "embed_dim": self.embed_dim,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeatureSchema":
        kwargs = dict(data)
        kwargs["feature_set"] = FeatureSetKind(kwargs["feature_set"])
        return cls(**kwargs)


def schema_from_config(config: RunConfig, scalers: ScalerSet) -> FeatureSchema:
    classes = scalers["land_cover"].classes
    return FeatureSchema(
        feature_set=config.feature_set,
        lag_window=config.lag_window,
        fourier_bands=config.fourier_bands,
        fourier_period=config.fourier_period,
        embed_dim=config.embed_dim,
        n_classes=len(classes),
    )


@dataclass(frozen=True)
class QueryPoint:
    """Where to predict: location, day, and query-side covariates.

    ``date`` selects the sensor set and (full feature set) the exogenous
    covariates; it never enters the query token itself.
    """

    lat: float
    lon: float
    date: int
    land_cover: int
    extras: Mapping[str, float] = field(default_factory=dict)


def _coord_block(lats, lons, schema: FeatureSchema) -> np.ndarray:
    coords = encode_latlon_array(np.atleast_1d(lats), np.atleast_1d(lons))
    return fourier_encode_array(coords, schema.fourier_bands,
                                schema.fourier_period)


def _scaled_extras(source, scalers: ScalerSet, schema: FeatureSchema,
                   what: str) -> list[float]:
    out = []
    for name in FULL_EXTRA_COVARIATES:
        if isinstance(source, Mapping):
            if name not in source:
                raise DataError(f"{what} missing covariate {name!r}")
            value = source[name]
        else:
            value = getattr(source, name)
        out.append(float(scalers.apply(name, float(value))))
    return out


def assemble_sensor_token(
    record: SensorRecord,
    lag: LagVector,
    scalers: ScalerSet,
    schema: FeatureSchema,
) -> tuple[np.ndarray, int]:
    """(numeric feature vector, land-cover class index) for one sensor."""
    if len(lag.values) != schema.lag_window:
        raise DataError(
            f"lag vector length {len(lag.values)} != window {schema.lag_window}"
        )
    parts = [float(scalers.apply("pm25", record.pm25))]
    parts += list(lag.values)
    parts.append(float(scalers.apply("time", float(record.date))))
    numeric = np.concatenate([
        np.array(parts),
        _coord_block(record.lat, record.lon, schema)[0],
        np.array(_scaled_extras(record, scalers, schema, "sensor")
                 if schema.extra_width else []),
    ])
    class_index = int(scalers.apply("land_cover", record.land_cover))
    return numeric, class_index


def assemble_query_token(
    point: QueryPoint,
    scalers: ScalerSet,
    schema: FeatureSchema,
) -> tuple[np.ndarray, int]:
    """(numeric feature vector, class index) for one query location.

    Contains no PM2.5-derived slots by construction.
    """
    numeric = np.concatenate([
        _coord_block(point.lat, point.lon, schema)[0],
        np.array(_scaled_extras(point.extras, scalers, schema, "query")
                 if schema.extra_width else []),
    ])
    class_index = int(scalers.apply("land_cover", point.land_cover))
    return numeric, class_index


@dataclass
class FeatureTable:
    """Precomputed per-record tokens so batch assembly is pure indexing."""

    sensor_numeric: np.ndarray   # (n, sensor_numeric_width)
    query_numeric: np.ndarray    # (n, query_numeric_width)
    class_index: np.ndarray      # (n,) int64
    target_scaled: np.ndarray    # (n,) log-space pm25
    pm25: np.ndarray             # (n,) raw ug/m3
    lat: np.ndarray
    lon: np.ndarray
    date: np.ndarray             # (n,) int64 days
    coords3: np.ndarray          # (n, 3) spherical encoding, for sampling
    site_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.site_ids)


def build_feature_table(
    records: Sequence[SensorRecord],
    table: StationTable,
    scalers: ScalerSet,
    schema: FeatureSchema,
) -> FeatureTable:
    recs = list(records)
    if not recs:
        raise DataError("cannot build features from zero records")
    lats = np.array([r.lat for r in recs])
    lons = np.array([r.lon for r in recs])
    dates = np.array([r.date for r in recs], dtype=np.int64)
    pm25 = np.array([r.pm25 for r in recs])
    coords3 = encode_latlon_array(lats, lons)
    coord_feat = fourier_encode_array(coords3, schema.fourier_bands,
                                      schema.fourier_period)
    target_scaled = np.asarray(scalers.apply("pm25", pm25), dtype=float)
    time_scaled = np.asarray(scalers.apply("time", dates.astype(float)))

    lag_matrix = np.empty((len(recs), schema.lag_window))
    for i, rec in enumerate(recs):
        lag = build_lag_vector(rec, table, scalers["pm25"], schema.lag_window)
        lag_matrix[i] = lag.values

    blocks = [target_scaled[:, None], lag_matrix, time_scaled[:, None],
              coord_feat]
    query_blocks = [coord_feat]
    if schema.extra_width:
        extras = np.column_stack([
            np.asarray(scalers.apply(
                name, np.array([getattr(r, name) for r in recs], dtype=float)
            ))
            for name in FULL_EXTRA_COVARIATES
        ])
        blocks.append(extras)
        query_blocks.append(extras)

    class_index = np.array(
        [scalers.apply("land_cover", r.land_cover) for r in recs],
        dtype=np.int64,
    )
    return FeatureTable(
        sensor_numeric=np.concatenate(blocks, axis=1),
        query_numeric=np.concatenate(query_blocks, axis=1),
        class_index=class_index,
        target_scaled=target_scaled,
        pm25=pm25,
        lat=lats,
        lon=lons,
        date=dates,
        coords3=coords3,
        site_ids=tuple(r.site_id for r in recs),
    )


class MultiHeadCrossAttention(nn.Module):
    """Scaled dot-product attention from query rows onto key/value rows."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        if queries.ndim != 3 or keys.ndim != 3:
            raise ValueError("attention expects (batch, tokens, dim) inputs")
        b, n_q, dim = queries.shape
        n_k = keys.shape[1]
        q = self.q_proj(queries).view(b, n_q, self.n_heads, self.head_dim)
        k = self.k_proj(keys).view(b, n_k, self.n_heads, self.head_dim)
        v = self.v_proj(keys).view(b, n_k, self.n_heads, self.head_dim)
        q = q.transpose(1, 2)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        logits = torch.matmul(q, k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            invalid = ~key_mask[:, None, None, :]
            logits = logits.masked_fill(invalid, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = torch.matmul(weights, v)
        out = out.transpose(1, 2).reshape(b, n_q, dim)
        return self.out_proj(out)


class AttentionBlock(nn.Module):
    """Pre-norm cross-attention plus a residual feed-forward layer."""

    def __init__(self, dim: int, n_heads: int, ffn_mult: int = 2):
        super().__init__()
        self.attn = MultiHeadCrossAttention(dim, n_heads)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim),
            nn.GELU(),
            nn.Linear(ffn_mult * dim, dim),
        )

    def forward(self, queries: torch.Tensor, keys: torch.Tensor,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        queries = queries + self.attn(self.norm_q(queries),
                                      self.norm_kv(keys), key_mask)
        return queries + self.ffn(self.norm_ffn(queries))


class FieldInterpolator(nn.Module):
    """Encoder/decoder over sensor sets with recycled block weights."""

    def __init__(self, schema: FeatureSchema, config: RunConfig):
        super().__init__()
        self.schema = schema
        self.latent_count = config.latent_count
        self.latent_dim = config.latent_dim
        self.recycle_count = config.recycle_count
        dim = config.latent_dim
        self.embedding = nn.Embedding(schema.n_classes, schema.embed_dim)
        self.sensor_proj = nn.Linear(
            schema.sensor_numeric_width + schema.embed_dim, dim
        )
        self.query_proj = nn.Linear(
            schema.query_numeric_width + schema.embed_dim, dim
        )
        self.latents = nn.Parameter(torch.empty(config.latent_count, dim))
        self.blocks = nn.ModuleList(
            AttentionBlock(dim, config.n_heads)
            for _ in range(config.n_blocks)
        )
        self.decoder = AttentionBlock(dim, config.n_heads)
        self.head = nn.Sequential(
            nn.Linear(dim, dim),
            nn.GELU(),
            nn.Linear(dim, 1),
        )
        self.to(DTYPE)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        """Uniform fan-in init drawn from one derived, fixed stream."""
        gen = torch.Generator().manual_seed(derive_seed(seed, "init"))
        for name, module in sorted(self.named_modules()):
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, nn.Embedding):
                bound = 1.0 / math.sqrt(module.embedding_dim)
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, nn.LayerNorm):
                with torch.no_grad():
                    module.weight.fill_(1.0)
                    module.bias.fill_(0.0)
        bound = 1.0 / math.sqrt(self.latent_dim)
        with torch.no_grad():
            self.latents.uniform_(-bound, bound, generator=gen)

    def _tokens(self, numeric: torch.Tensor, classes: torch.Tensor,
                proj: nn.Linear) -> torch.Tensor:
        embedded = self.embedding(classes)
        return proj(torch.cat([numeric, embedded], dim=-1))

    def encode(self, sensor_numeric: torch.Tensor,
               sensor_class: torch.Tensor,
               sensor_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Latent array per batch row; order of sensor tokens is irrelevant."""
        if sensor_numeric.ndim != 3:
            raise ValueError("sensor_numeric must be (batch, sensors, width)")
        if sensor_numeric.shape[-1] != self.schema.sensor_numeric_width:
            raise ValueError(
                f"sensor width {sensor_numeric.shape[-1]} != schema "
                f"{self.schema.sensor_numeric_width}"
            )
        if sensor_numeric.shape[1] == 0:
            raise DataError("cannot encode an empty sensor set")
        if sensor_mask is not None and bool((~sensor_mask).all(dim=1).any()):
            raise DataError("a batch row has zero valid sensors")
        tokens = self._tokens(sensor_numeric, sensor_class, self.sensor_proj)
        latents = self.latents.unsqueeze(0).expand(
            tokens.shape[0], self.latent_count, self.latent_dim
        )
        for _ in range(self.recycle_count):
            for block in self.blocks:
                latents = block(latents, tokens, sensor_mask)
        return latents

    def decode(self, latents: torch.Tensor, query_numeric: torch.Tensor,
               query_class: torch.Tensor) -> torch.Tensor:
        """One log-space scalar per query row; rows decode independently."""
        if query_numeric.shape[-1] != self.schema.query_numeric_width:
            raise ValueError(
                f"query width {query_numeric.shape[-1]} != schema "
                f"{self.schema.query_numeric_width}"
            )
        if latents.shape[0] != query_numeric.shape[0]:
            raise ValueError("latent and query batch sizes differ")
        q = self._tokens(query_numeric.unsqueeze(1), query_class.unsqueeze(1),
                         self.query_proj)
        out = self.decoder(q, latents)
        return self.head(out).squeeze(-1).squeeze(-1)

    def forward(self, sensor_numeric: torch.Tensor,
                sensor_class: torch.Tensor,
                query_numeric: torch.Tensor,
                query_class: torch.Tensor,
                sensor_mask: torch.Tensor | None = None) -> torch.Tensor:
        latents = self.encode(sensor_numeric, sensor_class, sensor_mask)
        return self.decode(latents, query_numeric, query_class)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class PredictionResult(NamedTuple):
    values: np.ndarray    # ug/m3
    clamped: np.ndarray   # True where numerical underflow hit the 0 clamp


def predict_scaled(
    model: FieldInterpolator,
    sensor_numeric: np.ndarray,
    sensor_class: np.ndarray,
    query_numeric: np.ndarray,
    query_class: np.ndarray,
    sensor_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Batched forward pass from numpy arrays, in log space."""
    with torch.no_grad():
        out = model(
            torch.as_tensor(sensor_numeric, dtype=DTYPE),
            torch.as_tensor(np.asarray(sensor_class), dtype=torch.long),
            torch.as_tensor(query_numeric, dtype=DTYPE),
            torch.as_tensor(np.asarray(query_class), dtype=torch.long),
            None if sensor_mask is None
            else torch.as_tensor(sensor_mask, dtype=torch.bool),
        )
    return out.numpy()


def predict(
    model: FieldInterpolator,
    sensors: Sequence[SensorRecord],
    query: QueryPoint,
    scalers: ScalerSet,
    table: StationTable,
) -> PredictionResult:
    """Full forward pass for one query against explicit sensor records.

    The back-transform from log space is strictly positive, so the zero
    clamp can only fire on floating-point underflow; the flag records it.
    """
    if not sensors:
        raise DataError("predict needs at least one sensor")
    schema = model.schema
    rows = []
    classes = []
    for rec in sensors:
        lag = build_lag_vector(rec, table, scalers["pm25"],
                               schema.lag_window)
        numeric, cls = assemble_sensor_token(rec, lag, scalers, schema)
        rows.append(numeric)
        classes.append(cls)
    q_numeric, q_class = assemble_query_token(query, scalers, schema)
    scaled = predict_scaled(
        model,
        np.stack(rows)[None, :, :],
        np.array([classes], dtype=np.int64),
        q_numeric[None, :],
        np.array([q_class], dtype=np.int64),
    )
    values = np.asarray(scalers.invert("pm25", scaled), dtype=float)
    clamped = values <= 0.0
    values = np.maximum(values, 0.0)
    return PredictionResult(values=values, clamped=clamped)


MODEL_ARTIFACT_KIND = "gridfree-model"


def save_model(path, model: FieldInterpolator, config: RunConfig,
               scalers_hash: str) -> None:
    state = {name: tensor.detach().numpy().astype(np.float64)
             for name, tensor in model.state_dict().items()}
    payload = {
        "schema": model.schema.to_dict(),
        "schema_hash": model.schema.schema_hash(),
        "config_text": config_to_text(config),
        "scalers_hash": scalers_hash,
        "weights": state,
    }
    save_artifact(path, MODEL_ARTIFACT_KIND, payload,
                  config_hash(config), config.seed)


def load_model(path, scalers: ScalerSet) -> tuple[FieldInterpolator, RunConfig]:
    """Rebuild the model; refuse layout or vocabulary mismatches."""
    doc = load_artifact(path, expected_kind=MODEL_ARTIFACT_KIND)
    payload = doc["payload"]
    schema = FeatureSchema.from_dict(payload["schema"])
    if schema.schema_hash() != payload["schema_hash"]:
        raise DataError(
            f"model artifact {path} schema hash mismatch: stored "
            f"{payload['schema_hash']}, recomputed {schema.schema_hash()}"
        )
    config = config_from_text(payload["config_text"])
    runtime_schema = schema_from_config(config, scalers)
    if runtime_schema.schema_hash() != schema.schema_hash():
        raise DataError(
            "model feature layout does not match the runtime scalers/config: "
            f"artifact {schema.schema_hash()}, "
            f"runtime {runtime_schema.schema_hash()}"
        )
    model = FieldInterpolator(schema, config)
    state = {name: torch.as_tensor(arr, dtype=DTYPE)
             for name, arr in payload["weights"].items()}
    model.load_state_dict(state)
    return model, config
