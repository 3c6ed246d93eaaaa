"""Training loop: neighborhood-sampled batches, weighted loss, updates.

Each batch draws query sensors uniformly from the training split, then
for every query draws a subset of other same-day sensors with weights
proportional to exp(-d^2 / (2 sigma^2)) in normalized spherical
coordinates, without replacement and never including the query itself.
The loss is squared error in log space with per-example weights
proportional to 1/subset_size, normalized to sum to the batch size.

Reproducibility: every batch uses an rng derived from (seed, epoch,
batch index), so checkpoint/resume at an epoch boundary replays the
identical stream.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .artifacts import load_artifact, save_artifact
from .core import (
    DataError,
    DatasetSplit,
    RunConfig,
    SensorRecord,
    TrainingError,
    config_from_text,
    config_hash,
    config_to_text,
    derive_rng,
)
from .model import (
    DTYPE,
    FeatureSchema,
    FeatureTable,
    FieldInterpolator,
    build_feature_table,
    schema_from_config,
)
from .pipeline import StationTable, split_dataset
from .scalers import ScalerSet

CHECKPOINT_ARTIFACT_KIND = "gridfree-checkpoint"


@dataclass
class PreparedData:
    """Records plus everything derived from them for one run."""

    records: tuple[SensorRecord, ...]
    table: StationTable
    split: DatasetSplit
    features: FeatureTable


def prepare_data(
    records: Sequence[SensorRecord],
    scalers: ScalerSet,
    config: RunConfig,
    split: DatasetSplit | None = None,
) -> PreparedData:
    recs = tuple(sorted(records, key=lambda r: r.key()))
    table = StationTable(recs)
    if split is None:
        split = split_dataset(recs, config.split_fractions, config.seed)
    schema = schema_from_config(config, scalers)
    features = build_feature_table(recs, table, scalers, schema)
    return PreparedData(records=recs, table=table, split=split,
                        features=features)


def sample_query_batch(pool: np.ndarray, batch_size: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Uniform draw without replacement from the query pool."""
    pool = np.asarray(pool)
    if batch_size > pool.size:
        raise DataError(
            f"batch size {batch_size} exceeds pool size {pool.size}"
        )
    return rng.choice(pool, size=batch_size, replace=False)


def _gumbel_top_k(log_weights: np.ndarray, k: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Indices of k draws without replacement, weighted by exp(log_weights).

    Perturbing log weights with Gumbel noise and taking the top k is
    distributionally identical to sequential weighted draws without
    replacement, and vectorizes.
    """
    if k >= log_weights.size:
        return np.arange(log_weights.size)
    u = rng.random(log_weights.size)
    keys = log_weights - np.log(-np.log(u))
    return np.argpartition(-keys, k - 1)[:k]


def sample_nearby_sensors(
    query_index: int,
    features: FeatureTable,
    candidate_indices: np.ndarray,
    n: int,
    sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Subset of candidate rows near the query, target excluded.

    Distances are Euclidean in the normalized spherical encoding, the
    same space sigma is expressed in. Fewer than n candidates fall back
    to all of them; the loss weighting absorbs the size difference.
    """
    cand = np.asarray(candidate_indices)
    cand = cand[cand != query_index]
    if cand.size == 0:
        raise DataError(f"query row {query_index} has no candidate sensors")
    delta = features.coords3[cand] - features.coords3[query_index]
    d2 = np.einsum("ij,ij->i", delta, delta)
    # Shifting by the minimum rescales all weights equally, which leaves
    # selection probabilities unchanged but avoids exp underflow.
    log_w = -(d2 - d2.min()) / (2.0 * sigma * sigma)
    return cand[_gumbel_top_k(log_w, n, rng)]


class TrainBatch(NamedTuple):
    sensor_numeric: np.ndarray   # (B, N_max, width)
    sensor_class: np.ndarray     # (B, N_max) int64
    sensor_mask: np.ndarray      # (B, N_max) bool
    query_numeric: np.ndarray    # (B, q_width)
    query_class: np.ndarray      # (B,)
    targets: np.ndarray          # (B,) scaled
    subset_sizes: np.ndarray     # (B,)
    query_indices: np.ndarray    # (B,) rows into the feature table
    subset_indices: np.ndarray   # (B, N_max), -1 where padded


class BatchSampler:
    """Assembles batches from a feature table and a training index pool."""

    def __init__(self, features: FeatureTable, train_indices: Sequence[int],
                 config: RunConfig, excluded_sites: Sequence[str] = ()):
        self.features = features
        self.config = config
        self.train_indices = np.asarray(sorted(train_indices), dtype=np.int64)
        sites = np.array(features.site_ids)
        self.forbidden = np.isin(sites, np.array(sorted(excluded_sites)))
        if bool(self.forbidden[self.train_indices].any()):
            raise DataError("excluded sites present in the training pool")
        self.exclusion_checks = 0
        self._by_date: dict[int, np.ndarray] = {}
        dates = features.date[self.train_indices]
        for date in np.unique(dates):
            self._by_date[int(date)] = self.train_indices[dates == date]
        counts = {d: v.size for d, v in self._by_date.items()}
        self.query_pool = np.array(
            [i for i in self.train_indices
             if counts.get(int(features.date[i]), 0) >= 2],
            dtype=np.int64,
        )

    def candidates_on(self, date: int) -> np.ndarray:
        return self._by_date.get(int(date), np.empty(0, dtype=np.int64))

    def usable_queries(self, indices: Sequence[int]) -> np.ndarray:
        """Rows (not necessarily training rows) with >= 1 candidate sensor."""
        out = []
        for i in indices:
            cand = self.candidates_on(int(self.features.date[i]))
            if cand.size - int(i in cand) >= 1:
                out.append(i)
        return np.array(out, dtype=np.int64)

    def assemble(self, query_indices: np.ndarray,
                 rng: np.random.Generator) -> TrainBatch:
        f = self.features
        cfg = self.config
        subsets = []
        for q in query_indices:
            cand = self.candidates_on(int(f.date[q]))
            subsets.append(sample_nearby_sensors(
                int(q), f, cand, cfg.n_sensors, cfg.sampling_sigma, rng
            ))
        n_max = max(s.size for s in subsets)
        b = len(subsets)
        sensor_numeric = np.zeros((b, n_max, f.sensor_numeric.shape[1]))
        sensor_class = np.zeros((b, n_max), dtype=np.int64)
        sensor_mask = np.zeros((b, n_max), dtype=bool)
        subset_indices = np.full((b, n_max), -1, dtype=np.int64)
        for row, subset in enumerate(subsets):
            k = subset.size
            sensor_numeric[row, :k] = f.sensor_numeric[subset]
            sensor_class[row, :k] = f.class_index[subset]
            sensor_mask[row, :k] = True
            subset_indices[row, :k] = subset
        self._assert_not_forbidden(query_indices, subset_indices)
        return TrainBatch(
            sensor_numeric=sensor_numeric,
            sensor_class=sensor_class,
            sensor_mask=sensor_mask,
            query_numeric=f.query_numeric[query_indices],
            query_class=f.class_index[query_indices],
            targets=f.target_scaled[query_indices],
            subset_sizes=np.array([s.size for s in subsets], dtype=np.int64),
            query_indices=np.asarray(query_indices, dtype=np.int64),
            subset_indices=subset_indices,
        )

    def _assert_not_forbidden(self, query_indices: np.ndarray,
                              subset_indices: np.ndarray) -> None:
        used = subset_indices[subset_indices >= 0]
        if bool(self.forbidden[query_indices].any()) or \
                bool(self.forbidden[used].any()):
            raise TrainingError(
                "excluded-region record leaked into a training batch"
            )
        self.exclusion_checks += 1

    def make_batch(self, rng: np.random.Generator) -> TrainBatch:
        if self.query_pool.size == 0:
            raise DataError("no training query has candidate sensors")
        queries = sample_query_batch(self.query_pool,
                                     min(self.config.batch_size,
                                         self.query_pool.size),
                                     rng)
        return self.assemble(queries, rng)


def compute_loss(preds: torch.Tensor, targets: torch.Tensor,
                 subset_sizes: torch.Tensor) -> torch.Tensor:
    """Weighted squared error in log space.

    w_i is proportional to 1/n_i and normalized so the weights sum to
    the batch size; with equal subset sizes this reduces exactly to the
    unweighted mean.
    """
    if preds.shape != targets.shape or preds.shape != subset_sizes.shape:
        raise ValueError("preds, targets, subset_sizes must share a shape")
    if bool(torch.isnan(preds).any()):
        raise TrainingError("NaN in predictions; training halted")
    raw = 1.0 / subset_sizes.to(preds.dtype)
    weights = raw * (preds.shape[0] / raw.sum())
    return (weights * (preds - targets) ** 2).mean()


def batch_loss(model: FieldInterpolator, batch: TrainBatch) -> torch.Tensor:
    preds = model(
        torch.as_tensor(batch.sensor_numeric, dtype=DTYPE),
        torch.as_tensor(batch.sensor_class, dtype=torch.long),
        torch.as_tensor(batch.query_numeric, dtype=DTYPE),
        torch.as_tensor(batch.query_class, dtype=torch.long),
        torch.as_tensor(batch.sensor_mask, dtype=torch.bool),
    )
    return compute_loss(
        preds,
        torch.as_tensor(batch.targets, dtype=DTYPE),
        torch.as_tensor(batch.subset_sizes, dtype=DTYPE),
    )


class EpochStats(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass
class TrainState:
    """Outcome of a run: model holds the best-validation weights."""

    model: FieldInterpolator
    config: RunConfig
    epochs_run: int
    history: list[EpochStats]
    best_val: float
    best_epoch: int
    diverged: bool = False
    exclusion_checks: int = 0


def _snapshot(model: FieldInterpolator) -> dict[str, np.ndarray]:
    return {name: tensor.detach().numpy().copy()
            for name, tensor in model.state_dict().items()}


def _restore(model: FieldInterpolator, weights: dict) -> None:
    model.load_state_dict({name: torch.as_tensor(arr, dtype=DTYPE)
                           for name, arr in weights.items()})


def make_optimizer(model: FieldInterpolator,
                   config: RunConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate)


def _optimizer_payload(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    state = {}
    for idx, entry in sd["state"].items():
        out = {}
        for key, value in entry.items():
            if torch.is_tensor(value):
                if value.ndim == 0:
                    out[key] = float(value.item())
                else:
                    out[key] = value.detach().numpy().astype(np.float64)
            else:
                out[key] = float(value)
        state[str(idx)] = out
    return {"state": state}


def _restore_optimizer(opt: torch.optim.Optimizer, payload: dict) -> None:
    sd = opt.state_dict()
    restored = {}
    for idx_text, entry in payload["state"].items():
        out = {}
        for key, value in entry.items():
            if key == "step":
                out[key] = torch.tensor(float(value), dtype=torch.float32)
            elif isinstance(value, np.ndarray):
                out[key] = torch.as_tensor(value, dtype=DTYPE)
            else:
                out[key] = torch.tensor(float(value), dtype=DTYPE)
        restored[int(idx_text)] = out
    opt.load_state_dict({"state": restored,
                         "param_groups": sd["param_groups"]})


def save_checkpoint(path, model: FieldInterpolator,
                    opt: torch.optim.Optimizer, config: RunConfig,
                    epoch: int, history: Sequence[EpochStats],
                    best_val: float, best_epoch: int,
                    best_weights: dict) -> None:
    payload = {
        "schema": model.schema.to_dict(),
        "config_text": config_to_text(config),
        "epoch": epoch,
        "weights": _snapshot(model),
        "optimizer": _optimizer_payload(opt),
        "history": [list(h) for h in history],
        "best_val": best_val,
        "best_epoch": best_epoch,
        "best_weights": dict(best_weights),
    }
    save_artifact(path, CHECKPOINT_ARTIFACT_KIND, payload,
                  config_hash(config), config.seed)


def load_checkpoint(path) -> dict:
    doc = load_artifact(path, expected_kind=CHECKPOINT_ARTIFACT_KIND)
    payload = doc["payload"]
    payload["schema"] = FeatureSchema.from_dict(payload["schema"])
    payload["config"] = config_from_text(payload["config_text"])
    payload["history"] = [
        EpochStats(int(e), float(t), float(v), float(w))
        for e, t, v, w in payload["history"]
    ]
    return payload


def evaluate_split_loss(model: FieldInterpolator, sampler: BatchSampler,
                        indices: Sequence[int], seed: int) -> float:
    """Mean weighted loss over a split with a fixed subset stream.

    The rng depends only on the seed, so validation losses are
    comparable across epochs (identical queries and subsets).
    """
    usable = sampler.usable_queries(indices)
    if usable.size == 0:
        return float("nan")
    rng = derive_rng(seed, "val-subsets")
    chunk = sampler.config.batch_size
    total = 0.0
    with torch.no_grad():
        for start in range(0, usable.size, chunk):
            rows = usable[start:start + chunk]
            batch = sampler.assemble(rows, rng)
            total += float(batch_loss(model, batch)) * rows.size
    return total / usable.size


def train(
    config: RunConfig,
    data: PreparedData,
    scalers: ScalerSet,
    checkpoint_path=None,
    resume_path=None,
    excluded_sites: Sequence[str] = (),
    log_path=None,
) -> TrainState:
    """Run the epoch loop and return the best-validation snapshot.

    Divergence (non-finite loss) aborts the loop and restores the last
    good weights instead of raising. Resuming from a checkpoint at an
    epoch boundary reproduces the uninterrupted run exactly.
    """
    sampler = BatchSampler(data.features, data.split.train, config,
                           excluded_sites)
    model = FieldInterpolator(schema_from_config(config, scalers), config)
    opt = make_optimizer(model, config)

    start_epoch = 0
    history: list[EpochStats] = []
    best_val = math.inf
    best_epoch = -1
    best_weights = _snapshot(model)
    diverged = False

    if resume_path is not None:
        ckpt = load_checkpoint(resume_path)
        # n_epochs only decides where to stop, so a resumed run may raise
        # it; every parameter that shapes the trajectory must match.
        if config_hash(ckpt["config"].with_overrides(n_epochs=1)) != \
                config_hash(config.with_overrides(n_epochs=1)):
            raise DataError("checkpoint config does not match the run config")
        _restore(model, ckpt["weights"])
        _restore_optimizer(opt, ckpt["optimizer"])
        start_epoch = int(ckpt["epoch"]) + 1
        history = list(ckpt["history"])
        best_val = float(ckpt["best_val"])
        best_epoch = int(ckpt["best_epoch"])
        best_weights = ckpt["best_weights"]

    for epoch in range(start_epoch, config.n_epochs):
        t0 = time.perf_counter()
        losses = []
        for k in range(config.n_batches):
            rng = derive_rng(config.seed, "batch", epoch, k)
            batch = sampler.make_batch(rng)
            try:
                loss = batch_loss(model, batch)
            except TrainingError:
                diverged = True
                break
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss_value)
        if diverged:
            break
        val_loss = evaluate_split_loss(model, sampler, data.split.val,
                                       config.seed)
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_loss=val_loss,
            wall_seconds=time.perf_counter() - t0,
        )
        history.append(stats)
        improved = math.isnan(val_loss) or val_loss < best_val
        if improved:
            best_val = val_loss if not math.isnan(val_loss) else best_val
            best_epoch = epoch
            best_weights = _snapshot(model)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, opt, config, epoch,
                            history, best_val, best_epoch, best_weights)
        if log_path is not None:
            _write_log(log_path, history)
        if epoch - best_epoch >= config.patience:
            break

    _restore(model, best_weights)
    return TrainState(
        model=model,
        config=config,
        epochs_run=len(history),
        history=history,
        best_val=best_val,
        best_epoch=best_epoch,
        diverged=diverged,
        exclusion_checks=sampler.exclusion_checks,
    )


def _write_log(path, history: Sequence[EpochStats]) -> None:
    lines = ["epoch,train_loss,val_loss,wall_seconds"]
    lines += [f"{h.epoch},{h.train_loss!r},{h.val_loss!r},{h.wall_seconds!r}"
              for h in history]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def gradient_check(model: FieldInterpolator, batch: TrainBatch,
                   n_weights: int = 120, step: float = 1e-5,
                   seed: int = 0) -> dict:
    """Analytic vs central finite-difference gradients on random weights.

    Relative error uses max(1, |analytic|, |numeric|) as the scale so
    near-zero gradients are judged absolutely.
    """
    model.zero_grad()
    loss = batch_loss(model, batch)
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = derive_rng(seed, "gradient-check")
    picks = rng.choice(total, size=min(n_weights, total), replace=False)

    errors = []
    with torch.no_grad():
        for flat_index in sorted(int(p) for p in picks):
            which = int(np.searchsorted(offsets, flat_index, side="right") - 1)
            inner = flat_index - int(offsets[which])
            param = params[which]
            flat = param.view(-1)
            original = float(flat[inner])
            analytic = float(param.grad.view(-1)[inner])
            flat[inner] = original + step
            loss_plus = float(batch_loss(model, batch))
            flat[inner] = original - step
            loss_minus = float(batch_loss(model, batch))
            flat[inner] = original
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            scale = max(1.0, abs(analytic), abs(numeric))
            errors.append(abs(analytic - numeric) / scale)
    return {
        "n_checked": len(errors),
        "max_rel_err": float(np.max(errors)),
        "mean_rel_err": float(np.mean(errors)),
    }
