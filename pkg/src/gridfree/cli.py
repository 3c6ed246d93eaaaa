"""Command-line surface: synth, preprocess, train, predict, uq, evaluate, loso.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime
failure (including training divergence). Every command honors --seed
and --config; artifacts embed the config hash and seed so downstream
commands can refuse mismatched inputs. GRIDFREE_THREADS caps torch's
thread pool (default 1, which also makes runs bit-reproducible).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .core import (
    ConfigError,
    DataError,
    DatasetSplit,
    GridfreeError,
    RunConfig,
    config_hash,
    load_config,
    parse_iso_date,
    save_config,
)
from .evaluation import (
    RegionMask,
    loso_split,
    metrics,
    parity_export,
    predict_split,
    seasonal_report,
    seasonal_table_text,
    summary_json,
)
from .geo import haversine_km_array
from .model import QueryPoint, load_model, save_model
from .pipeline import (
    fit_default_scalers,
    ingest_covariate_grid,
    ingest_stations,
    split_dataset,
    write_stations,
)
from .scalers import ScalerSet
from .synthetic import SITE_LAYOUTS, generate_synthetic, make_field_spec
from .training import BatchSampler, prepare_data, train
from .uncertainty import SubsetPolicy, mc_predict_points, uq_table_text

STATIONS_FILE = "stations.csv"
FIELD_SPEC_FILE = "field_spec.json"
RECORDS_FILE = "records.csv"
SCALERS_FILE = "scalers.json"
SPLIT_FILE = "split.json"
CONFIG_FILE = "config.txt"
MODEL_FILE = "model.json"
CHECKPOINT_FILE = "checkpoint.json"
TRAINING_LOG_FILE = "training_log.csv"
GRID_HEX_FILE = "grid_hex.json"


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit 2; the contract wants 1."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="gridfree",
        description="Grid-free attention-based PM2.5 interpolation "
                    "with Monte Carlo uncertainty.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="path to a key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("synth",
                       help="generate a synthetic station dataset + oracle")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sites", type=int, default=100)
    p.add_argument("--days", type=int, default=120)
    p.add_argument("--sources", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.5,
                   help="additive noise standard deviation, ug/m3")
    p.add_argument("--layout", choices=SITE_LAYOUTS, default="uniform")
    p.add_argument("--start-date", default="2019-01-01")
    p.add_argument("--domain", default="38,42,-112,-108",
                   help="lat_min,lat_max,lon_min,lon_max")

    p = sub.add_parser("preprocess",
                       help="ingest, clean, fit scalers, split")
    common(p)
    p.add_argument("--in", dest="in_dir", required=True,
                   help="directory with stations.csv (or a CSV path)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid", help="optional covariate grid CSV to aggregate")

    p = sub.add_parser("train", help="train the interpolation model")
    common(p)
    p.add_argument("--data", required=True, help="preprocess output directory")
    p.add_argument("--out", required=True, help="model output directory")
    p.add_argument("--resume", help="checkpoint file to resume from")

    p = sub.add_parser("predict", help="predict at query points")
    common(p)
    p.add_argument("--model", required=True, help="model directory or file")
    p.add_argument("--data", required=True,
                   help="preprocess output directory providing sensors")
    p.add_argument("--query", action="append", default=[],
                   metavar="LAT,LON,DATE", help="repeatable query point")
    p.add_argument("--query-file", help="CSV of points: lat,lon,date")

    p = sub.add_parser("uq", help="Monte Carlo uncertainty at query points")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--query", action="append", default=[],
                   metavar="LAT,LON,DATE")
    p.add_argument("--query-file")
    p.add_argument("--m", type=int, help="Monte Carlo members (>= 2)")

    p = sub.add_parser("evaluate", help="metric reports on a split")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"),
                   default="test")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--range", dest="range_filter", metavar="LO,HI",
                   help="extra report restricted to targets in [LO, HI]")
    p.add_argument("--m", type=int, help="Monte Carlo members (>= 2)")

    p = sub.add_parser("loso",
                       help="leave-one-region-out train/evaluate run")
    common(p)
    p.add_argument("--in", dest="in_dir", required=True,
                   help="directory with stations.csv (or a CSV path)")
    p.add_argument("--out", required=True)
    p.add_argument("--region", required=True,
                   help="bbox:NAME:lat0,lat1,lon0,lon1 or sites:NAME:a;b")
    return parser


def _resolve_config(args, fallback_path=None) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif fallback_path is not None and Path(fallback_path).exists():
        cfg = load_config(fallback_path)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _stations_path(in_dir: str) -> Path:
    path = Path(in_dir)
    if path.is_dir():
        return path / STATIONS_FILE
    return path


def _model_path(model_arg: str) -> Path:
    path = Path(model_arg)
    if path.is_dir():
        return path / MODEL_FILE
    return path


def _write_text(path, text: str) -> None:
    from .artifacts import atomic_write_bytes
    atomic_write_bytes(path, text.encode("utf-8"))


def _cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    try:
        domain = tuple(float(v) for v in args.domain.split(","))
        if len(domain) != 4:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--domain must be four numbers, got {args.domain!r}")
    spec = make_field_spec(
        n_sites=args.sites, n_days=args.days, n_sources=args.sources,
        noise_sd=args.noise, seed=cfg.seed, layout=args.layout,
        start_date=args.start_date, domain=domain,
    )
    records, _ = generate_synthetic(spec, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_stations(
        out / STATIONS_FILE, records,
        comments=[f"config_hash={config_hash(cfg)}", f"seed={cfg.seed}"],
    )
    _write_text(out / FIELD_SPEC_FILE, spec.to_json())
    save_config(cfg, out / CONFIG_FILE)
    print(f"wrote {len(records)} records to {out / STATIONS_FILE}")
    return 0


def _cmd_preprocess(args) -> int:
    in_path = _stations_path(args.in_dir)
    cfg = _resolve_config(args, Path(args.in_dir) / CONFIG_FILE
                          if Path(args.in_dir).is_dir() else None)
    records, report = ingest_stations(in_path)
    scalers = fit_default_scalers(records, cfg.feature_set)
    split = split_dataset(records, cfg.split_fractions, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_stations(
        out / RECORDS_FILE, records,
        comments=[f"config_hash={config_hash(cfg)}", f"seed={cfg.seed}"],
    )
    scalers.save(out / SCALERS_FILE)
    _write_text(out / SPLIT_FILE, json.dumps(
        {
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "train": sorted(split.train),
            "val": sorted(split.val),
            "test": sorted(split.test),
        },
        sort_keys=True, indent=1,
    ) + "\n")
    save_config(cfg, out / CONFIG_FILE)
    _write_text(out / "report.json", json.dumps(
        {
            "rows_read": report.rows_read,
            "records_out": report.records_out,
            "elevation_capped": report.elevation_capped,
            "dropped_below_detection": report.dropped_below_detection,
            "colocated_merged": report.colocated_merged,
        },
        sort_keys=True, indent=1,
    ) + "\n")
    if args.grid:
        grid = ingest_covariate_grid(args.grid)
        doc = {
            f"{cell},{date}": dict(sorted(variables.items()))
            for (cell, date), variables in sorted(grid.cells.items())
        }
        _write_text(out / GRID_HEX_FILE,
                    json.dumps(doc, sort_keys=True, indent=1) + "\n")
    print(f"preprocessed {report.records_out} records into {out}")
    return 0


def _load_prepared(data_dir: str, cfg: RunConfig):
    data_path = Path(data_dir)
    records, _ = ingest_stations(data_path / RECORDS_FILE)
    scalers = ScalerSet.load(data_path / SCALERS_FILE)
    with open(data_path / SPLIT_FILE, "r", encoding="utf-8") as fh:
        split_doc = json.load(fh)
    if split_doc["config_hash"] != config_hash(cfg):
        raise ConfigError(
            f"split in {data_path} was built for config hash "
            f"{split_doc['config_hash']}, current is {config_hash(cfg)}; "
            f"re-run preprocess"
        )
    split = DatasetSplit(
        train=tuple(split_doc["train"]),
        val=tuple(split_doc["val"]),
        test=tuple(split_doc["test"]),
    )
    return prepare_data(records, scalers, cfg, split=split), scalers


def _cmd_train(args) -> int:
    cfg = _resolve_config(args, Path(args.data) / CONFIG_FILE)
    data, scalers = _load_prepared(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = train(
        cfg, data, scalers,
        checkpoint_path=out / CHECKPOINT_FILE,
        resume_path=args.resume,
        log_path=out / TRAINING_LOG_FILE,
    )
    save_model(out / MODEL_FILE, state.model, cfg, scalers.content_hash())
    save_config(cfg, out / CONFIG_FILE)
    if state.diverged:
        raise GridfreeError(
            f"training diverged after {state.epochs_run} epochs; "
            f"best-validation weights (epoch {state.best_epoch}) saved"
        )
    print(
        f"trained {state.epochs_run} epochs; best val loss "
        f"{state.best_val:.6g} at epoch {state.best_epoch}; "
        f"model saved to {out / MODEL_FILE}"
    )
    return 0


def _load_model_context(args):
    """Shared predict/uq/evaluate loading with hash verification."""
    data_path = Path(args.data)
    scalers = ScalerSet.load(data_path / SCALERS_FILE)
    model, cfg = load_model(_model_path(args.model), scalers)
    from .artifacts import load_artifact
    doc = load_artifact(_model_path(args.model))
    if doc["payload"]["scalers_hash"] != scalers.content_hash():
        raise DataError(
            "model was trained with different scalers than the data "
            "directory provides"
        )
    if args.config:
        provided = load_config(args.config)
        if config_hash(provided) != config_hash(cfg):
            raise ConfigError(
                "--config does not match the config embedded in the model "
                f"artifact ({config_hash(provided)} vs {config_hash(cfg)})"
            )
    data_cfg = load_config(data_path / CONFIG_FILE)
    if config_hash(data_cfg) != config_hash(cfg):
        raise DataError(
            f"model/data config hash mismatch: model {config_hash(cfg)}, "
            f"data {config_hash(data_cfg)}"
        )
    data, scalers = _load_prepared(args.data, cfg)
    return model, cfg, data, scalers


def _parse_query_args(args) -> list[tuple[float, float, int]]:
    points = []
    for text in args.query:
        parts = text.split(",")
        if len(parts) != 3:
            raise ConfigError(
                f"--query must be LAT,LON,DATE, got {text!r}"
            )
        try:
            lat, lon = float(parts[0]), float(parts[1])
        except ValueError:
            raise ConfigError(
                f"--query must be LAT,LON,DATE, got {text!r}"
            )
        points.append((lat, lon, parse_iso_date(parts[2].strip())))
    if args.query_file:
        with open(args.query_file, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()
                     and not ln.lstrip().startswith("#")]
        if not lines or lines[0].replace(" ", "") != "lat,lon,date":
            raise DataError(
                f"{args.query_file}: expected header 'lat,lon,date'"
            )
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split(",")
            if len(parts) != 3:
                raise DataError(
                    f"{args.query_file}: line {lineno}: expected 3 fields"
                )
            try:
                lat, lon = float(parts[0]), float(parts[1])
            except ValueError:
                raise DataError(
                    f"{args.query_file}: line {lineno}: "
                    f"lat and lon must be numeric"
                )
            points.append((lat, lon, parse_iso_date(parts[2].strip())))
    if not points:
        raise ConfigError("no query points given (--query or --query-file)")
    return points


def _fill_query_covariates(data, points) -> list[QueryPoint]:
    """Query-side covariates come from the nearest site's record.

    Arbitrary coordinates have no observed land cover or meteorology;
    the nearest station (preferring one observed on the query date) is
    the sensor-data-only stand-in for an external covariate grid.
    """
    from .core import FULL_EXTRA_COVARIATES, FeatureSetKind

    table = data.table
    site_ids = table.site_ids()
    locations = np.array([table.site_location(s) for s in site_ids])
    out = []
    for lat, lon, date in points:
        dists = haversine_km_array(lat, lon, locations[:, 0],
                                   locations[:, 1])
        order = np.argsort(dists, kind="stable")
        chosen = None
        for k in order:
            rec = table.get(site_ids[int(k)], date)
            if rec is not None:
                chosen = rec
                break
        if chosen is None:
            site = site_ids[int(order[0])]
            dates, _ = table.site_series(site)
            nearest_day = int(dates[np.argmin(np.abs(dates - date))])
            chosen = table.get(site, nearest_day)
        extras = {name: getattr(chosen, name)
                  for name in FULL_EXTRA_COVARIATES}
        out.append(QueryPoint(lat=lat, lon=lon, date=date,
                              land_cover=chosen.land_cover, extras=extras))
    return out


def _full_sampler(data, cfg) -> BatchSampler:
    all_indices = tuple(range(len(data.features)))
    return BatchSampler(data.features, all_indices, cfg)


def _cmd_predict(args) -> int:
    model, cfg, data, scalers = _load_model_context(args)
    seed = args.seed if args.seed is not None else cfg.seed
    points = _fill_query_covariates(data, _parse_query_args(args))
    sampler = _full_sampler(data, cfg)
    rows = mc_predict_points(model, sampler, points, cfg, scalers,
                             seed=seed)
    from .core import days_to_date
    print("lat,lon,date,pm25")
    for r in rows:
        print(f"{r.lat:.9g},{r.lon:.9g},{days_to_date(r.date).isoformat()},"
              f"{r.mean:.9g}")
    return 0


def _cmd_uq(args) -> int:
    model, cfg, data, scalers = _load_model_context(args)
    seed = args.seed if args.seed is not None else cfg.seed
    m = args.m if args.m is not None else cfg.mc_samples
    if m < 2:
        raise ConfigError(f"--m must be >= 2, got {m}")
    points = _fill_query_covariates(data, _parse_query_args(args))
    sampler = _full_sampler(data, cfg)
    rows = mc_predict_points(model, sampler, points, cfg, scalers,
                             m=m, seed=seed)
    sys.stdout.write(uq_table_text(rows))
    return 0


def _cmd_evaluate(args) -> int:
    model, cfg, data, scalers = _load_model_context(args)
    seed = args.seed if args.seed is not None else cfg.seed
    m = args.m if args.m is not None else cfg.mc_samples
    if m < 2:
        raise ConfigError(f"--m must be >= 2, got {m}")
    indices = data.split.indices(args.split)
    if not indices:
        raise DataError(f"split {args.split!r} is empty")
    sampler = BatchSampler(data.features, data.split.train, cfg)
    preds, targets, meta, uq_rows = predict_split(
        model, data, sampler, scalers, cfg, indices, m=m, seed=seed,
    )
    report = metrics(preds, targets)
    reports = {args.split: {"all": report}}
    if args.range_filter:
        try:
            low, high = (float(v) for v in args.range_filter.split(","))
        except ValueError:
            raise ConfigError(
                f"--range must be LO,HI, got {args.range_filter!r}"
            )
        reports[args.split]["range"] = metrics(preds, targets, (low, high))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "summary.json", summary_json(reports))
    _write_text(out / "parity.csv", parity_export(preds, targets, meta))
    seasonal = seasonal_report(
        preds, targets,
        [d for d, _, _ in meta], [la for _, la, _ in meta],
        [lo for _, _, lo in meta],
    )
    _write_text(out / "seasonal.csv", seasonal_table_text(seasonal))
    _write_text(out / "uq.csv", uq_table_text(uq_rows))
    print(
        f"{args.split}: n={report.n} mae={report.mae:.6g} "
        f"mape={report.mape:.6g}% r2={report.r2:.6g}"
    )
    return 0


def _cmd_loso(args) -> int:
    cfg = _resolve_config(args, Path(args.in_dir) / CONFIG_FILE
                          if Path(args.in_dir).is_dir() else None)
    records, _ = ingest_stations(_stations_path(args.in_dir))
    region = RegionMask.parse(args.region)
    outside, inside = loso_split(records, region)
    if len(outside) < 10:
        raise DataError(
            f"only {len(outside)} records remain outside region "
            f"{region.region_id!r}; cannot train"
        )
    scalers = fit_default_scalers(outside, cfg.feature_set)
    # Land-cover vocabulary is a fixed taxonomy known independently of
    # any region, so it may include classes seen only inside.
    from .scalers import ScalerKind, fit_scaler
    scalers["land_cover"] = fit_scaler(
        ScalerKind.CATEGORICAL, [r.land_cover for r in records]
    )

    ordered = sorted(outside + inside, key=lambda r: r.key())
    inside_keys = {r.key() for r in inside}
    inside_idx = [i for i, r in enumerate(ordered) if r.key() in inside_keys]
    outside_idx = [i for i, r in enumerate(ordered)
                   if r.key() not in inside_keys]
    inner = split_dataset(outside, (0.9, 0.1, 0.0), cfg.seed)
    split = DatasetSplit(
        train=tuple(outside_idx[i] for i in inner.train),
        val=tuple(outside_idx[i] for i in inner.val),
        test=tuple(inside_idx),
    )
    data = prepare_data(ordered, scalers, cfg, split=split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    excluded_sites = sorted({r.site_id for r in inside})
    state = train(
        cfg, data, scalers,
        checkpoint_path=out / CHECKPOINT_FILE,
        log_path=out / TRAINING_LOG_FILE,
        excluded_sites=excluded_sites,
    )
    save_model(out / MODEL_FILE, state.model, cfg, scalers.content_hash())
    if state.diverged:
        raise GridfreeError("LOSO training diverged")
    sampler = BatchSampler(data.features, split.train, cfg,
                           excluded_sites=excluded_sites)
    preds, targets, meta, _ = predict_split(
        model=state.model, data=data, sampler=sampler, scalers=scalers,
        config=cfg, indices=split.test,
    )
    report = metrics(preds, targets)
    _write_text(out / "summary.json", summary_json({
        "region": region.region_id,
        "n_inside": len(inside),
        "n_outside": len(outside),
        "exclusion_checks": state.exclusion_checks,
        "inside": report,
    }))
    print(
        f"LOSO {region.region_id}: n={report.n} mae={report.mae:.6g} "
        f"r2={report.r2:.6g} (exclusion checks: {state.exclusion_checks})"
    )
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "uq": _cmd_uq,
    "evaluate": _cmd_evaluate,
    "loso": _cmd_loso,
}


def _configure_threads() -> None:
    import torch
    threads = os.environ.get("GRIDFREE_THREADS", "1")
    try:
        count = max(1, int(threads))
    except ValueError:
        raise ConfigError(
            f"GRIDFREE_THREADS must be an integer, got {threads!r}"
        )
    torch.set_num_threads(count)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise ConfigError("a command is required")
        _configure_threads()
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GridfreeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        # a missing input is bad data, not a runtime fault
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
