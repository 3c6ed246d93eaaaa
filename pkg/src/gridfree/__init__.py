"""Grid-free PM2.5 interpolation with attention and Monte Carlo UQ.

The package predicts ground-level PM2.5 at arbitrary coordinates from
nearby sensor observations using a cross-attention encoder over a
learned latent array, and quantifies uncertainty by re-predicting over
Monte Carlo draws of sensor subsets.
"""

from .core import (
    ConfigError,
    DataError,
    DatasetSplit,
    FeatureSetKind,
    GridfreeError,
    RunConfig,
    SensorRecord,
    TrainingError,
    config_hash,
    derive_rng,
    derive_seed,
    load_config,
    save_config,
    seeded_rng,
)
from .evaluation import MetricReport, RegionMask, loso_split, metrics, spearman
from .geo import encode_latlon, fourier_encode, haversine_km, hex_index
from .model import FieldInterpolator, QueryPoint, load_model, predict, save_model
from .pipeline import (
    LagVector,
    StationTable,
    build_lag_vector,
    idw2_interpolate,
    ingest_stations,
    split_dataset,
)
from .scalers import ScalerKind, ScalerParams, ScalerSet, apply_scaler, fit_scaler, invert_scaler
from .synthetic import SyntheticFieldSpec, field_value, generate_synthetic, make_field_spec
from .training import TrainState, gradient_check, train
from .uncertainty import PredictionWithUncertainty, SubsetPolicy, mc_predict

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DatasetSplit",
    "FeatureSetKind",
    "FieldInterpolator",
    "GridfreeError",
    "LagVector",
    "MetricReport",
    "PredictionWithUncertainty",
    "QueryPoint",
    "RegionMask",
    "RunConfig",
    "ScalerKind",
    "ScalerParams",
    "ScalerSet",
    "SensorRecord",
    "StationTable",
    "SubsetPolicy",
    "SyntheticFieldSpec",
    "TrainState",
    "TrainingError",
    "apply_scaler",
    "build_lag_vector",
    "config_hash",
    "derive_rng",
    "derive_seed",
    "encode_latlon",
    "field_value",
    "fit_scaler",
    "fourier_encode",
    "generate_synthetic",
    "gradient_check",
    "haversine_km",
    "hex_index",
    "idw2_interpolate",
    "ingest_stations",
    "invert_scaler",
    "load_config",
    "load_model",
    "loso_split",
    "make_field_spec",
    "mc_predict",
    "metrics",
    "predict",
    "save_config",
    "save_model",
    "seeded_rng",
    "spearman",
    "split_dataset",
    "train",
    "__version__",
]
