from . import checkpoint
from .config import ConfigError, RunConfig, load_config, parse_text
from .files import OverwriteError, RunDir, decode_pnm, encode_pnm
from .runs import (
    Method,
    TrainingDiverged,
    evaluate,
    finetune,
    gen_data,
    multi_depth,
    optimize,
    run_depth_search,
    run_pipeline,
    train,
    ts_search,
)

__all__ = [
    "ConfigError",
    "Method",
    "OverwriteError",
    "RunConfig",
    "RunDir",
    "TrainingDiverged",
    "checkpoint",
    "decode_pnm",
    "encode_pnm",
    "evaluate",
    "finetune",
    "gen_data",
    "load_config",
    "multi_depth",
    "optimize",
    "parse_text",
    "run_depth_search",
    "run_pipeline",
    "train",
    "ts_search",
]
