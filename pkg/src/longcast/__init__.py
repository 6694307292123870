"""Long-horizon time-series forecasting with ProbSparse self-attention, on a small numpy autodiff core."""

from .attention import AttentionSpec, full_attention, probsparse_attention
from .data import SeriesFrame, WindowSpec, load_csv, make_windows, synth_series
from .errors import (CheckpointError, ConfigError, ContractError, DataError, DimensionError, LongcastError,
                     NumericError, ResourceError)
from .model import Informer, InformerConfig, build, load, save
from .tensor import Tensor
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AttentionSpec", "CheckpointError", "ConfigError", "ContractError", "DataError", "DimensionError",
    "Informer", "InformerConfig", "LongcastError", "NumericError", "ResourceError", "SeriesFrame",
    "Tensor", "TrainConfig", "WindowSpec", "build", "evaluate", "full_attention", "load", "load_csv",
    "make_windows", "probsparse_attention", "save", "synth_series", "train",
]
