"""Instrumental-variable estimation of causal effects for categorical and
continuous treatments, with structural-model simulators and exact oracles."""

from .dataset import ContinuousDataset, DatasetSchema, DiscreteDataset, MixedDataset, load_csv, save_csv
from .errors import (DatasetError, EmptyGroupError, InsufficientDataError, IVError, IVWarning, ModelError,
                     RegimeMismatchError, UnderidentifiedError, WeakInstrumentError)

__all__ = [
    "ContinuousDataset", "DatasetSchema", "DiscreteDataset", "MixedDataset", "load_csv", "save_csv",
    "DatasetError", "EmptyGroupError", "InsufficientDataError", "IVError", "IVWarning", "ModelError",
    "RegimeMismatchError", "UnderidentifiedError", "WeakInstrumentError",
]
