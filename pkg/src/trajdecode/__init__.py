"""Decoding 3D reach velocity from EEG.

Modules: ``core`` (data model, labels), ``synth`` (synthetic sessions),
``ersp`` (time-frequency features), ``nn`` (CNN-LSTM in NumPy), ``asha``
(hyperparameter search), ``evaluation`` (FDG/SAT/WSR), ``connectivity``
(EIC and topography), ``stats``, ``sessionio``, ``config`` and ``cli``.
"""
from .core import (AXES, CANONICAL_BANDS, EegStream, FrequencyBand, KinematicStream, Montage,
                   SessionDataset, TrialEvent, band_by_name, builtin_montage,
                   differentiate_velocity, substream, trial_labels)
from .errors import (AlignmentError, ConfigError, DecodeError, InsufficientData,
                     InsufficientHistory, InvalidBand, InvalidBaseline, InvalidTimestamps,
                     MissingData, OutOfBounds, ShapeError, StateError, UndefinedCorrelation)
from .stats import PairedStats, paired_compare, pearson_r

__version__ = "0.1.0"

__all__ = [
    "AXES", "AlignmentError", "CANONICAL_BANDS", "ConfigError", "DecodeError", "EegStream",
    "FrequencyBand", "InsufficientData", "InsufficientHistory", "InvalidBand", "InvalidBaseline",
    "InvalidTimestamps", "KinematicStream", "MissingData", "Montage", "OutOfBounds",
    "PairedStats", "SessionDataset", "ShapeError", "StateError", "TrialEvent",
    "UndefinedCorrelation", "band_by_name", "builtin_montage", "differentiate_velocity",
    "paired_compare", "pearson_r", "substream", "trial_labels",
]
