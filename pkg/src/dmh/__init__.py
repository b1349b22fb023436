"""Distributed multi-head (DMH) networks for power-consumption prediction.

Feature grouping by correlation, per-group head networks, a prediction
network, std-ratio loss balancing, and split client/server training with
byte-level transmission accounting.
"""
from .autodiff import Adam, Tape, Tensor, finite_difference_check
from .data import DatasetSchema, SyntheticSpec, Trial, generate_synthetic, load_trials, split_dataset
from .engine import (BaselineModel, DmhModel, TrainConfig, build_baseline, build_dmh, evaluate,
                     run_baseline, train)
from .features import GroupSpec, Normalizer, group_features, pack_windows, pearson_correlation
from .networks import build_head, build_prediction_network, count_parameters
from .split import SplitClient, SplitServer, run_split_training, transmission_ratio

__version__ = "0.1.0"
