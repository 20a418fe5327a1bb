"""Hubness-aware and triplet objectives for cross-modal embedding alignment."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("hubvse")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.0.0"

from .embed import EncoderPair, backward, cosine_similarity_matrix, encode, l2_normalize_rows
from .losses import (HalLossConfig, LossResult, TripletLossConfig, hal_loss, max_margin,
                     nca_loss, sum_margin)
from .memory_bank import GlobalWeightConfig, MemoryBank, global_weights, knn, sample_bank
from .evaluation import hubness_report, rank_ground_truth, retrieval_report, rsum
from .data_io import FeatureDataset, SyntheticSpec, generate_synthetic, read_features, write_features
from .trainer import TrainConfig, lr_schedule, step, train
