"""Low-correlation environment partitioning and invariant learning on tabular data."""
from .decorr import DecorrConfig, decorr_partition, optimize_weights
from .baselines import EiilConfig, eiil_partition, kmeans_partition, random_partition
from .models import ModelParams, TrainConfig, fit_erm, fit_irmv1, fit_vrex, irmv1_penalty, predict
from .numerics import decorr_loss_and_grad, frobenius_dist_sq, weighted_correlation, weighted_mean
from .partition import Partition

__all__ = [
    "DecorrConfig", "decorr_partition", "optimize_weights",
    "EiilConfig", "eiil_partition", "kmeans_partition", "random_partition",
    "ModelParams", "TrainConfig", "fit_erm", "fit_irmv1", "fit_vrex", "irmv1_penalty", "predict",
    "decorr_loss_and_grad", "frobenius_dist_sq", "weighted_correlation", "weighted_mean",
    "Partition",
]
