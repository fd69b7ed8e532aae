"""Fully dense encoder-decoder segmentation on a small numpy autodiff core."""

from .autodiff import Graph, Parameter, Tensor, backward, finite_diff_check, forward_eval
from .boundary import LossConfig, band_partition, boundary_aware_loss, deep_supervision_loss
from .network import FDNet, NetworkSpec, build_fdnet, connectivity_report, count_parameters, toy_spec
from .train import TrainConfig, compute_metrics, predict_multiscale, train

__version__ = "0.1.0"
