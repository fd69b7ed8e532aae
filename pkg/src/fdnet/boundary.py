"""Boundary-aware cross entropy with dilation bands, and the deep-supervision sum.

Pixels are split into K bands by their Chebyshev distance to the label
boundary: band j holds the pixels within radius ``kernels[j-1]`` but not within
``kernels[j-2]``; band K is everything else. Each band has its own balancing
weight, and a confidence-dependent attention weight multiplies every pixel's
log-likelihood term.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .autodiff import ShapeError, Tensor, exp, log, mul, power, sum_all, take_channels
from .layers import softmax_channels
from .network import ConfigError

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12
WEIGHT_MODES = ("poly", "exp")


@dataclass
class LossConfig:
    alpha: List[float] = field(default_factory=lambda: [1.0])
    kernels: List[int] = field(default_factory=list)
    mode: str = "poly"
    lam: float = 0.0

    def validate(self) -> "LossConfig":
        if len(self.alpha) != len(self.kernels) + 1:
            raise ConfigError("loss.alpha", f"need len(kernels)+1 = {len(self.kernels) + 1} weights")
        if min(self.alpha) <= 0:
            raise ConfigError("loss.alpha", "weights must be positive")
        if any(k < 1 for k in self.kernels) or any(b <= a for a, b in zip(self.kernels, self.kernels[1:])):
            raise ConfigError("loss.kernels", "must be positive and strictly increasing")
        if self.mode not in WEIGHT_MODES:
            raise ConfigError("loss.mode", f"must be one of {WEIGHT_MODES}")
        if self.lam < 0:
            raise ConfigError("loss.lam", "must be >= 0")
        return self

    @property
    def num_bands(self) -> int:
        return len(self.alpha)

    @property
    def is_plain_ce(self) -> bool:
        return self.lam == 0 and all(a == 1 for a in self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"loss.{unknown[0]}", "unknown key")
        return cls(**data).validate()


def cross_entropy_config() -> LossConfig:
    return LossConfig()


@dataclass
class BandMap:
    """Band index per pixel (1..K); 0 marks ignored pixels."""

    bands: np.ndarray
    kernels: List[int]
    ignore: np.ndarray

    @property
    def num_bands(self) -> int:
        return len(self.kernels) + 1

    def counts(self) -> List[int]:
        return [int((self.bands == j).sum()) for j in range(1, self.num_bands + 1)]


def extract_boundary(labels: np.ndarray, ignore_label: Optional[int] = 255) -> np.ndarray:
    """Pixels with a 4-neighbour of a different (non-ignored) label."""
    labels = np.asarray(labels)
    valid = np.ones(labels.shape, bool) if ignore_label is None else labels != ignore_label
    mask = np.zeros(labels.shape, bool)
    # vertical neighbours
    diff = (labels[1:] != labels[:-1]) & valid[1:] & valid[:-1]
    mask[1:] |= diff
    mask[:-1] |= diff
    diff = (labels[:, 1:] != labels[:, :-1]) & valid[:, 1:] & valid[:, :-1]
    mask[:, 1:] |= diff
    mask[:, :-1] |= diff
    return mask


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """Binary dilation by a (2k+1)×(2k+1) square."""
    if k < 1:
        raise ValueError(f"dilation radius must be >= 1, got {k}")
    mask = np.asarray(mask, bool)
    if not mask.any():
        return np.zeros_like(mask)
    return ndimage.binary_dilation(mask, structure=np.ones((2 * k + 1, 2 * k + 1), bool))


def band_partition(labels: np.ndarray, kernels: Sequence[int], ignore_label: Optional[int] = 255) -> BandMap:
    labels = np.asarray(labels)
    kernels = list(kernels)
    ignore = np.zeros(labels.shape, bool) if ignore_label is None else labels == ignore_label
    boundary = extract_boundary(labels, ignore_label)
    bands = np.full(labels.shape, len(kernels) + 1, dtype=np.int64)
    # widest first so narrower bands overwrite
    for j in range(len(kernels), 0, -1):
        bands[dilate(boundary, kernels[j - 1])] = j
    bands[ignore] = 0
    return BandMap(bands, kernels, ignore)


def band_partition_batch(labels: np.ndarray, kernels: Sequence[int], ignore_label: Optional[int] = 255) -> np.ndarray:
    """N×H×W band indices for a batch of label rasters."""
    return np.stack([band_partition(l, kernels, ignore_label).bands for l in labels])


def attention_weight(p, mode: str, lam: float):
    """Scalar/array form: ``(1-p)**lam`` (poly) or ``exp(-lam*(1-p))`` (exp)."""
    p = np.asarray(p, dtype=float)
    if lam == 0:
        return np.ones_like(p)
    if mode == "poly":
        return (1.0 - p) ** lam
    if mode == "exp":
        return np.exp(-lam * (1.0 - p))
    raise ValueError(f"unknown weight mode {mode!r}")


def _attention_weight_node(p: Tensor, mode: str, lam: float) -> Optional[Tensor]:
    if lam == 0:
        return None
    one_minus = 1.0 - p
    if mode == "poly":
        return power(one_minus, lam)
    return exp(mul(one_minus, -lam))


def boundary_aware_loss(
    probs: Tensor,
    gt: np.ndarray,
    bands: np.ndarray,
    config: LossConfig,
    ignore_label: Optional[int] = 255,
) -> Tensor:
    """Mean over non-ignored pixels of ``-alpha[band] * w(p_gt) * log p_gt``.

    Args:
        probs: N×C×H×W class probabilities.
        gt: N×H×W integer labels.
        bands: N×H×W band indices from :func:`band_partition` (0 = ignored).
        config: Band weights, kernels and attention mode.
    """
    gt = np.asarray(gt)
    bands = np.asarray(bands)
    if probs.ndim != 4 or gt.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ShapeError(f"boundary_aware_loss: labels {gt.shape} do not match probabilities {probs.shape}")
    if bands.shape != gt.shape:
        raise ShapeError(f"boundary_aware_loss: bands {bands.shape} do not match labels {gt.shape}")
    valid = bands > 0
    if ignore_label is not None:
        valid &= gt != ignore_label
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("boundary_aware_loss: every pixel is ignored")
    if bands.max() > config.num_bands:
        raise ValueError(f"band index {bands.max()} exceeds the {config.num_bands} configured bands")
    alpha = np.concatenate([[0.0], np.asarray(config.alpha, float)])
    weight = np.where(valid, alpha[bands], 0.0) / n_valid

    safe_gt = np.where(valid, gt, 0)
    p_gt = take_channels(probs, safe_gt)
    term = log(p_gt, eps=LOG_EPS)
    w = _attention_weight_node(p_gt, config.mode, config.lam)
    if w is not None:
        term = mul(term, w)
    return -sum_all(mul(term, weight))


def cross_entropy(probs: Tensor, gt: np.ndarray, ignore_label: Optional[int] = 255) -> Tensor:
    """Plain mean cross entropy over non-ignored pixels."""
    gt = np.asarray(gt)
    valid = np.ones(gt.shape, bool) if ignore_label is None else gt != ignore_label
    p_gt = take_channels(probs, np.where(valid, gt, 0))
    return -sum_all(mul(log(p_gt, eps=LOG_EPS), valid / valid.sum()))


def deep_supervision_loss(
    stage_logits: Sequence[Tensor],
    gt: np.ndarray,
    bands: np.ndarray,
    config: LossConfig,
    ignore_label: Optional[int] = 255,
) -> Tensor:
    """Unweighted sum of per-stage boundary-aware losses.

    ``stage_logits`` are the head outputs already upsampled to the label size;
    softmax is applied here.
    """
    total = None
    for i, logits in enumerate(stage_logits):
        if logits.shape[2:] != np.asarray(gt).shape[1:]:
            raise ShapeError(f"stage {i + 1}: head output {logits.shape[2:]} does not match labels {np.asarray(gt).shape[1:]}")
        term = boundary_aware_loss(softmax_channels(logits), gt, bands, config, ignore_label)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("deep_supervision_loss needs at least one stage")
    return total
