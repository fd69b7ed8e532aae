"""SGD with momentum under the poly schedule, the training loop, multi-scale
flip-averaged inference, and confusion-matrix metrics (global and trimap)."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Parameter, Tensor, backward, no_grad
from .boundary import LossConfig, band_partition_batch, deep_supervision_loss, dilate, extract_boundary
from .data import IGNORE_LABEL, Sample, pad_to_mean, random_crop_flip
from .layers import resize_bilinear, softmax_channels
from .network import ConfigError, FDNet, checkpoint_bytes

logger = logging.getLogger(__name__)

LOG_HEADER = ("iter", "lr", "loss", "eval_miou")


@dataclass
class TrainConfig:
    base_lr: float = 0.00025
    power: float = 0.9
    max_iter: int = 300
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 8
    crop: int = 64
    seed: int = 0
    checkpoint_interval: int = 0
    eval_interval: int = 0
    # decay conv/deconv kernels only; BN gamma/beta and biases are exempt
    decay_all: bool = False

    def validate(self) -> "TrainConfig":
        for name in ("base_lr", "power", "max_iter", "batch_size", "crop"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name}", "must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum", "must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", "must be >= 0")
        if self.checkpoint_interval < 0 or self.eval_interval < 0:
            raise ConfigError("train.checkpoint_interval", "intervals must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"train.{unknown[0]}", "unknown key")
        return cls(**data).validate()


def poly_lr(iteration: int, config: TrainConfig) -> float:
    if not 0 <= iteration <= config.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {config.max_iter}]")
    return config.base_lr * (1.0 - iteration / config.max_iter) ** config.power


@dataclass
class OptimizerState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0


def is_decayed(param: Parameter) -> bool:
    return param.ndim == 4


def sgd_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
    decay: Optional[Callable[[Parameter], bool]] = None,
) -> OptimizerState:
    """Classical momentum: ``v = m*v + (g + wd*theta)``; ``theta -= lr*v`` (in place)."""
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"{p.ident}: gradient shape {g.shape} != parameter shape {p.shape}")
        if weight_decay and (decay is None or decay(p)):
            g = g + weight_decay * p.data
        v = state.velocity.get(p.ident)
        if v is None:
            v = np.zeros(p.shape)
        v = momentum * v + g
        state.velocity[p.ident] = v
        p.data -= lr * v
    state.iteration += 1
    return state


class DivergenceError(RuntimeError):
    pass


def stack_batch(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


@dataclass
class TrainResult:
    log: List[Tuple[int, float, float, Optional[float]]]
    checkpoint: bytes

    def csv(self) -> str:
        return format_log(self.log)


def format_log(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    for it, lr, loss, miou in rows:
        writer.writerow([it, repr(lr), repr(loss), "" if miou is None else repr(miou)])
    return buf.getvalue()


def train(
    network: FDNet,
    dataset: Sequence[Sample],
    config: TrainConfig,
    loss_config: Optional[LossConfig] = None,
    means: Optional[Sequence[float]] = None,
    out_dir: Optional[str] = None,
    eval_set: Optional[Sequence[Sample]] = None,
    lr_fn: Optional[Callable[[int], float]] = None,
    ignore: int = IGNORE_LABEL,
) -> TrainResult:
    """Run ``config.max_iter`` SGD steps with deep supervision.

    Batches are drawn epoch by epoch from a seeded permutation, then cropped and
    flipped. Writes ``train_log.csv`` and ``model.fdn`` (plus interval
    checkpoints) when ``out_dir`` is given.
    """
    config.validate()
    if not dataset:
        raise ValueError("train: empty dataset")
    loss_config = (loss_config or LossConfig()).validate()
    labels_max = max(int(s.labels[s.labels != ignore].max(initial=0)) for s in dataset)
    if labels_max >= network.spec.num_classes:
        raise ValueError(f"dataset has label {labels_max} but network has {network.spec.num_classes} classes")
    rng = np.random.default_rng(config.seed)
    params = network.parameters()
    decay = None if config.decay_all else is_decayed
    state = OptimizerState()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    log = []
    order: List[int] = []
    network.train()
    for it in range(config.max_iter):
        batch = []
        for _ in range(config.batch_size):
            if not order:
                order = list(rng.permutation(len(dataset)))
            batch.append(random_crop_flip(dataset[order.pop(0)], config.crop, rng, means, ignore))
        images, labels = stack_batch(batch)
        bands = band_partition_batch(labels, loss_config.kernels, ignore)

        network.zero_grad()
        logits = network(Tensor(images))
        loss = deep_supervision_loss(logits, labels, bands, loss_config, ignore)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise DivergenceError(f"iteration {it}: loss is {loss_val}; lower the learning rate")
        backward(loss)
        lr = poly_lr(it, config) if lr_fn is None else lr_fn(it)
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in params]
        sgd_step(params, grads, state, lr, config.momentum, config.weight_decay, decay)

        miou = None
        if eval_set and config.eval_interval and (it + 1) % config.eval_interval == 0:
            miou = evaluate(network, eval_set, ignore=ignore).miou
            network.train()
        log.append((it, lr, loss_val, miou))
        if out_dir and config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
            with open(os.path.join(out_dir, f"ckpt_{it + 1:06d}.fdn"), "wb") as fh:
                fh.write(checkpoint_bytes(network))

    network.eval()
    ckpt = checkpoint_bytes(network)
    result = TrainResult(log, ckpt)
    if out_dir:
        with open(os.path.join(out_dir, "model.fdn"), "wb") as fh:
            fh.write(ckpt)
        with open(os.path.join(out_dir, "train_log.csv"), "w") as fh:
            fh.write(result.csv())
    return result


# ---------------------------------------------------------------------------
# inference


def forward_probs(network: FDNet, images: np.ndarray) -> np.ndarray:
    """Final-stage class probabilities for an N×3×H×W batch (no graph recorded)."""
    with no_grad():
        return softmax_channels(network(Tensor(images))[-1]).data


def predict_multiscale(
    network: FDNet,
    image: np.ndarray,
    scales: Sequence[float] = (1.0,),
    flip: bool = False,
    means: Optional[Sequence[float]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Average class probabilities over rescaled (and mirrored) passes.

    Each pass resizes the 3×H×W image, mean-pads it to a multiple of the
    network stride, runs the network, crops and resizes the probabilities back
    to H×W. Returns ``(labels H×W, probs C×H×W)``.
    """
    if not scales:
        raise ValueError("predict_multiscale: need at least one scale")
    network.eval()
    _, h, w = image.shape
    stride = network.spec.stride
    means = image.mean(axis=(1, 2)) if means is None else np.asarray(means, float)
    total = None
    passes = 0
    for s in scales:
        sh, sw = int(round(h * s)), int(round(w * s))
        if min(sh, sw) < stride:
            logger.warning("scale %.2f gives %dx%d, below the network minimum %d; skipped", s, sh, sw, stride)
            continue
        scaled = image if (sh, sw) == (h, w) else resize_bilinear(image, sh, sw)
        ph, pw = -(-sh // stride) * stride, -(-sw // stride) * stride
        padded = pad_to_mean(scaled, ph, pw, means)
        batch = [padded, padded[:, :, ::-1]] if flip else [padded]
        probs = forward_probs(network, np.ascontiguousarray(np.stack(batch)))
        for k, p in enumerate(probs):
            if k == 1:
                p = p[:, :, ::-1]
            p = p[:, :sh, :sw]
            if (sh, sw) != (h, w):
                p = resize_bilinear(p, h, w)
            total = p.copy() if total is None else total + p
            passes += 1
    if total is None:
        raise ValueError("predict_multiscale: every scale was skipped")
    probs = total / passes
    return probs.argmax(axis=0), probs


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    pixel_acc: float
    mean_acc: float
    iou: List[Optional[float]]
    miou: float
    trimap: Dict[int, Optional[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pixel_acc": self.pixel_acc,
            "mean_acc": self.mean_acc,
            "iou": self.iou,
            "miou": self.miou,
            "trimap": {str(k): v for k, v in self.trimap.items()},
        }


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: Optional[int] = IGNORE_LABEL, mask=None) -> np.ndarray:
    """Rows = ground truth, columns = prediction."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = (gt >= 0) & (gt < num_classes)
    if ignore is not None:
        valid &= gt != ignore
    if mask is not None:
        valid &= mask
    idx = num_classes * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    tp = np.diag(cm).astype(float)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    union = gt_count + pred_count - tp
    total = cm.sum()
    present = gt_count > 0
    seen = union > 0
    iou = [float(tp[c] / union[c]) if seen[c] else None for c in range(len(tp))]
    return MetricsReport(
        pixel_acc=float(tp.sum() / total) if total else float("nan"),
        mean_acc=float(np.mean(tp[present] / gt_count[present])) if present.any() else float("nan"),
        iou=iou,
        miou=float(np.mean(tp[seen] / union[seen])) if seen.any() else float("nan"),
    )


def compute_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: Optional[int] = IGNORE_LABEL) -> MetricsReport:
    return metrics_from_confusion(confusion_matrix(pred, gt, num_classes, ignore))


def trimap_mask(gt: np.ndarray, band_width: int, ignore: Optional[int] = IGNORE_LABEL) -> np.ndarray:
    """Pixels within ``band_width`` of the ground-truth boundary (H×W or N×H×W)."""
    gt = np.asarray(gt)
    if gt.ndim == 2:
        return dilate(extract_boundary(gt, ignore), band_width)
    return np.stack([dilate(extract_boundary(g, ignore), band_width) for g in gt])


def trimap_miou(
    pred: np.ndarray, gt: np.ndarray, band_width: int, num_classes: int, ignore: Optional[int] = IGNORE_LABEL
) -> Optional[float]:
    """mIoU restricted to the boundary band; ``None`` when the band is empty."""
    if band_width < 1:
        raise ValueError(f"band width must be >= 1, got {band_width}")
    mask = trimap_mask(gt, band_width, ignore)
    cm = confusion_matrix(pred, gt, num_classes, ignore, mask)
    if cm.sum() == 0:
        return None
    return metrics_from_confusion(cm).miou


def predict_dataset(
    network: FDNet,
    samples: Sequence[Sample],
    scales: Sequence[float] = (1.0,),
    flip: bool = False,
    means: Optional[Sequence[float]] = None,
    batch_size: int = 16,
) -> np.ndarray:
    """N×H×W label maps. Single-scale, no-flip requests are batched."""
    if tuple(scales) == (1.0,) and not flip and all(s.image.shape == samples[0].image.shape for s in samples):
        stride = network.spec.stride
        h, w = samples[0].labels.shape
        if h % stride == 0 and w % stride == 0:
            network.eval()
            out = []
            for i in range(0, len(samples), batch_size):
                imgs = np.stack([s.image for s in samples[i : i + batch_size]])
                out.append(forward_probs(network, imgs).argmax(axis=1))
            return np.concatenate(out)
    return np.stack([predict_multiscale(network, s.image, scales, flip, means)[0] for s in samples])


def evaluate(
    network: FDNet,
    samples: Sequence[Sample],
    scales: Sequence[float] = (1.0,),
    flip: bool = False,
    trimap_widths: Sequence[int] = (),
    means: Optional[Sequence[float]] = None,
    ignore: int = IGNORE_LABEL,
) -> MetricsReport:
    preds = predict_dataset(network, samples, scales, flip, means)
    gt = np.stack([s.labels for s in samples])
    report = compute_metrics(preds, gt, network.spec.num_classes, ignore)
    report.trimap = {w: trimap_miou(preds, gt, w, network.spec.num_classes, ignore) for w in trimap_widths}
    return report
