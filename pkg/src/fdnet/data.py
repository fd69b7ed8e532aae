"""Netpbm I/O, the synthetic shapes dataset, and crop/flip/pad augmentation."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .network import ConfigError

IGNORE_LABEL = 255
CLASS_NAMES = ("background", "disk", "rectangle", "triangle")


class NetpbmError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # 3×H×W in [0, 1]
    labels: np.ndarray  # H×W int
    ident: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"sample {self.ident}: image must be 3×H×W, got {self.image.shape}")
        if self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"sample {self.ident}: image {self.image.shape[1:]} vs labels {self.labels.shape}")


# ---------------------------------------------------------------------------
# netpbm


def _read_header(buf: bytes) -> Tuple[bytes, List[int], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise NetpbmError("malformed header: unexpected end of file")
        if buf[pos : pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"malformed header: unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise NetpbmError("malformed header: non-integer field") from None
    if width < 1 or height < 1:
        raise NetpbmError(f"malformed header: bad size {width}x{height}")
    # exactly one whitespace byte separates header and body
    return magic, [width, height, maxval], pos + 1


def read_netpbm(path: str) -> np.ndarray:
    """P6 -> 3×H×W float image in [0, 1]; P5 -> H×W int raster (raw values)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, (width, height, maxval), offset = _read_header(buf)
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval} (only 255)")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    body = np.frombuffer(buf, dtype=np.uint8, count=min(need, max(0, len(buf) - offset)), offset=min(offset, len(buf)))
    if body.size < need:
        raise NetpbmError(f"truncated body: expected {need} bytes, got {body.size}")
    if channels == 3:
        return body.reshape(height, width, 3).transpose(2, 0, 1) / 255.0
    return body.reshape(height, width).astype(np.int64)


def write_netpbm(raster: np.ndarray, path: str) -> None:
    """3×H×W float image in [0, 1] -> P6; H×W integer raster (0..255) -> P5."""
    raster = np.asarray(raster)
    if raster.ndim == 3:
        if raster.shape[0] != 3:
            raise ValueError(f"image must be 3×H×W, got {raster.shape}")
        body = np.clip(np.rint(raster * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        magic = b"P6"
    elif raster.ndim == 2:
        if raster.min() < 0 or raster.max() > 255:
            raise ValueError("label raster values must lie in 0..255")
        body = raster.astype(np.uint8)
        magic = b"P5"
    else:
        raise ValueError(f"cannot write raster of shape {raster.shape}")
    h, w = body.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(body).tobytes())


# ---------------------------------------------------------------------------
# synthetic shapes


@dataclass
class SyntheticSpec:
    seed: int = 0
    count: int = 64
    size: int = 64
    num_classes: int = 4
    shapes_per_image: Tuple[int, int] = (1, 3)
    size_range: Tuple[int, int] = (9, 20)
    color_jitter: float = 0.1
    noise: float = 0.02

    def validate(self) -> "SyntheticSpec":
        if self.size < 32:
            raise ConfigError("data.size", "canvas must be >= 32")
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError("data.num_classes", f"must be in 2..{len(CLASS_NAMES)}")
        if self.count < 1:
            raise ConfigError("data.count", "must be positive")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ConfigError("data.shapes_per_image", "need 1 <= min <= max")
        lo, hi = self.size_range
        if not 2 <= lo <= hi or hi * 2 > self.size:
            raise ConfigError("data.size_range", "need 2 <= min <= max <= size/2")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes_per_image"] = list(self.shapes_per_image)
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"data.{unknown[0]}", "unknown key")
        data = dict(data)
        for key in ("shapes_per_image", "size_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data).validate()


# base RGB per class; shapes get jittered copies
BASE_COLORS = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.80, 0.30, 0.30],
        [0.30, 0.70, 0.35],
        [0.30, 0.40, 0.85],
    ]
)


def disk_mask(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def rect_mask(h: int, w: int, y0: int, x0: int, y1: int, x1: int) -> np.ndarray:
    m = np.zeros((h, w), bool)
    m[max(0, y0) : max(0, y1), max(0, x0) : max(0, x1)] = True
    return m


def triangle_mask(h: int, w: int, pts: np.ndarray) -> np.ndarray:
    """Pixel centres inside (or on) the triangle with vertices ``pts`` (y, x)."""
    yy, xx = np.mgrid[0:h, 0:w]

    def edge(a, b):
        return (b[1] - a[1]) * (yy - a[0]) - (b[0] - a[0]) * (xx - a[1])

    e0, e1, e2 = edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def _shape_mask(cls: int, rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    n = spec.size
    lo, hi = spec.size_range
    r = rng.uniform(lo, hi)
    cy, cx = rng.uniform(r * 0.5, n - r * 0.5, size=2)
    if cls == 1:
        return disk_mask(n, n, cy, cx, r)
    if cls == 2:
        hh, hw = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        return rect_mask(n, n, int(round(cy - hh)), int(round(cx - hw)), int(round(cy + hh)), int(round(cx + hw)))
    angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, size=3)
    pts = np.stack([cy + 1.2 * r * np.sin(angles), cx + 1.2 * r * np.cos(angles)], axis=1)
    return triangle_mask(n, n, pts)


def sample_seed(seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def generate_sample(spec: SyntheticSpec, index: int) -> Sample:
    rng = np.random.default_rng(sample_seed(spec.seed, index))
    n = spec.size
    shape_classes = list(range(1, spec.num_classes))
    labels = np.zeros((n, n), dtype=np.int64)
    bg = np.clip(BASE_COLORS[0] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
    image = np.broadcast_to(bg[:, None, None], (3, n, n)).copy()
    count = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    for k in range(count):
        # cycle the first shape's class so every class shows up
        cls = shape_classes[index % len(shape_classes)] if k == 0 else int(rng.choice(shape_classes))
        mask = _shape_mask(cls, rng, spec)
        color = np.clip(BASE_COLORS[cls] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
        labels[mask] = cls
        image[:, mask] = color[:, None]
    if spec.noise > 0:
        image += rng.normal(0, spec.noise, image.shape)
    image = np.clip(image, 0, 1)
    # quantize so that netpbm round trips are exact
    image = np.rint(image * 255) / 255
    return Sample(image, labels, f"{index:04d}")


def generate_shapes_dataset(spec: SyntheticSpec) -> List[Sample]:
    spec.validate()
    return [generate_sample(spec, i) for i in range(spec.count)]


def channel_means(samples: Sequence[Sample]) -> List[float]:
    return [float(v) for v in np.mean([s.image.mean(axis=(1, 2)) for s in samples], axis=0)]


def write_dataset(samples: Sequence[Sample], out_dir: str, num_classes: int, ignore: int = IGNORE_LABEL) -> dict:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    for s in samples:
        write_netpbm(s.image, os.path.join(out_dir, "images", f"{s.ident}.ppm"))
        write_netpbm(s.labels, os.path.join(out_dir, "labels", f"{s.ident}.pgm"))
    manifest = {
        "num_classes": num_classes,
        "ignore": ignore,
        "channel_means": channel_means(samples),
        "samples": [s.ident for s in samples],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def read_dataset(data_dir: str) -> Tuple[List[Sample], dict]:
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    samples = [
        Sample(
            read_netpbm(os.path.join(data_dir, "images", f"{ident}.ppm")),
            read_netpbm(os.path.join(data_dir, "labels", f"{ident}.pgm")),
            ident,
        )
        for ident in manifest["samples"]
    ]
    return samples, manifest


# ---------------------------------------------------------------------------
# augmentation


def pad_to_mean(image: np.ndarray, target_h: int, target_w: int, means: Sequence[float]) -> np.ndarray:
    """Place ``image`` at the top-left of a canvas filled with channel means."""
    c, h, w = image.shape
    if target_h < h or target_w < w:
        raise ValueError(f"pad_to_mean: cannot shrink {h}×{w} to {target_h}×{target_w}")
    if (target_h, target_w) == (h, w):
        return image
    out = np.empty((c, target_h, target_w), dtype=image.dtype)
    out[:] = np.asarray(means, dtype=float)[:, None, None]
    out[:, :h, :w] = image
    return out


def pad_labels(labels: np.ndarray, target_h: int, target_w: int, ignore: int = IGNORE_LABEL) -> np.ndarray:
    h, w = labels.shape
    if target_h < h or target_w < w:
        raise ValueError(f"pad_labels: cannot shrink {h}×{w} to {target_h}×{target_w}")
    out = np.full((target_h, target_w), ignore, dtype=labels.dtype)
    out[:h, :w] = labels
    return out


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, :, ::-1].copy(), sample.labels[:, ::-1].copy(), sample.ident)


def random_crop_flip(
    sample: Sample,
    crop: int,
    rng: np.random.Generator,
    means: Optional[Sequence[float]] = None,
    ignore: int = IGNORE_LABEL,
    flip: Optional[bool] = None,
) -> Sample:
    """Joint random crop (mean/ignore padding when too small) and horizontal flip.

    ``flip`` forces the flip decision; otherwise it is drawn with probability 0.5.
    """
    image, labels = sample.image, sample.labels
    _, h, w = image.shape
    if h < crop or w < crop:
        m = means if means is not None else image.mean(axis=(1, 2))
        th, tw = max(h, crop), max(w, crop)
        image = pad_to_mean(image, th, tw, m)
        labels = pad_labels(labels, th, tw, ignore)
        h, w = th, tw
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    out = Sample(image[:, top : top + crop, left : left + crop].copy(), labels[top : top + crop, left : left + crop].copy(), sample.ident)
    return hflip(out) if do_flip else out
