"""FDNet: a DenseNet encoder plus a decoder that densely re-aggregates every
earlier block output at each stage.

The decoder runs three aggregation stages::

    agg-1 -> compress -> block 5 -> compress -> agg-2 -> compress -> block 6 -> compress -> agg-3

Each aggregation compresses its reused inputs (BN-ReLU-1×1), resizes them to
the stage scale with one strided 3×3 conv (down) or 4×4 transposed conv (up),
and concatenates them with the stage's direct input. A prediction head sits on
every stage; the last one gives the final label map.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, concat_channels, tensor_from_bytes, tensor_to_bytes
from .layers import (
    BatchNorm2d,
    BNReLUConv,
    BNReLUDeconv,
    Conv2d,
    ConvSpec,
    DenseBlock,
    Module,
    Transition,
    bilinear_upsample,
    max_pool,
    relu,
)

WIRING_MODES = ("none", "skip", "dense")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` holds the dotted path of the offender."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class NetworkSpec:
    num_classes: int = 21
    block_depths: List[int] = field(default_factory=lambda: [2, 4, 8, 6])
    growth_rate: int = 8
    init_channels: int = 16
    stride: int = 16
    dilation: int = 2
    wiring: str = "dense"
    agg_widths: List[int] = field(default_factory=lambda: [1024, 768])
    block_widths: List[int] = field(default_factory=lambda: [768, 512])
    reuse_widths: List[int] = field(default_factory=lambda: [384, 256, 128])
    encoder_width: int = 768
    decoder_depths: List[int] = field(default_factory=lambda: [2, 2])
    stage_scales: List[int] = field(default_factory=lambda: [8, 4, 4])
    deep_supervision: bool = True
    compression: float = 0.5

    def validate(self) -> "NetworkSpec":
        if self.num_classes < 2:
            raise ConfigError("network.num_classes", "need at least 2 classes")
        if len(self.block_depths) != 4 or min(self.block_depths) < 1:
            raise ConfigError("network.block_depths", "need 4 positive depths")
        if self.growth_rate < 1:
            raise ConfigError("network.growth_rate", "must be positive")
        if self.init_channels < 1:
            raise ConfigError("network.init_channels", "must be positive")
        if self.stride not in (16, 32):
            raise ConfigError("network.stride", f"must be 16 or 32, got {self.stride}")
        if self.stride == 16 and self.dilation < 2:
            raise ConfigError("network.dilation", "stride 16 needs block-4 dilation >= 2")
        if self.dilation < 1:
            raise ConfigError("network.dilation", "must be >= 1")
        if self.wiring not in WIRING_MODES:
            raise ConfigError("network.wiring", f"must be one of {WIRING_MODES}, got {self.wiring!r}")
        for name, n in (("agg_widths", 2), ("block_widths", 2), ("reuse_widths", 3), ("decoder_depths", 2)):
            vals = getattr(self, name)
            if len(vals) != n or min(vals) < 1:
                raise ConfigError(f"network.{name}", f"need {n} positive ints, got {vals}")
        if self.encoder_width < 1:
            raise ConfigError("network.encoder_width", "must be positive")
        if len(self.stage_scales) != 3:
            raise ConfigError("network.stage_scales", "exactly 3 aggregation stages")
        for s in self.stage_scales:
            if s < 1 or s & (s - 1) or s > self.stride:
                raise ConfigError("network.stage_scales", f"scales must be powers of two <= stride, got {s}")
        if not 0 < self.compression <= 1:
            raise ConfigError("network.compression", "must be in (0, 1]")
        return self

    @property
    def encoder_scales(self) -> List[int]:
        return [4, 8, 16, self.stride]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"network.{unknown[0]}", "unknown key")
        return cls(**data).validate()


def toy_spec(**overrides) -> NetworkSpec:
    """Desk-scale FDNet used by the test suite and the overfit experiments."""
    base = dict(
        num_classes=4,
        block_depths=[2, 2, 2, 2],
        growth_rate=8,
        init_channels=16,
        stride=16,
        dilation=2,
        wiring="dense",
        agg_widths=[64, 48],
        block_widths=[48, 32],
        reuse_widths=[24, 16, 8],
        encoder_width=48,
        decoder_depths=[2, 2],
    )
    base.update(overrides)
    return NetworkSpec(**base).validate()


# ---------------------------------------------------------------------------
# aggregation planning


@dataclass(frozen=True)
class SourceSpec:
    block: str
    scale: int
    direct: bool
    transform: str  # "down" | "up" | "identity"
    factor: int
    width: int  # channels entering the concat

    @property
    def kind(self) -> str:
        if self.transform == "identity":
            return "identity"
        return f"{self.transform}x{self.factor}"


@dataclass(frozen=True)
class AggregationSpec:
    stage: int
    scale: int
    sources: Tuple[SourceSpec, ...]

    @property
    def out_channels(self) -> int:
        return sum(s.width for s in self.sources)


def _transform(src_scale: int, dst_scale: int) -> Tuple[str, int]:
    if src_scale == dst_scale:
        return "identity", 1
    if src_scale < dst_scale:
        return "down", dst_scale // src_scale
    return "up", src_scale // dst_scale


def make_source(block: str, scale: int, target: int, direct: bool, width: int) -> SourceSpec:
    kind, factor = _transform(scale, target)
    return SourceSpec(block, scale, direct, kind, factor, width)


def plan_aggregations(spec: NetworkSpec) -> List[AggregationSpec]:
    """Source lists for the three decoder stages for the configured wiring mode."""
    enc_scales = spec.encoder_scales
    direct = [
        ("B4", spec.stride, spec.encoder_width),
        ("B5", spec.stage_scales[0], spec.block_widths[0]),
        ("B6", spec.stage_scales[1], spec.block_widths[1]),
    ]
    stages = []
    for i in range(3):
        target = spec.stage_scales[i]
        width = spec.reuse_widths[i]
        earlier = [(f"B{k + 1}", enc_scales[k]) for k in range(4)]
        earlier += [(f"B{5 + k}", spec.stage_scales[k]) for k in range(i)]
        dname = direct[i][0]
        candidates = [(b, sc) for b, sc in earlier if b != dname]
        if spec.wiring == "dense":
            reused = candidates
        elif spec.wiring == "skip":
            enc = [(b, sc) for b, sc in candidates if int(b[1:]) <= 4]
            # same-scale encoder block; nearest scale (finer on ties) otherwise
            best = min(enc, key=lambda t: (abs(np.log2(t[1] / target)), t[1]))
            reused = [best]
        else:
            reused = []
        sources = [make_source(b, sc, target, False, width) for b, sc in reused]
        sources.append(make_source(dname, direct[i][1], target, True, direct[i][2]))
        sources.sort(key=lambda s: int(s.block[1:]))
        stages.append(AggregationSpec(i + 1, target, tuple(sources)))
    return stages


# ---------------------------------------------------------------------------
# modules


class Resize(Module):
    """Brings a feature map to the stage scale without changing its channels."""

    def __init__(self, channels: int, transform: str, factor: int, rng: np.random.Generator):
        self.transform, self.factor = transform, factor
        if transform == "down":
            self.op = BNReLUConv(ConvSpec(channels, channels, (3, 3), (factor, factor), (1, 1)), rng)
        elif transform == "up":
            self.op = BNReLUDeconv(channels, factor, rng)
        else:
            self.op = None

    def forward(self, x: Tensor) -> Tensor:
        return x if self.op is None else self.op(x)


class AggregationSource(Module):
    def __init__(self, src: SourceSpec, in_channels: int, rng: np.random.Generator):
        self.src = src
        self.compress = None if src.direct else BNReLUConv(ConvSpec(in_channels, src.width, (1, 1)), rng)
        self.resize = Resize(src.width, src.transform, src.factor, rng)

    def forward(self, x: Tensor) -> Tensor:
        if self.compress is not None:
            x = self.compress(x)
        return self.resize(x)


class AdaptiveAggregation(Module):
    """Compress, resize and concatenate the outputs of earlier blocks."""

    def __init__(self, spec: AggregationSpec, in_channels: Dict[str, int], rng: np.random.Generator):
        self.spec = spec
        self.sources = {s.block: AggregationSource(s, in_channels[s.block], rng) for s in spec.sources}

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def forward(self, feats: Dict[str, Tensor], input_hw: Tuple[int, int]) -> Tensor:
        h, w = input_hw
        target = (h // self.spec.scale, w // self.spec.scale)
        parts = []
        for s in self.spec.sources:
            y = self.sources[s.block](feats[s.block])
            if y.shape[2:] != target:
                raise ShapeError(
                    f"{self.name or 'aggregation'}: source {s.block} resized to {y.shape[2:]}, stage expects {target}"
                )
            parts.append(y)
        return concat_channels(parts, name=self.name or None)


class Encoder(Module):
    """DenseNet trunk returning B1..B4 at 1/4, 1/8, 1/16 and 1/16 or 1/32."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        c = spec.init_channels
        self.stem_conv = Conv2d(ConvSpec(3, c, (7, 7), (2, 2), (3, 3)), rng)
        self.stem_bn = BatchNorm2d(c)
        self.blocks = []
        self.transitions = []
        self.out_channels = []
        for k, depth in enumerate(spec.block_depths):
            dil = spec.dilation if (k == 3 and spec.stride == 16) else 1
            block = DenseBlock(c, depth, spec.growth_rate, rng, dilation=dil)
            self.blocks.append(block)
            self.out_channels.append(block.out_channels)
            c = block.out_channels
            if k < 3:
                pool = not (k == 2 and spec.stride == 16)
                trans = Transition(c, spec.compression, rng, pool=pool)
                self.transitions.append(trans)
                c = trans.out_channels

    def forward(self, x: Tensor) -> List[Tensor]:
        y = max_pool(relu(self.stem_bn(self.stem_conv(x))), 3, 2, padding=1)
        outs = []
        for k, block in enumerate(self.blocks):
            y = block(y)
            outs.append(y)
            if k < 3:
                y = self.transitions[k](y)
        return outs


class PredictionHead(Module):
    """BN-ReLU-1×1 conv to class logits, then bilinear upsampling to input size."""

    def __init__(self, in_channels: int, num_classes: int, rng: np.random.Generator):
        self.bn = BatchNorm2d(in_channels)
        self.conv = Conv2d(ConvSpec(in_channels, num_classes, (1, 1)), rng, bias=True)

    def forward(self, x: Tensor, out_hw: Tuple[int, int]) -> Tensor:
        return bilinear_upsample(self.conv(relu(self.bn(x))), *out_hw)


class FDNet(Module):
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(spec, rng)
        self.plans = plan_aggregations(spec)
        channels = {f"B{k + 1}": ch for k, ch in enumerate(self.encoder.out_channels)}
        self.encoder_compress = BNReLUConv(ConvSpec(channels["B4"], spec.encoder_width, (1, 1)), rng)
        channels_direct = dict(channels)
        channels_direct["B4"] = spec.encoder_width

        self.aggregations = []
        self.stage_compress = []
        self.decoder_blocks = []
        self.block_compress = []
        self.heads = []
        for i, plan in enumerate(self.plans):
            # direct source gets its compressed channel count; reused ones get raw
            in_ch = {s.block: (channels_direct[s.block] if s.direct else channels[s.block]) for s in plan.sources}
            agg = AdaptiveAggregation(plan, in_ch, rng)
            self.aggregations.append(agg)
            if spec.deep_supervision or i == 2:
                self.heads.append(PredictionHead(agg.out_channels, spec.num_classes, rng))
            else:
                self.heads.append(None)
            if i < 2:
                comp = BNReLUConv(ConvSpec(agg.out_channels, spec.agg_widths[i], (1, 1)), rng)
                block = DenseBlock(spec.agg_widths[i], spec.decoder_depths[i], spec.growth_rate, rng)
                bcomp = BNReLUConv(ConvSpec(block.out_channels, spec.block_widths[i], (1, 1)), rng)
                self.stage_compress.append(comp)
                self.decoder_blocks.append(block)
                self.block_compress.append(bcomp)
                channels[f"B{5 + i}"] = spec.block_widths[i]
                channels_direct[f"B{5 + i}"] = spec.block_widths[i]
        self.assign_names()

    def min_input(self) -> int:
        return self.spec.stride * 2

    def forward(self, x: Tensor) -> List[Tensor]:
        """Per-stage class logits at input resolution (only active heads).

        The last element is the final prediction.
        """
        n, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"fdnet: expected 3 input channels, got {c}")
        if h % self.spec.stride or w % self.spec.stride:
            raise ShapeError(f"fdnet: input {h}×{w} must be divisible by stride {self.spec.stride}")
        bs = self.encoder(x)
        feats = {f"B{k + 1}": b for k, b in enumerate(bs)}
        reused = dict(feats)
        direct = {"B4": self.encoder_compress(feats["B4"])}
        logits = []
        for i, agg in enumerate(self.aggregations):
            inputs = {s.block: (direct[s.block] if s.direct else reused[s.block]) for s in agg.spec.sources}
            f = agg(inputs, (h, w))
            if self.heads[i] is not None:
                logits.append(self.heads[i](f, (h, w)))
            if i < 2:
                y = self.decoder_blocks[i](self.stage_compress[i](f))
                y = self.block_compress[i](y)
                reused[f"B{5 + i}"] = y
                direct[f"B{5 + i}"] = y
        return logits

    def encode(self, x: Tensor) -> List[Tensor]:
        return self.encoder(x)

    def batch_norms(self) -> List[Tuple[str, BatchNorm2d]]:
        return [(m.name, m) for m in self.modules() if isinstance(m, BatchNorm2d)]


def build_dense_block(in_channels: int, depth: int, growth: int, seed: int = 0) -> DenseBlock:
    block = DenseBlock(in_channels, depth, growth, np.random.default_rng(seed))
    block.assign_names("block.")
    return block


def build_transition(in_channels: int, compression_factor: float, seed: int = 0, pool: bool = True) -> Transition:
    return Transition(in_channels, compression_factor, np.random.default_rng(seed), pool=pool)


def build_adaptive_aggregation(
    spec: AggregationSpec, sources: Dict[str, Tensor], input_hw: Tuple[int, int], seed: int = 0
) -> Tensor:
    """One-shot aggregation with fresh weights; ``sources`` maps block id to tensor."""
    in_ch = {b: t.shape[1] for b, t in sources.items()}
    for s in spec.sources:
        expected = (input_hw[0] // s.scale, input_hw[1] // s.scale)
        got = sources[s.block].shape[2:]
        if got != expected:
            raise ShapeError(f"aggregation stage {spec.stage}: source {s.block} is {got}, declared scale 1/{s.scale}")
    agg = AdaptiveAggregation(spec, in_ch, np.random.default_rng(seed))
    agg.assign_names(f"agg{spec.stage}.")
    return agg(sources, input_hw)


def build_fdnet(spec: NetworkSpec, seed: int = 0) -> FDNet:
    return FDNet(spec, seed)


def count_parameters(network: Module) -> int:
    """Learnable scalars (conv weights/biases, BN gamma/beta)."""
    return int(sum(p.size for p in network.parameters()))


@dataclass(frozen=True)
class Edge:
    source: str
    stage: int
    transform: str
    width: int
    direct: bool


def connectivity_report(network: FDNet) -> List[Edge]:
    """Aggregation edges, ordered by stage then source block."""
    edges = []
    for plan in network.plans:
        for s in sorted(plan.sources, key=lambda s: int(s.block[1:])):
            edges.append(Edge(s.block, plan.stage, s.kind, s.width, s.direct))
    return edges


def format_report(network: FDNet) -> str:
    edges = connectivity_report(network)
    lines = [
        f"parameters: {count_parameters(network)}",
        f"wiring: {network.spec.wiring}  stride: {network.spec.stride}",
        f"aggregation edges: {len(edges)}",
        f"{'stage':>5}  {'source':<6} {'transform':<9} {'width':>5}  direct",
    ]
    for e in edges:
        lines.append(f"{e.stage:>5}  {e.source:<6} {e.transform:<9} {e.width:>5}  {'yes' if e.direct else ''}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoints


def _state(network: FDNet) -> List[Tuple[str, np.ndarray]]:
    items = [(p.ident, p.data) for p in network.parameters()]
    for name, bn in network.batch_norms():
        for key, arr in bn.buffers().items():
            items.append((f"{name}.{key}", arr))
    return items


def checkpoint_bytes(network: FDNet) -> bytes:
    """Spec JSON + manifest header line, then FDTENSR1 tensors in registry order."""
    payload = io.BytesIO()
    manifest = []
    for ident, arr in _state(network):
        manifest.append([ident, payload.tell()])
        payload.write(tensor_to_bytes(arr))
    header = json.dumps({"network": network.spec.to_dict(), "manifest": manifest}, sort_keys=True)
    return header.encode() + b"\n" + payload.getvalue()


def save_checkpoint(network: FDNet, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(network))


def load_checkpoint(path: str) -> FDNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    body = raw[nl + 1 :]
    net = FDNet(NetworkSpec.from_dict(header["network"]))
    targets = dict(_state(net))
    for ident, offset in header["manifest"]:
        arr, _ = tensor_from_bytes(body, offset)
        if ident not in targets:
            raise ValueError(f"checkpoint entry {ident!r} not in network")
        dest = targets[ident]
        if dest.shape != arr.shape:
            raise ShapeError(f"checkpoint entry {ident!r}: shape {arr.shape} != {dest.shape}")
        dest[...] = arr
    return net
