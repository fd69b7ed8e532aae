"""Layer kernels and the small module system the network is assembled from.

Functional ops take and return :class:`~fdnet.autodiff.Tensor` and carry their
own backward closures. Convolutions are computed with an im2col gather followed
by one matrix product; the transposed convolution is the exact adjoint (its
forward is the col2im scatter used by the conv input gradient).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .autodiff import DTYPE, Parameter, ShapeError, Tensor, concat_channels, make_node

Pair = Tuple[int, int]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v: Union[int, Pair]) -> Pair:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv_out_size(size: int, k: int, s: int, p: int, d: int) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Pair = (3, 3)
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    dilation: Pair = (1, 1)

    def output_extent(self, h: int, w: int) -> Pair:
        return (
            conv_out_size(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0]),
            conv_out_size(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1]),
        )


# ---------------------------------------------------------------------------
# im2col / col2im


def _im2col(xp: np.ndarray, kh: int, kw: int, s: Pair, d: Pair, ho: int, wo: int) -> np.ndarray:
    """Gather (N, C*kh*kw, ho*wo) patches from an already padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=DTYPE)
    for i in range(kh):
        r = i * d[0]
        for j in range(kw):
            q = j * d[1]
            cols[:, :, i, j] = xp[:, :, r : r + s[0] * (ho - 1) + 1 : s[0], q : q + s[1] * (wo - 1) + 1 : s[1]]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, s: Pair, d: Pair, ho: int, wo: int) -> np.ndarray:
    """Scatter-add (N, C*kh*kw, ho*wo) columns back onto a padded canvas."""
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(padded_shape, dtype=DTYPE)
    for i in range(kh):
        r = i * d[0]
        for j in range(kw):
            q = j * d[1]
            out[:, :, r : r + s[0] * (ho - 1) + 1 : s[0], q : q + s[1] * (wo - 1) + 1 : s[1]] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


# ---------------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Union[int, Pair] = 1,
    padding: Union[int, Pair] = 0,
    dilation: Union[int, Pair] = 1,
    name: Optional[str] = None,
) -> Tensor:
    """2-D cross-correlation with zero padding. Weight layout (out, in, kh, kw)."""
    s, p, d = _pair(stride), _pair(padding), _pair(dilation)
    label = name or "conv2d"
    if x.ndim != 4:
        raise ShapeError(f"{label}: expected N×C×H×W input, got {x.shape}")
    o, c, kh, kw = weight.shape
    n, cx, h, w = x.shape
    if cx != c:
        raise ShapeError(f"{label}: expected {c} input channels, got {cx} (input {x.shape})")
    ho, wo = conv_out_size(h, kh, s[0], p[0], d[0]), conv_out_size(w, kw, s[1], p[1], d[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"{label}: degenerate output {ho}×{wo} for input {h}×{w}")

    if kh == kw == 1 and s == (1, 1) and p == (0, 0):
        cols = x.data.reshape(n, c, h * w)
    else:
        cols = _im2col(_pad(x.data, *p), kh, kw, s, d, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def _bw(g):
        gm = g.reshape(n, o, ho * wo)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(wmat.T, gm)
        if kh == kw == 1 and s == (1, 1) and p == (0, 0):
            gx = gcols.reshape(x.shape)
        else:
            gxp = _col2im(gcols, (n, c, h + 2 * p[0], w + 2 * p[1]), kh, kw, s, d, ho, wo)
            gx = gxp[:, :, p[0] : p[0] + h, p[1] : p[1] + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, "conv2d", _bw, name=name, stride=s, padding=p, dilation=d)


def conv_transpose_out_size(size: int, k: int, s: int, p: int, d: int = 1, op: int = 0) -> int:
    return (size - 1) * s - 2 * p + d * (k - 1) + 1 + op


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Union[int, Pair] = 1,
    padding: Union[int, Pair] = 0,
    output_padding: Union[int, Pair] = 0,
    dilation: Union[int, Pair] = 1,
    name: Optional[str] = None,
) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`). Weight layout (in, out, kh, kw)."""
    s, p, op, d = _pair(stride), _pair(padding), _pair(output_padding), _pair(dilation)
    label = name or "conv_transpose2d"
    if x.ndim != 4:
        raise ShapeError(f"{label}: expected N×C×H×W input, got {x.shape}")
    cin, cout, kh, kw = weight.shape
    n, cx, h, w = x.shape
    if cx != cin:
        raise ShapeError(f"{label}: expected {cin} input channels, got {cx}")
    if min(s) < 1:
        raise ShapeError(f"{label}: stride must be >= 1, got {s}")
    ho = conv_transpose_out_size(h, kh, s[0], p[0], d[0], op[0])
    wo = conv_transpose_out_size(w, kw, s[1], p[1], d[1], op[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"{label}: degenerate output {ho}×{wo} for input {h}×{w}")

    wmat = weight.data.reshape(cin, -1)
    xm = x.data.reshape(n, cin, h * w)
    cols = np.matmul(wmat.T, xm)
    padded = (n, cout, ho + 2 * p[0], wo + 2 * p[1])
    out = _col2im(cols, padded, kh, kw, s, d, h, w)[:, :, p[0] : p[0] + ho, p[1] : p[1] + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _bw(g):
        gcols = _im2col(_pad(g, *p), kh, kw, s, d, h, w)
        gx = np.matmul(wmat, gcols).reshape(x.shape)
        gw = np.tensordot(xm, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(
        out, parents, "conv_transpose2d", _bw, name=name, stride=s, padding=p, output_padding=op
    )


# ---------------------------------------------------------------------------
# normalization / activations


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    name: Optional[str] = None,
) -> Tensor:
    """Per-channel batch normalization of an N×C×H×W tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance for the running estimate).
    """
    label = name or "batch_norm"
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"{label}: expected {gamma.shape[0]} channels, got input {x.shape}")
    n, c, h, w = x.shape
    shape = (1, c, 1, 1)
    g_ = gamma.data.reshape(shape)
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError(f"{label}: training mode needs batch*H*W >= 2 per channel, got {m}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)

        def _bw(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gxhat = g * g_
            gx = (inv.reshape(shape) / m) * (
                m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return gx, gg, gb

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv.reshape(shape)

        def _bw(g):
            return (
                g * (g_ * inv.reshape(shape)),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

    out = xhat * g_ + beta.data.reshape(shape)
    return make_node(out, (x, gamma, beta), "batch_norm", _bw, name=name, training=training)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # subgradient at exactly 0 is 0
    return make_node(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def _pool_geometry(x: Tensor, k: int, s: int, pad: int, label: str) -> Pair:
    if x.ndim != 4:
        raise ShapeError(f"{label}: expected N×C×H×W input, got {x.shape}")
    h, w = x.shape[2:]
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"{label}: kernel {k} exceeds padded extent {h + 2 * pad}×{w + 2 * pad}")
    ho, wo = conv_out_size(h, k, s, pad, 1), conv_out_size(w, k, s, pad, 1)
    if ho < 1 or wo < 1:
        raise ShapeError(f"{label}: degenerate output {ho}×{wo}")
    return ho, wo


def max_pool(x: Tensor, k: int, s: int, padding: int = 0) -> Tensor:
    """Window max; backward routes to the first maximal element of each window."""
    ho, wo = _pool_geometry(x, k, s, padding, "max_pool")
    n, c, h, w = x.shape
    xp = _pad(x.data, padding, padding, -np.inf)
    taps = np.stack(
        [xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] for i in range(k) for j in range(k)]
    )
    arg = taps.argmax(axis=0)
    out = np.take_along_axis(taps, arg[None], axis=0)[0]

    def _bw(g):
        gp = np.zeros(xp.shape, dtype=DTYPE)
        for t in range(k * k):
            i, j = divmod(t, k)
            gp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += np.where(arg == t, g, 0.0)
        return (gp[:, :, padding : padding + h, padding : padding + w],)

    return make_node(out, (x,), "max_pool", _bw, k=k, s=s, padding=padding)


def avg_pool(x: Tensor, k: int, s: int) -> Tensor:
    """Window mean (no padding); backward spreads the gradient uniformly."""
    ho, wo = _pool_geometry(x, k, s, 0, "avg_pool")
    out = np.zeros(x.shape[:2] + (ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out += x.data[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    out /= k * k

    def _bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += share
        return (gx,)

    return make_node(out, (x,), "avg_pool", _bw, k=k, s=s)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    a = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    a[rows, lo] = 1.0 - frac
    a[rows, lo + 1] += frac
    return a


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of a (..., H, W) array, up or down."""
    ah = interp_matrix(x.shape[-2], out_h)
    aw = interp_matrix(x.shape[-1], out_w)
    return ah @ x @ aw.T


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear upsampling of an N×C×H×W tensor."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample: expected N×C×H×W input, got {x.shape}")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample: cannot downscale {h}×{w} to {out_h}×{out_w}")
    if (out_h, out_w) == (h, w):
        return x
    ah, aw = interp_matrix(h, out_h), interp_matrix(w, out_w)
    out = ah @ x.data @ aw.T
    return make_node(out, (x,), "bilinear_upsample", lambda g: (ah.T @ g @ aw,), size=(out_h, out_w))


def softmax_channels(x: Tensor) -> Tensor:
    if x.shape[1] < 2:
        raise ShapeError(f"softmax_channels: need at least 2 channels, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return make_node(out, (x,), "softmax", _bw)


# ---------------------------------------------------------------------------
# modules


class Module:
    """Container with named parameters and a training/inference mode flag."""

    training = True
    name = ""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield f"{key}.{k}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def assign_names(self, prefix: str = "") -> None:
        """Stamp dotted paths onto submodules and parameter identifiers."""
        self.name = prefix.rstrip(".")
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                val.ident = prefix + key
        for key, child in self.children():
            child.assign_names(prefix + key + ".")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = False):
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = spec.in_channels * kh * kw
        self.weight = Parameter(he_uniform(rng, (spec.out_channels, spec.in_channels, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(spec.out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        sp = self.spec
        return conv2d(x, self.weight, self.bias, sp.stride, sp.padding, sp.dilation, name=self.name or None)


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int,
        padding: int,
        rng: np.random.Generator,
        output_padding: int = 0,
        bias: bool = False,
    ):
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        # each output pixel of a stride-s transposed conv sees ~in*(k/s)^2 taps
        fan_in = max(1, in_channels * (kernel // stride) ** 2)
        self.weight = Parameter(he_uniform(rng, (in_channels, out_channels, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(
            x, self.weight, self.bias, self.stride, self.padding, self.output_padding, name=self.name or None
        )


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
            name=self.name or None,
        )

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class BNReLUConv(Module):
    """Pre-activation unit: BN, ReLU, then a convolution."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        self.bn = BatchNorm2d(spec.in_channels)
        self.conv = Conv2d(spec, rng)

    @property
    def out_channels(self) -> int:
        return self.conv.spec.out_channels

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(relu(self.bn(x)))


class BNReLUDeconv(Module):
    """Pre-activation unit: BN, ReLU, then a 4×4 transposed convolution."""

    def __init__(self, channels: int, stride: int, rng: np.random.Generator, kernel: int = 4):
        # pad/output_pad chosen so the output extent is exactly stride × input
        pad = max(0, (kernel - stride + 1) // 2)
        out_pad = stride - kernel + 2 * pad
        self.bn = BatchNorm2d(channels)
        self.deconv = ConvTranspose2d(channels, channels, kernel, stride, pad, rng, output_padding=out_pad)

    def forward(self, x: Tensor) -> Tensor:
        return self.deconv(relu(self.bn(x)))


@dataclass(frozen=True)
class CompositeHSpec:
    in_channels: int
    growth: int
    dilation: int = 1
    bottleneck_factor: int = 4

    @property
    def bottleneck(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.bottleneck_factor * self.growth, (1, 1))

    @property
    def main(self) -> ConvSpec:
        d = self.dilation
        return ConvSpec(self.bottleneck_factor * self.growth, self.growth, (3, 3), padding=(d, d), dilation=(d, d))


class CompositeH(Module):
    """BN-ReLU-1×1 conv (to 4×growth) followed by BN-ReLU-3×3 conv (to growth)."""

    def __init__(self, spec: CompositeHSpec, rng: np.random.Generator):
        self.spec = spec
        self.unit1 = BNReLUConv(spec.bottleneck, rng)
        self.unit2 = BNReLUConv(spec.main, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"{self.name or 'composite_H'}: expected {self.spec.in_channels} channels, got {x.shape[1]}"
            )
        return self.unit2(self.unit1(x))


def composite_H(x: Tensor, spec: CompositeHSpec, rng: Optional[np.random.Generator] = None) -> Tensor:
    """One-shot functional form with freshly initialized weights (for checks)."""
    layer = CompositeH(spec, rng or np.random.default_rng(0))
    return layer(x)


class DenseBlock(Module):
    """Each layer sees the concatenation of the block input and all earlier outputs."""

    def __init__(self, in_channels: int, depth: int, growth: int, rng: np.random.Generator, dilation: int = 1):
        if depth < 1:
            raise ValueError(f"dense block depth must be >= 1, got {depth}")
        self.in_channels = in_channels
        self.growth = growth
        self.layers = [
            CompositeH(CompositeHSpec(in_channels + i * growth, growth, dilation), rng) for i in range(depth)
        ]

    @property
    def out_channels(self) -> int:
        return self.in_channels + len(self.layers) * self.growth

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for layer in self.layers:
            feats.append(layer(concat_channels(feats)))
        return concat_channels(feats, name=self.name or None)


class Transition(Module):
    """BN-ReLU-1×1 compression, optionally followed by 2×2 average pooling."""

    def __init__(self, in_channels: int, factor: float, rng: np.random.Generator, pool: bool = True):
        if not 0 < factor <= 1:
            raise ValueError(f"compression factor must be in (0, 1], got {factor}")
        self.out_channels = int(np.floor(in_channels * factor))
        self.unit = BNReLUConv(ConvSpec(in_channels, self.out_channels, (1, 1)), rng)
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        y = self.unit(x)
        return avg_pool(y, 2, 2) if self.pool else y
