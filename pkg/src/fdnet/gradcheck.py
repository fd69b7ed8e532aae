"""Finite-difference gradient suite over every differentiable op.

Each case builds seeded float64 inputs, contracts the op output with a fixed
random weight (so the summed output has a non-trivial gradient) and compares
analytic gradients against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .autodiff import Tensor, concat_channels, finite_diff_check, mul
from .boundary import LossConfig, band_partition_batch, boundary_aware_loss, deep_supervision_loss
from .layers import (
    CompositeH,
    CompositeHSpec,
    avg_pool,
    batch_norm,
    bilinear_upsample,
    conv2d,
    conv_transpose2d,
    max_pool,
    relu,
    softmax_channels,
)
from .network import FDNet, toy_spec

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    op: str
    case: str
    error: float
    coords: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _away_from_kink(a: np.ndarray, rng: np.random.Generator, margin: float = 1e-3) -> np.ndarray:
    bad = np.abs(a) < margin
    while bad.any():
        a[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(a) < margin
    return a


def _contract(out: Tensor, seed: int) -> Tensor:
    return mul(out, Tensor(_rng(seed).standard_normal(out.shape)))


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


# each case returns (error, number of perturbed coordinates)


def _conv(stride=1, padding=1, dilation=1):
    def run():
        r = _rng(1)
        x, w, b = _t(r, 2, 3, 9, 9), _t(r, 4, 3, 3, 3), _t(r, 4)
        fn = lambda x, w, b: _contract(conv2d(x, w, b, stride, padding, dilation), 2)
        return finite_diff_check(fn, [x, w, b], EPS), x.size + w.size + b.size

    return run


def _deconv(stride):
    def run():
        r = _rng(3)
        pad = max(0, (4 - stride + 1) // 2)
        x, w, b = _t(r, 1, 3, 4, 4), _t(r, 3, 2, 4, 4), _t(r, 2)
        fn = lambda x, w, b: _contract(
            conv_transpose2d(x, w, b, stride, pad, output_padding=stride - 4 + 2 * pad), 4
        )
        return finite_diff_check(fn, [x, w, b], EPS), x.size + w.size + b.size

    return run


def _bn(training):
    def run():
        r = _rng(5)
        x, g, b = _t(r, 4, 3, 3, 3), _t(r, 3), _t(r, 3)
        rm, rv = r.standard_normal(3), r.uniform(0.5, 2.0, 3)
        # fresh copies each call so the running-stat update never feeds back
        fn = lambda x, g, b: _contract(batch_norm(x, g, b, rm.copy(), rv.copy(), training), 6)
        return finite_diff_check(fn, [x, g, b], EPS), x.size + g.size + b.size

    return run


def _max_pool():
    r = _rng(7)
    # distinct values keep the argmax stable under perturbation
    x = Tensor(r.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) * 0.1)
    fn = lambda x: _contract(max_pool(x, 3, 2, padding=1), 8)
    return finite_diff_check(fn, x, EPS), x.size


def _avg_pool():
    x = _t(_rng(9), 2, 3, 8, 8)
    return finite_diff_check(lambda x: _contract(avg_pool(x, 2, 2), 10), x, EPS), x.size


def _upsample():
    x = _t(_rng(11), 1, 2, 4, 5)
    return finite_diff_check(lambda x: _contract(bilinear_upsample(x, 16, 13), 12), x, EPS), x.size


def _softmax():
    x = _t(_rng(13), 2, 4, 3, 3)
    return finite_diff_check(lambda x: _contract(softmax_channels(x), 14), x, EPS), x.size


def _relu():
    r = _rng(15)
    x = Tensor(_away_from_kink(r.standard_normal((2, 3, 4, 4)), r))
    return finite_diff_check(lambda x: _contract(relu(x), 16), x, EPS), x.size


def _concat():
    r = _rng(17)
    a, b = _t(r, 1, 2, 3, 3), _t(r, 1, 3, 3, 3)
    return finite_diff_check(lambda a, b: _contract(concat_channels([a, b]), 18), [a, b], EPS), a.size + b.size


def _composite(dilation):
    def run():
        r = _rng(19)
        layer = CompositeH(CompositeHSpec(6, 4, dilation), r)
        x = _t(r, 2, 6, 6, 6)
        params = layer.parameters()
        fn = lambda x, *ps: _contract(layer(x), 20)
        return finite_diff_check(fn, [x] + params, EPS), x.size + sum(p.size for p in params)

    return run


def _loss(mode, lam):
    def run():
        r = _rng(21)
        gt = r.integers(0, 3, (2, 8, 8))
        gt[0, 0, :3] = 255
        cfg = LossConfig([8.0, 4.0, 1.0], [1, 2], mode, lam)
        bands = band_partition_batch(gt, cfg.kernels)
        z = _t(r, 2, 3, 8, 8)
        fn = lambda z: boundary_aware_loss(softmax_channels(z), gt, bands, cfg)
        return finite_diff_check(fn, z, EPS), z.size

    return run


def _deep_supervision():
    r = _rng(23)
    gt = r.integers(0, 3, (1, 6, 6))
    cfg = LossConfig([2.0, 1.0], [1], "exp", 0.75)
    bands = band_partition_batch(gt, cfg.kernels)
    zs = [_t(r, 1, 3, 6, 6) for _ in range(3)]
    fn = lambda *zs: deep_supervision_loss(list(zs), gt, bands, cfg)
    return finite_diff_check(fn, zs, EPS), sum(z.size for z in zs)


FDNET_SAMPLES = 50


def _fdnet():
    """Toy network, training-mode BN, boundary-aware deep supervision, 50 parameters."""
    r = _rng(25)
    net = FDNet(toy_spec(), seed=0)
    net.train()
    x = Tensor(r.random((2, 3, 32, 32)))
    gt = r.integers(0, 4, (2, 32, 32))
    cfg = LossConfig([8.0, 6.0, 4.0, 2.0, 1.0], [2, 4, 6, 8], "exp", 0.75)
    bands = band_partition_batch(gt, cfg.kernels)
    params = net.parameters()
    fn = lambda *ps: deep_supervision_loss(net(x), gt, bands, cfg)
    return finite_diff_check(fn, params, EPS, n_samples=FDNET_SAMPLES, seed=26), FDNET_SAMPLES


CASES: Dict[str, Dict[str, Callable]] = {
    "conv2d": {
        "3x3 pad 1": _conv(),
        "3x3 stride 2": _conv(stride=2),
        "3x3 dilation 2": _conv(padding=2, dilation=2),
    },
    "conv_transpose2d": {f"4x4 stride {s}": _deconv(s) for s in (2, 4)},
    "batch_norm": {"training": _bn(True), "inference": _bn(False)},
    "max_pool": {"3x3 stride 2 pad 1": _max_pool},
    "avg_pool": {"2x2 stride 2": _avg_pool},
    "bilinear_upsample": {"4x5 -> 16x13": _upsample},
    "softmax": {"channels": _softmax},
    "relu": {"away from 0": _relu},
    "concat": {"two inputs": _concat},
    "composite_H": {"dilation 1": _composite(1), "dilation 2": _composite(2)},
    "boundary_aware_loss": {
        "poly lam 2": _loss("poly", 2.0),
        "exp lam 0.75": _loss("exp", 0.75),
        "plain ce": _loss("poly", 0.0),
    },
    "deep_supervision_loss": {"3 stages": _deep_supervision},
    "fdnet": {f"toy end-to-end, {FDNET_SAMPLES} params": _fdnet},
}


def run_checks(ops: Optional[List[str]] = None) -> List[CheckResult]:
    names = list(CASES) if not ops or ops == ["all"] else ops
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown op {unknown[0]!r}; choose from {', '.join(CASES)}")
    results = []
    for name in names:
        for case, run in CASES[name].items():
            start = time.perf_counter()
            err, n = run()
            results.append(CheckResult(name, case, err, n, time.perf_counter() - start))
    return results


def format_table(results: List[CheckResult]) -> str:
    lines = [f"{'op':<22} {'case':<28} {'coords':>6} {'max rel err':>12}  {'time':>6}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.op:<22} {r.case:<28} {r.coords:>6} {r.error:>12.3e}  {r.seconds:>5.1f}s  {status}")
    return "\n".join(lines)
