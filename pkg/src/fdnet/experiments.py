"""Desk-scale experiment protocols: overfit run, wiring ablation, loss comparison.

Every protocol is a plain function of its seeds so results are reproducible
bit for bit; the acceptance suite and the ``python -m fdnet.experiments``
report both call into here.
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .boundary import LossConfig
from .data import SyntheticSpec, channel_means, generate_shapes_dataset
from .network import FDNet, toy_spec
from .train import MetricsReport, TrainConfig, evaluate, train

# boundary-aware setting at 64×64: exp weighting, kernels scaled down from (10..40)
BOUNDARY_LOSS = LossConfig([8.0, 6.0, 4.0, 2.0, 1.0], [2, 4, 6, 8], "exp", 0.75)
CROSS_ENTROPY = LossConfig()
TRIMAP_WIDTHS = (1, 2, 4, 8, 16)

TRAIN_DATA_SEED = 100
EVAL_DATA_SEED = 200


@dataclass
class RunResult:
    name: str
    seed: int
    miou: float
    trimap: Dict[int, Optional[float]]
    final_loss: float
    seconds: float
    log: List[tuple] = field(default_factory=list, repr=False)


def _summarize(name: str, seed: int, report: MetricsReport, log, seconds: float) -> RunResult:
    tail = [row[2] for row in log[-20:]]
    return RunResult(name, seed, report.miou, dict(report.trimap), float(np.mean(tail)), seconds, log)


def overfit_run(seed: int = 0, loss: LossConfig = BOUNDARY_LOSS, max_iter: int = 300) -> RunResult:
    """Toy network on 8 training images; reports training-set metrics."""
    data = generate_shapes_dataset(SyntheticSpec(seed=1, count=8))
    net = FDNet(toy_spec(), seed=seed)
    cfg = TrainConfig(base_lr=2.5e-3, max_iter=max_iter, batch_size=8, crop=64, seed=seed)
    start = time.perf_counter()
    result = train(net, data, cfg, loss, means=channel_means(data))
    report = evaluate(net, data, trimap_widths=TRIMAP_WIDTHS)
    return _summarize("overfit", seed, report, result.log, time.perf_counter() - start)


def heldout_sets(train_count: int = 64, eval_count: int = 32):
    train_set = generate_shapes_dataset(SyntheticSpec(seed=TRAIN_DATA_SEED, count=train_count))
    eval_set = generate_shapes_dataset(SyntheticSpec(seed=EVAL_DATA_SEED, count=eval_count))
    return train_set, eval_set


def heldout_run(
    wiring: str,
    loss: LossConfig,
    seed: int,
    max_iter: int = 600,
    sets=None,
    name: Optional[str] = None,
) -> RunResult:
    """Train on the 64-image set, evaluate on the disjoint 32-image set."""
    train_set, eval_set = sets if sets is not None else heldout_sets()
    net = FDNet(toy_spec(wiring=wiring), seed=seed)
    cfg = TrainConfig(base_lr=2.5e-3, max_iter=max_iter, batch_size=8, crop=64, seed=seed)
    start = time.perf_counter()
    result = train(net, train_set, cfg, loss, means=channel_means(train_set))
    report = evaluate(net, eval_set, trimap_widths=TRIMAP_WIDTHS)
    return _summarize(name or wiring, seed, report, result.log, time.perf_counter() - start)


def format_table(rows: Sequence[RunResult]) -> str:
    widths = list(rows[0].trimap) if rows else []
    head = f"{'run':<10} {'seed':>4} {'mIoU':>7} " + " ".join(f"{'tri' + str(w):>7}" for w in widths) + f" {'loss':>7} {'time':>6}"
    lines = [head]
    for r in rows:
        tri = " ".join(f"{'-':>7}" if r.trimap[w] is None else f"{100 * r.trimap[w]:7.2f}" for w in widths)
        lines.append(f"{r.name:<10} {r.seed:>4} {100 * r.miou:7.2f} {tri} {r.final_loss:7.4f} {r.seconds:5.0f}s")
    return "\n".join(lines)


def mean_miou(rows: Sequence[RunResult], name: str) -> float:
    return float(np.mean([r.miou for r in rows if r.name == name]))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="run the desk-scale experiment protocols")
    parser.add_argument("which", choices=["overfit", "ablation", "loss"])
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--iters", type=int)
    parser.add_argument("--json", help="dump rows here")
    args = parser.parse_args(argv)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows: List[RunResult] = []
    if args.which == "overfit":
        rows = [overfit_run(s, max_iter=args.iters or 300) for s in seeds]
    else:
        sets = heldout_sets()
        iters = args.iters or 600
        for s in seeds:
            if args.which == "ablation":
                for wiring in ("dense", "skip", "none"):
                    rows.append(heldout_run(wiring, CROSS_ENTROPY, s, iters, sets))
                    print(format_table(rows[-1:]), flush=True)
            else:
                rows.append(heldout_run("dense", CROSS_ENTROPY, s, iters, sets, "ce"))
                rows.append(heldout_run("dense", BOUNDARY_LOSS, s, iters, sets, "b-aware"))
                print(format_table(rows[-2:]), flush=True)
    print(format_table(rows))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([{k: v for k, v in r.__dict__.items() if k != "log"} for r in rows], fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
