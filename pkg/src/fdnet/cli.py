"""Command line front end: gen, train, eval, predict, gradcheck, bands, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import List, Optional, Sequence

import numpy as np

from .boundary import LossConfig, band_partition
from .data import (
    IGNORE_LABEL,
    SyntheticSpec,
    channel_means,
    generate_shapes_dataset,
    read_dataset,
    read_netpbm,
    write_dataset,
    write_netpbm,
)
from .network import ConfigError, FDNet, NetworkSpec, format_report, load_checkpoint
from .train import (
    TrainConfig,
    compute_metrics,
    predict_multiscale,
    train,
    trimap_miou,
)

logger = logging.getLogger("fdnet")

DEFAULT_TRIMAP_WIDTHS = (1, 5, 10, 20, 40)
SECTIONS = ("seed", "network", "train", "loss", "data")


@dataclass
class DataConfig:
    """Where training/eval samples come from: a dataset directory or a synthetic spec."""

    train_dir: Optional[str] = None
    eval_dir: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    eval_synthetic: Optional[SyntheticSpec] = None

    @classmethod
    def from_dict(cls, data: dict) -> "DataConfig":
        unknown = sorted(set(data) - {"train_dir", "eval_dir", "synthetic", "eval_synthetic"})
        if unknown:
            raise ConfigError(f"data.{unknown[0]}", "unknown key")
        out = cls(train_dir=data.get("train_dir"), eval_dir=data.get("eval_dir"))
        for key in ("synthetic", "eval_synthetic"):
            if data.get(key) is not None:
                try:
                    setattr(out, key, SyntheticSpec.from_dict(data[key]))
                except ConfigError as err:
                    raise ConfigError(err.field.replace("data.", f"data.{key}.", 1), str(err).split(": ", 1)[1]) from None
        return out


@dataclass
class RunConfig:
    seed: int = 0
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(unknown[0], "unknown section")
        for name in SECTIONS[1:]:
            if name in raw and not isinstance(raw[name], dict):
                raise ConfigError(name, "section must be an object")
        seed = raw.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed", "must be an integer")
        train_raw = dict(raw.get("train", {}))
        train_raw.setdefault("seed", seed)
        try:
            return cls(
                seed=seed,
                network=NetworkSpec.from_dict(raw.get("network", {})),
                train=TrainConfig.from_dict(train_raw),
                loss=LossConfig.from_dict(raw.get("loss", {})),
                data=DataConfig.from_dict(raw.get("data", {})),
            )
        except TypeError as err:
            # wrong value types surface from the dataclass constructors
            raise ConfigError("<config>", str(err)) from None

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        return cls.from_dict(_read_json(path))


def _read_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(os.path.basename(path), f"invalid JSON ({err.msg} at line {err.lineno})") from None


def parse_scales(text: str) -> List[float]:
    """``0.6:1.4:0.2`` (inclusive range) or a comma list ``0.75,1.0``."""
    try:
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(round((hi - lo) / step)) + 1
            return [round(lo + i * step, 10) for i in range(n)]
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError("--scales", f"cannot parse {text!r}") from None


def parse_ints(text: str, name: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(name, f"expected comma-separated integers, got {text!r}") from None


def _load_samples(directory: Optional[str], spec: Optional[SyntheticSpec]):
    if directory:
        samples, manifest = read_dataset(directory)
        return samples, manifest.get("channel_means") or channel_means(samples)
    if spec is not None:
        samples = generate_shapes_dataset(spec)
        return samples, channel_means(samples)
    return None, None


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    raw = _read_json(args.spec)
    # accept a whole run config (uses data.synthetic) or a bare synthetic spec
    if isinstance(raw, dict) and set(raw) & set(SECTIONS):
        cfg = RunConfig.from_dict(raw)
        spec = cfg.data.synthetic
        if spec is None:
            raise ConfigError("data.synthetic", "gen needs a synthetic spec")
    else:
        spec = SyntheticSpec.from_dict(raw)
    samples = generate_shapes_dataset(spec)
    write_dataset(samples, args.out, spec.num_classes)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = cfg.train.seed = args.seed
    if args.max_iter is not None:
        cfg.train.max_iter = args.max_iter
    if args.lr is not None:
        cfg.train.base_lr = args.lr
    cfg.train.validate()
    samples, means = _load_samples(cfg.data.train_dir, cfg.data.synthetic)
    if samples is None:
        raise ConfigError("data", "need data.train_dir or data.synthetic")
    eval_set, _ = _load_samples(cfg.data.eval_dir, cfg.data.eval_synthetic)
    net = FDNet(cfg.network, seed=cfg.seed)
    result = train(net, samples, cfg.train, cfg.loss, means=means, out_dir=args.out, eval_set=eval_set)
    last = result.log[-1]
    print(f"trained {len(result.log)} iterations, final loss {last[2]:.4f}; wrote {os.path.join(args.out, 'model.fdn')}")
    return 0


def _predict_one(job):
    path, image, scales, flip, means = job
    net = _worker_net(path)
    return predict_multiscale(net, image, scales, flip, means)[0]


_NET_CACHE = {}


def _worker_net(path):
    if path not in _NET_CACHE:
        _NET_CACHE[path] = load_checkpoint(path)
    return _NET_CACHE[path]


def evaluate_checkpoint(
    checkpoint: str,
    data_dir: str,
    scales: Sequence[float] = (1.0,),
    flip: bool = False,
    trimap_widths: Sequence[int] = DEFAULT_TRIMAP_WIDTHS,
    jobs: int = 1,
) -> dict:
    net = load_checkpoint(checkpoint)
    samples, manifest = read_dataset(data_dir)
    means = manifest.get("channel_means")
    ignore = manifest.get("ignore", IGNORE_LABEL)
    jobs_list = [(checkpoint, s.image, list(scales), flip, means) for s in samples]
    if jobs > 1 and len(samples) > 1:
        # ordered map: results come back in sample order regardless of timing
        with Pool(min(jobs, len(samples))) as pool:
            preds = pool.map(_predict_one, jobs_list)
    else:
        _NET_CACHE[checkpoint] = net
        preds = [_predict_one(j) for j in jobs_list]
    preds = np.stack(preds)
    gt = np.stack([s.labels for s in samples])
    report = compute_metrics(preds, gt, net.spec.num_classes, ignore)
    report.trimap = {w: trimap_miou(preds, gt, w, net.spec.num_classes, ignore) for w in trimap_widths}
    return report.to_dict()


def cmd_eval(args) -> int:
    scales = parse_scales(args.scales) if args.scales else [1.0]
    widths = parse_ints(args.trimap, "--trimap") if args.trimap else list(DEFAULT_TRIMAP_WIDTHS)
    metrics = evaluate_checkpoint(args.checkpoint, args.data, scales, args.flip, widths, args.jobs)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_predict(args) -> int:
    net = load_checkpoint(args.checkpoint)
    image = read_netpbm(args.image)
    if image.ndim != 3:
        raise ValueError(f"{args.image}: expected a P6 colour image")
    scales = parse_scales(args.scales) if args.scales else [1.0]
    labels, _ = predict_multiscale(net, image, scales, args.flip)
    write_netpbm(labels.astype(np.int64), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_checks

    ops = [o.strip() for o in args.ops.split(",")] if args.ops else ["all"]
    try:
        results = run_checks(ops)
    except KeyError as err:
        raise ConfigError("--ops", err.args[0]) from None
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bands(args) -> int:
    labels = read_netpbm(args.labels)
    if labels.ndim != 2:
        raise ValueError(f"{args.labels}: expected a P5 label raster")
    kernels = parse_ints(args.kernels, "--kernels")
    LossConfig([1.0] * (len(kernels) + 1), kernels).validate()
    bm = band_partition(labels, kernels, args.ignore)
    write_netpbm(np.minimum(bm.bands * 50, 255), args.out)
    counts = ", ".join(f"S{j + 1}={c}" for j, c in enumerate(bm.counts()))
    print(f"{counts}; ignored={int(bm.ignore.sum())}; wrote {args.out}")
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
    else:
        cfg = RunConfig.load(args.config)
        net = FDNet(cfg.network, seed=cfg.seed)
    print(format_report(net))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdnet", description="Fully dense encoder-decoder segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    parser.add_argument("--jobs", type=int, default=1, help="max worker processes (eval only; training is single-context)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic shapes dataset")
    p.add_argument("--spec", required=True, help="JSON synthetic spec or run config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics JSON for a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scales", help="lo:hi:step or comma list (default 1.0)")
    p.add_argument("--flip", action="store_true")
    p.add_argument("--trimap", help="band widths (default 1,5,10,20,40)")
    p.add_argument("--out", help="also write the JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="label a single PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales")
    p.add_argument("--flip", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient table")
    p.add_argument("--ops", default="all", help="all, or comma-separated op names")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bands", help="band partition of a label raster as a PGM")
    p.add_argument("--labels", required=True)
    p.add_argument("--kernels", required=True, help="e.g. 10,20,30,40")
    p.add_argument("--out", required=True)
    p.add_argument("--ignore", type=int, default=IGNORE_LABEL)
    p.set_defaults(func=cmd_bands)

    p = sub.add_parser("inspect", help="parameter count and aggregation edges")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("config error: --jobs: must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - top-level diagnostic
        logger.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
