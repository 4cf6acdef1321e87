"""``glare`` command line: gen-data, train, enhance, eval, inspect-ckpt."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import CheckpointError, checkpoint_load
from .data import gen_dataset, read_manifest, read_png
from .losses import MetricReport

PNG_GLOB = "*.png"


def _pairs(pred: Path, gt: Path) -> list[tuple[Path, Path]]:
    if pred.is_dir() != gt.is_dir():
        raise ValueError("--pred and --gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred, gt)]
    out = []
    for p in sorted(pred.glob(PNG_GLOB)):
        g = gt / p.name
        if not g.exists():
            raise FileNotFoundError(f"no ground truth for {p.name} in {gt}")
        out.append((p, g))
    if not out:
        raise FileNotFoundError(f"no PNG files in {pred}")
    return out


def cmd_gen_data(args) -> int:
    cfg = config_mod.load(args.config)
    root = args.out or cfg.data.root
    count = args.count or cfg.data.count
    size = args.size or cfg.data.size
    m = gen_dataset(root, count, size, seed=cfg.train.seed)
    print(f"wrote {len(m.entries)} pairs ({len(m.split('train'))} train, {len(m.split('val'))} val) to {root}")
    return 0


def cmd_train(args) -> int:
    from .train import train_stage

    cfg = config_mod.load(args.config)
    manifest = read_manifest(cfg.data.root)
    res = train_stage(args.stage, cfg, manifest, args.resume)
    print(f"stage {args.stage} checkpoint: {res.checkpoint}")
    for k, v in res.summary.items():
        if isinstance(v, float):
            print(f"{k}: {v:.4f}")
    return 0


def cmd_enhance(args) -> int:
    from .train import enhance

    cfg = config_mod.load(args.config) if args.config else None
    report = enhance(args.ckpt, args.input, args.output, args.beta, args.tau, args.seed, args.gt, cfg)
    print(f"wrote {args.output}")
    if report is not None:
        print("\n".join(report.lines()))
    return 0


def cmd_eval(args) -> int:
    report = MetricReport()
    for p, g in _pairs(Path(args.pred), Path(args.gt)):
        report.add(p.name, read_png(p), read_png(g))
    print("\n".join(report.lines()))
    print(json.dumps(report.to_dict()))
    return 0


def cmd_inspect(args) -> int:
    tensors, meta = checkpoint_load(args.ckpt)
    print(json.dumps(meta, indent=2, sort_keys=True))
    total = 0
    for name, arr in tensors.items():
        total += arr.size
        print(f"{name:48s} {str(arr.shape):20s} mean={float(np.mean(arr)) if arr.size else 0.0:+.4e}")
    print(f"{len(tensors)} tensors, {total} values")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glare", description="Low-light enhancement with a codebook prior and latent flow.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic low/normal-light pairs")
    p.add_argument("--config")
    p.add_argument("--out", help="dataset directory (default: data.root)")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--config")
    p.add_argument("--resume", help="checkpoint of the same stage to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("enhance", help="enhance one image with a stage 3 checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gt")
    p.add_argument("--config", help="config matching the checkpoint's model section")
    p.set_defaults(fn=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect-ckpt", help="print checkpoint metadata and tensors")
    p.add_argument("ckpt")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("config", help="print the documented default config")
    p.set_defaults(fn=lambda a: print(config_mod.documented_defaults(), end="") or 0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (CheckpointError, FileNotFoundError, ValueError, KeyError) as err:
        print(f"glare: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
