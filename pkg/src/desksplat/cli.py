"""Command-line entry point.

Subcommands: generate (synthetic dataset), train, render, eval, ablate.
Exit codes: 0 ok, 2 configuration error, 3 numeric abort. The environment
variable DESKSPLAT_THREADS sets the tile-parallel thread count (default 1);
output is identical for any fixed thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericsError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="desksplat",
        description="Desk-scale Gaussian splatting trainer with transient "
                    "masking and appearance modeling.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--spec", help="scene spec JSON (defaults apply if omitted)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--features", action="store_true",
                   help="also write .splf feature maps of the final images")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--dataset", help="dataset directory (overrides config)")
    t.add_argument("--out", help="output run directory (overrides config)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--mode", choices=["3dgs-baseline", "robustsplat",
                                      "robustsplat-plusplus"])
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--resume", help="checkpoint to resume from")

    r = sub.add_parser("render", help="render dataset views from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--dataset", default=None)
    r.add_argument("--what", nargs="+", default=["raw"],
                   choices=["raw", "affine", "mask-overlay"])

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", default=None)
    e.add_argument("--protocol", default="full",
                   choices=["full", "left-fit-right-eval"])
    e.add_argument("--out", default=None, help="write the report CSV here")

    a = sub.add_parser("ablate", help="run a toggle matrix with shared seed")
    a.add_argument("--config", required=True)
    a.add_argument("--out", help="output root (overrides config)")
    a.add_argument("--toggles", nargs="+", required=True,
                   choices=["mask", "dg", "mb", "mr", "appearance"])
    return p


def _cmd_generate(args) -> int:
    from .synthdata import SyntheticSceneSpec, generate, load_spec

    spec = load_spec(args.spec) if args.spec else SyntheticSceneSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    ds = generate(spec, args.out, write_features=args.features)
    print(f"dataset written to {ds.root} "
          f"({len(ds.train_views)} train / {len(ds.test_views)} test views)")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .training import (RunConfig, Trainer, config_from_dict, load_config)

    if args.resume:
        from .synthdata import load as load_dataset

        tr = Trainer.from_checkpoint(
            args.resume,
            dataset=load_dataset(args.dataset) if args.dataset else None,
            out_dir=args.out)
    else:
        if args.config:
            cfg = load_config(args.config)
        else:
            if not (args.dataset and args.out):
                raise ConfigError("train needs --config or --dataset/--out")
            cfg = config_from_dict({"dataset": args.dataset, "out_dir": args.out})
        overrides = {}
        if args.dataset:
            overrides["dataset"] = args.dataset
        if args.out:
            overrides["out_dir"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.mode:
            overrides["mode"] = args.mode
        if args.iters is not None:
            overrides["total_iters"] = args.iters
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
        tr = Trainer(cfg)
    summary = tr.train()
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_render(args) -> int:
    from .synthdata import load as load_dataset
    from .training import render_views

    ds = load_dataset(args.dataset) if args.dataset else None
    written = render_views(args.checkpoint, args.out, dataset=ds,
                           what=tuple(args.what))
    print(f"wrote {len(written)} images to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .metrics import write_metrics_csv
    from .synthdata import load as load_dataset
    from .training import evaluate_checkpoint

    ds = load_dataset(args.dataset) if args.dataset else None
    report = evaluate_checkpoint(args.checkpoint, dataset=ds,
                                 protocol=args.protocol)
    if args.out:
        write_metrics_csv(args.out, report.rows)
    print(json.dumps({
        "protocol": args.protocol,
        "mean_psnr": report.mean_psnr(),
        "mean_ssim": report.mean_ssim(),
        "mean_iou_transient": report.mean_iou_transient(),
        "mean_iou_static": report.mean_iou_static(),
        "wall_clock_s": report.wall_clock_s,
    }, indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .training import load_config, run_ablation

    cfg = load_config(args.config)
    if args.out:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    rows = run_ablation(cfg, args.toggles)
    print(json.dumps(rows, indent=1, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numeric abort: {exc} (iteration={exc.iteration}, "
              f"last checkpoint={exc.last_checkpoint})", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
