"""Command-line surface: one subcommand per experiment protocol.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical
failure (divergence, non-finite results, degenerate fits).
"""

from __future__ import annotations

import argparse
import sys

from . import protocols
from .config import MODEL_KINDS, apply_overrides, default_config, load_config
from .exceptions import (
    ConfigError,
    DegenerateFit,
    InvalidArgument,
    InvalidModel,
    NumericalError,
    ParseError,
    TrainingDiverged,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_common(sub, with_dataset: bool = True):
    sub.add_argument("--config", metavar="PATH",
                     help="experiment config (INI); defaults when omitted")
    sub.add_argument("--epochs", type=int, help="override training epochs")
    sub.add_argument("--seed", type=int,
                     help="override the model and shuffle seeds")
    sub.add_argument("--variant", choices=MODEL_KINDS,
                     help="override the model variant")
    sub.add_argument("--out", metavar="DIR",
                     help="override the output directory")
    if with_dataset:
        sub.add_argument("--dataset", metavar="DIR",
                         help="dataset directory (default <out>/dataset)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relpu",
        description="Point cloud upsampling experiments: paired "
                    "local-patch and whole-shape-segment models.")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data",
                              help="generate the synthetic shape dataset")
    _add_common(gen, with_dataset=False)

    train = commands.add_parser("train", help="train one model variant")
    _add_common(train)
    train.add_argument("--resume", metavar="CKPT",
                       help="checkpoint to continue training from")

    ev = commands.add_parser("evaluate",
                             help="score a checkpoint on held-out shapes")
    _add_common(ev)
    ev.add_argument("--checkpoint", required=True, metavar="CKPT")
    ev.add_argument("--split", default="test", choices=("train", "test"))
    ev.add_argument("--files", nargs="+", metavar="XYZ",
                    help="score standalone .xyz files instead of a split")

    noise = commands.add_parser(
        "noise", help="noise robustness sweep over one or more checkpoints")
    _add_common(noise)
    noise.add_argument("--checkpoint", required=True, nargs="+",
                       metavar="CKPT")

    ablate = commands.add_parser(
        "ablate", help="train and compare all variants under one budget")
    _add_common(ablate)
    ablate.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    sal = commands.add_parser(
        "saliency", help="per-point contribution maps and radial fit")
    _add_common(sal)
    sal.add_argument("--checkpoint", required=True, metavar="CKPT")
    sal.add_argument("--shape-id", help="dataset shape to analyze")
    sal.add_argument("--patch-index", type=int, default=0)
    sal.add_argument("--sample-file", metavar="XYZ",
                     help=".xyz cloud to analyze instead of a dataset patch")
    sal.add_argument("--alpha", type=float, default=0.0,
                     help="radial enhancement exponent offset")
    return parser


def _configure(args):
    cfg = load_config(args.config) if args.config else default_config()
    return apply_overrides(cfg, epochs=args.epochs, seed=args.seed,
                           variant=args.variant, out=args.out)


def _run(args) -> int:
    cfg = _configure(args)
    if args.command == "gen-data":
        manifest = protocols.cmd_gen_data(cfg)
        print(f"wrote {len(manifest['shapes'])} shapes to "
              f"{protocols.dataset_dir_for(cfg)}")
    elif args.command == "train":
        result = protocols.cmd_train(cfg, dataset_dir=args.dataset,
                                     resume=args.resume)
        print(f"trained {cfg.variant} for {cfg.epochs} epochs: final mean "
              f"loss {result.final_loss:.6g}")
        print(f"checkpoint: {result.final_checkpoint}")
    elif args.command == "evaluate":
        if args.files:
            rows = protocols.cmd_evaluate_files(cfg, args.checkpoint,
                                                args.files)
            print(f"scored {len(rows)} files")
        else:
            rows = protocols.cmd_evaluate(cfg, args.checkpoint,
                                          dataset_dir=args.dataset,
                                          split=args.split)
            mean = rows[-1]
            print(f"{args.split} mean over {len(rows) - 1} shapes: "
                  f"cd {mean.cd:.6g}, hd {mean.hd:.6g} (1e-3 units)")
    elif args.command == "noise":
        rows = protocols.cmd_noise(cfg, args.checkpoint,
                                   dataset_dir=args.dataset)
        for variant, beta, shape_id, cd, hd in rows:
            if shape_id == "mean":
                print(f"{variant} beta={beta}: mean cd {cd}, hd {hd}")
    elif args.command == "ablate":
        results = protocols.cmd_ablate(cfg, dataset_dir=args.dataset,
                                       seeds=tuple(args.seeds))
        for row in results:
            print(f"{row.variant} seed {row.seed}: cd {row.cd:.6g}, "
                  f"hd {row.hd:.6g}, encoder params {row.encoder_params}")
    elif args.command == "saliency":
        reports = protocols.cmd_saliency(
            cfg, args.checkpoint, dataset_dir=args.dataset,
            shape_id=args.shape_id, patch_index=args.patch_index,
            sample_file=args.sample_file, alpha=args.alpha)
        for mode, (report, fit) in reports.items():
            print(f"{mode}: slope {fit.slope:.6g}, "
                  f"r_squared {fit.r_squared:.4g}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, ParseError, InvalidArgument, InvalidModel,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, TrainingDiverged, DegenerateFit) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
