"""Command-line entry points: dataset generation, training, evaluation,
single-sample inference, and the orientation experiments.

Every failure exits non-zero with a single machine-parsable line on stderr:
``E_CONFIG`` (exit 2), ``E_DATA`` (exit 3), ``E_NUMERIC`` (exit 4).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import training
from .config import RunConfig, load_config
from .errors import ConfigError, CvlocError, DataError


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="cvloc",
        description="Dense-uncertainty cross-view metric localization on synthetic maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a single config key (repeatable)",
        )

    p = sub.add_parser("gen", help="generate the synthetic train/val/test datasets")
    common(p)

    p = sub.add_parser("train", help="train the configured model")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", help="parameter file (defaults to the run's best)")

    p = sub.add_parser("infer", help="export the heat map for one sample")
    common(p)
    p.add_argument("--checkpoint", help="parameter file (defaults to the run's best)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--index", type=int, default=0, help="sample index within the split")
    p.add_argument("--sample-file", help="CVML file with ground/satellite tensors")
    p.add_argument("--out", help="output directory (defaults to <run>/infer)")

    p = sub.add_parser("orient", help="orientation classification and robustness")
    common(p)
    p.add_argument("--checkpoint", help="parameter file (defaults to the run's best)")
    return parser


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, val = item.partition("=")
        overrides[key.strip()] = val.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return cfg.with_overrides(overrides) if overrides else cfg


def _default_checkpoint(cfg: RunConfig, args) -> str:
    if getattr(args, "checkpoint", None):
        return args.checkpoint
    path = os.path.join(cfg.run_dir(), "best.cvml")
    if not os.path.exists(path):
        raise DataError(f"no checkpoint at {path}; train first or pass --checkpoint")
    return path


def _cmd_gen(args):
    cfg = _load_run_config(args)
    base = training.generate_datasets(cfg, log=print)
    print(f"datasets written under {base}")


def _cmd_train(args):
    cfg = _load_run_config(args)
    run_dir = cfg.run_dir()
    result = training.train_loop(cfg, run_dir, log=print)
    print(f"checkpoints: {result['best']} (best) {result['final']} (final)")


def _cmd_eval(args):
    cfg = _load_run_config(args)
    ckpt = _default_checkpoint(cfg, args)
    training.eval_run(cfg, ckpt, log=print)
    print(f"reports under {os.path.join(cfg.run_dir(), 'eval')}")


def _cmd_infer(args):
    cfg = _load_run_config(args)
    ckpt = _default_checkpoint(cfg, args)
    if args.sample_file:
        from . import checkpoint as ckpt_io
        from .synthdata import Sample

        arrays = ckpt_io.load_tensors(args.sample_file)
        if "ground" not in arrays or "satellite" not in arrays:
            raise DataError(f"{args.sample_file} must contain ground and satellite tensors")
        sample = Sample(
            ground=arrays["ground"],
            satellite=arrays["satellite"],
            gt_pixel=(0.0, 0.0),
            heading=0.0,
            meters_per_px=cfg["data.meters_per_px"],
            kind="positive",
        )
    else:
        samples = training.load_split(cfg, args.split)
        if not 0 <= args.index < len(samples):
            raise DataError(
                f"sample index {args.index} out of range for {args.split} "
                f"({len(samples)} samples)"
            )
        sample = samples[args.index]
    out_dir = args.out or os.path.join(cfg.run_dir(), "infer")
    training.infer(cfg, ckpt, sample, out_dir, log=print)


def _cmd_orient(args):
    cfg = _load_run_config(args)
    ckpt = _default_checkpoint(cfg, args)
    training.orientation_run(cfg, ckpt, log=print)


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "orient": _cmd_orient,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except CvlocError as exc:
        print(f"{exc.prefix}: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
