"""Command-line entry point: ``isnet <subcommand>``.

Exit codes: 0 success, 1 failed check, 2 usage, 3 data or format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .errors import DataError, IsnetError

log = logging.getLogger("isnet")


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 1x2048x128x128, got {text!r}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"shape needs four positive extents, got {text!r}")
    return dims


def _resolve_paths(cfg, config_path: str):
    """Relative data paths in a config are taken relative to the config file."""
    from pathlib import Path

    base = Path(config_path).parent
    fix = {}
    for key in ("dataset", "data_dir"):
        val = getattr(cfg, key)
        if val and not Path(val).is_absolute():
            fix[key] = str(base / val)
    return replace(cfg, **fix)


def cmd_gen_data(args) -> int:
    from .config import load_config
    from .data import DatasetSpec, write_dataset

    spec = load_config(DatasetSpec, args.spec) if args.spec else DatasetSpec()
    counts = write_dataset(spec, args.out)
    print(f"wrote {counts['train']} train and {counts['val']} val samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .config import load_config
    from .train import TrainConfig, train

    cfg = _resolve_paths(load_config(TrainConfig, args.config), args.config)
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir)
    result = train(cfg)
    for line in result.log:
        print(line)
    if result.final_miou is not None:
        print(f"final val mIoU\t{result.final_miou:.6f}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import Checkpoint, restore
    from .data import load_split
    from .losses import format_report, miou
    from .train import evaluate

    model = restore(Checkpoint.load(args.checkpoint))
    ious, mean = miou(evaluate(model, load_split(args.data, args.split)))
    print(format_report(ious, mean))
    return 0


def cmd_ablation(args) -> int:
    from .config import load_config
    from .train import TrainConfig, ablation, format_ablation

    cfg = _resolve_paths(load_config(TrainConfig, args.config), args.config) if args.config else TrainConfig()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    print(format_ablation(ablation(cfg, seeds=seeds, workers=args.workers)))
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, run

    ok = True
    for name, err, passed, secs in run(args.module):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}\t{name}\t{err:.3e}\t(tol {TOLERANCE:g}, {secs:.1f}s)")
    return 0 if ok else 1


def cmd_profile(args) -> int:
    from .profiler import format_table, profile, time_head

    reports = [profile(v, args.shape) for v in ("ilcm", "slcm", "isnet")]
    print(f"# probe shape {'x'.join(map(str, args.shape))}, FLOP convention v1")
    print(format_table(reports, tsv=args.tsv))
    if args.time:
        shape = _shape(args.time)
        for v in ("ilcm", "slcm", "isnet"):
            ms = 1e3 * time_head(v, shape, repetitions=args.reps)
            print(f"time\t{v}\t{'x'.join(map(str, shape))}\t{ms:.2f} ms (host CPU median)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic dataset as ISEG files")
    s.add_argument("--spec", help="dataset spec config (key = value)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train one variant")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="mIoU of a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablation", help="train all four variants and tabulate mIoU")
    s.add_argument("--config")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_ablation)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", default="all", choices=["all", "ilcm", "slcm", "fusion", "loss", "isnet"])
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("profile", help="analytic params/FLOPs of the context heads")
    s.add_argument("--shape", type=_shape, default=(1, 2048, 128, 128))
    s.add_argument("--tsv", action="store_true", help="tab-separated output")
    s.add_argument("--time", metavar="SHAPE", help="also time the heads on this feature-map shape")
    s.add_argument("--reps", type=int, default=5)
    s.set_defaults(func=cmd_profile)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except IsnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
