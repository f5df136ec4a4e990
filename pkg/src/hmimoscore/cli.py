"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical failure.
"""
import argparse
import logging
import sys

from . import bench
from .channel import ChannelError
from .estimators import EstimatorError
from .numerics import NumericsError
from .scorenet import ScoreNetError, TrainingDiverged
from .snr import SnrError, VscConfig
from .storage import StorageError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _add_common(p: argparse.ArgumentParser, cells: bool = True) -> None:
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    if cells:
        p.add_argument("--env", choices=["isotropic", "truncated"], help="restrict to one environment")
        p.add_argument("--snr", type=float, help="restrict to one SNR in dB")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmimoscore", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("generate", help="synthesize train and test datasets"))
    _add_common(sub.add_parser("train", help="train one score network per cell"))
    _add_common(sub.add_parser("evaluate", help="NMSE report for every estimator"))

    p = sub.add_parser("estimate-snr", help="blind 1/rho estimation over a dataset file")
    p.add_argument("dataset")
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--group", type=int, default=1, help="pilots pooled per estimate")
    p.add_argument("--out", help="directory for CSV and JSON output")

    p = sub.add_parser("sweep-invsnr", help="score-estimator NMSE over a grid of assumed 1/rho")
    _add_common(p, cells=False)
    p.add_argument("--env", choices=["isotropic", "truncated"], default="isotropic")
    p.add_argument("--snr", type=float, help="true SNR in dB (default: config sweep_snr_db)")
    p.add_argument("--grid", type=float, nargs="+", help="swept 1/rho values")

    p = sub.add_parser("timing", help="per-pilot latency of score and oracle estimators")
    p.add_argument("--antennas", type=int, nargs="+", default=[256, 1024])
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--out", help="directory for timing.csv")
    return parser


def _run(args) -> object:
    if args.command == "estimate-snr":
        _, manifest = bench.read_pilots(args.dataset)
        vsc = VscConfig.for_antennas(manifest.n_antennas, args.window)
        return bench.estimate_snr_file(args.dataset, vsc, args.group, args.out)
    if args.command == "timing":
        return bench.timing(args.antennas, args.window, repeats=args.repeats, out_dir=args.out)
    cfg = bench.load_config(args.config, args.set)
    bench.save_config(cfg, cfg.output / "config.yaml")
    if args.command == "generate":
        return [str(p) for p in bench.generate(cfg, args.env, args.snr)]
    if args.command == "train":
        return [str(p) for p in bench.train_cells(cfg, args.env, args.snr)]
    if args.command == "evaluate":
        return bench.evaluate(cfg, args.env, args.snr)["cells"]
    if args.command == "sweep-invsnr":
        return bench.sweep_inv_snr(cfg, args.env, args.snr, args.grid)
    raise bench.ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = _run(args)
    except bench.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StorageError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericsError, ChannelError, ScoreNetError, TrainingDiverged, SnrError, EstimatorError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if isinstance(result, list):
        for item in result:
            print(bench.json.dumps(item, default=float) if isinstance(item, dict) else item)
    else:
        print(bench.json.dumps(result, indent=2, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
