"""Command line entry point: ``act run``, ``act sweep`` and ``act plot``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

import argparse
import logging
import sys

from .config import MODES, ConfigError, load_config
from .experiment import SWEEP_AXES, parse_values, run_experiment, sweep
from .plots import emit_plots

log = logging.getLogger("actseg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; those are config errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_common(p):
    p.add_argument("--config", help="YAML config file (default: the packaged default)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted override, e.g. act.eta=0.05 or runs=1; repeatable",
    )


def build_parser():
    parser = _Parser(prog="act", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one experiment mode over seeded runs")
    run.add_argument("--mode", choices=MODES, help="experiment mode (overrides the config)")
    _add_common(run)

    sw = sub.add_parser("sweep", help="repeat the experiment over values of one axis")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--mode", choices=MODES)
    _add_common(sw)

    pl = sub.add_parser("plot", help="draw SVG diagnostics from a report directory")
    pl.add_argument("--in", dest="input", required=True, help="directory holding reports")
    pl.add_argument("--out", help="where to write the SVGs (default: the input directory)")
    return parser


def _resolve(args):
    overrides = list(args.set)
    if args.mode:
        overrides.append(f"mode={args.mode}")
    if args.seed is not None:
        overrides.append(f"master_seed={args.seed}")
    config = load_config(args.config, overrides)
    return config, args.out or config.output_dir


def _print_rows(rows, keys):
    for row in rows:
        print("\t".join(str(row[k]) for k in keys))


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"act: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "plot":
            for path in emit_plots(args.input, args.out):
                print(path)
            return EXIT_OK
        config, out = _resolve(args)
        if args.command == "run":
            rows = run_experiment(config, out)
            _print_rows(rows, ("mode", "metric", "class", "mean", "std"))
        else:
            values = parse_values(args.axis, args.values)
            rows = sweep(config, args.axis, values, out)
            _print_rows(rows, ("axis", "value", "metric", "class", "mean", "std"))
    except ConfigError as exc:
        print(f"act: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"act: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
