"""``ssi-lab`` command line.

Usage::

    ssi-lab <sie|landscape|sgd-run|gain|phase|ode> [--config FILE] [--out DIR]
            [--seed N] [--workers N] [--format csv|json]

Exit status is 0 on success, 1 for configuration errors and 2 for numerical
failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings

from ..errors import ConfigError, NumericalError
from .config import FORMATS, KINDS, load_spec
from .emit import emit_plot_data
from .experiments import run_experiment
from .plotting import render

__all__ = ["main", "build_parser"]

log = logging.getLogger("ssi_lab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment file")
    common.add_argument("--out", help="output directory (default results/<kind>)")
    common.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--format", choices=FORMATS, help="table format")
    common.add_argument("--no-plots", action="store_true", help="skip PNG rendering")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="ssi-lab", description="Sequence single-index experiments.")
    sub = parser.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    helps = {
        "sie": "sequence information exponents of Hermite-product targets",
        "landscape": "loss on the overlap circle and phase labels",
        "sgd-run": "replicated one-pass SGD runs with trajectories",
        "gain": "tied vs untied recovery times against sequence length",
        "phase": "positional/semantic phase census and SGD probabilities",
        "ode": "overlap flow hitting times against dimension",
    }
    for kind in KINDS:
        sub.add_parser(kind, parents=[common], help=helps[kind])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = load_spec(args.kind, args.config, args.out, args.seed, args.workers, args.format)
        (spec.out / "config.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = run_experiment(spec)
        for w in caught:
            log.warning("%s", w.message)
        written = []
        for figure, rows in result.tables.items():
            written.append(emit_plot_data(rows, figure, spec.out, spec.format))
            if not args.no_plots:
                png = render(figure, rows, spec.out, result.summary)
                if png is not None:
                    written.append(png)
        summary = dict(result.summary, spec_hash=spec.hash)
        (spec.out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=str) + "\n")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result.summary, sort_keys=True, default=str))
    for path in written:
        log.info("wrote %s", path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
