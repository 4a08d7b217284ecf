"""spikelab entry point.

Usage:
    Phase transition:   python -m src.main phase --alpha 4 --c 0.5
    CLT parameters:     python -m src.main clt-params --alpha 3 --c 0.5
    Whole-model table:  python -m src.main clt-params --case case1 --p 500 --n 1000
    Monte Carlo:        python -m src.main simulate clt --config runs/case1.toml --out runs/case1
    Spike detection:    python -m src.main detect data.csv --transpose --out report/
"""

from __future__ import annotations

import argparse
import logging
import sys

from src.cli import commands
from src.config import (
    DEFAULT_RHO,
    EXIT_NUMERICAL,
    EXIT_USAGE,
    RATIO_THRESHOLD,
    VERSION,
)
from src.errors import InputFormatError, InvalidParameterError, NumericalError


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--seed", type=int, default=None,
        help="Base seed (falls back to the config file, then SPIKELAB_SEED)",
    )
    parser.add_argument(
        "--out", type=str, default=None, metavar="DIR",
        help="Write outputs and manifest.json into DIR",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true",
        help="Enable debug logging",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikelab", description="Spiked covariance models: phase transitions, CLTs, detection",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    phase = sub.add_parser("phase", help="phi, phi', limit rho and regime of a spike")
    phase.add_argument("--alpha", type=float, required=True, help="Population spike")
    phase.add_argument("--c", type=float, required=True, help="Dimension ratio p/n")
    phase.add_argument("--bulk", type=str, default="1", help="Bulk atoms t:w,t:w,... (default: point mass at 1)")
    _common(phase)
    phase.set_defaults(handler=commands.cmd_phase)

    clt = sub.add_parser("clt-params", help="Parameters of the limiting law of a spike")
    clt.add_argument("--alpha", type=float, default=None)
    clt.add_argument("--c", type=float, default=None)
    clt.add_argument("--bulk", type=str, default="1")
    clt.add_argument("--regime", choices=["delocalized", "diagonal"], default="delocalized")
    clt.add_argument("--fourth-moment", type=float, default=None, help="E x^4 (diagonal regime)")
    clt.add_argument("--dist", choices=["gaussian", "rademacher"], default=None,
                     help="Take E x^4 from a named entry law")
    clt.add_argument("--case", choices=["case1", "case2"], default=None,
                     help="Tabulate every spike group of a reference design")
    clt.add_argument("--p", type=int, default=500)
    clt.add_argument("--n", type=int, default=1000)
    clt.add_argument("--rho", type=float, default=DEFAULT_RHO)
    _common(clt)
    clt.set_defaults(handler=commands.cmd_clt_params)

    sim = sub.add_parser("simulate", help="Replicated Monte Carlo experiment")
    sim.add_argument("kind", choices=["clt", "detect", "universality"])
    sim.add_argument("--config", type=str, default=None, help="TOML or JSON experiment file")
    sim.add_argument("--threads", type=int, default=None, help="Worker threads (default: all cores)")
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--p", type=int, default=None)
    sim.add_argument("--n", type=int, default=None)
    _common(sim)
    sim.set_defaults(handler=commands.cmd_simulate, out="out")

    det = sub.add_parser("detect", help="Estimate the number and location of spikes")
    det.add_argument("input", type=str, help="p x n data CSV, or one eigenvalue per line")
    det.add_argument("--c", type=float, default=None, help="p/n for an eigenvalue list")
    det.add_argument("--n", type=int, default=None, help="Sample size for an eigenvalue list")
    det.add_argument("--eigenvalues", action="store_true", help="Treat the input as an eigenvalue list")
    det.add_argument("--transpose", action="store_true", help="Input has samples as rows")
    det.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=True,
                     help="Center and scale each variable (default: on)")
    det.add_argument("--ratio-threshold", type=float, default=RATIO_THRESHOLD)
    det.add_argument("--regime", choices=["delocalized", "diagonal"], default="delocalized")
    det.add_argument("--fourth-moment", type=float, default=None)
    det.add_argument("--bulk", type=str, default=None,
                     help="Known population bulk t:w,t:w,... (default: fitted from the spectrum)")
    det.add_argument("--filter-plugin-sums", action=argparse.BooleanOptionalAction, default=False,
                     help="Also apply the ratio filter to the sums at phi^ (default: off)")
    _common(det)
    det.set_defaults(handler=commands.cmd_detect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )

    try:
        return args.handler(args)
    except (InvalidParameterError, InputFormatError) as exc:
        commands.print_error(str(exc))
        return EXIT_USAGE
    except NumericalError as exc:
        commands.print_error(str(exc))
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
