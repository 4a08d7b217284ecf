"""Subcommand handlers.

Each handler takes the parsed argparse namespace, does its work through the
library, writes stdout / output files and returns an exit code. Errors are
left to propagate; src.main maps them onto exit codes.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from src.config import EXIT_OK
from src.errors import InputFormatError, InvalidParameterError
from src.experiments.mc import (
    EmpiricalSummary,
    run_clt_experiment,
    run_detection_experiment,
    universality_check,
    write_summary,
)
from src.formats.experiment_file import build_plan, read_document, resolve_seed
from src.formats.manifest import RunManifest, write_atomic, write_manifest
from src.formats.serialization import (
    encode_report,
    looks_like_eigenvalue_file,
    read_data_matrix,
    read_eigenvalues,
)
from src.inference.estimate import (
    DetectionConfig,
    SpikeReport,
    detect_from_data,
    detect_spikes,
    group_detections,
)
from src.population.model import BulkMeasure, build_case1, build_case2
from src.population.sampler import Distribution, standardize_rows
from src.theory.clt import CltRegime, clt_params, model_clt_table, omega_variance, sigma2
from src.theory.spectral import StieltjesContext, rho

logger = logging.getLogger(__name__)


def parse_bulk(text: str) -> BulkMeasure:
    """'t:w,t:w,...' (or a bare 't' for a point mass)."""
    atoms: list[tuple[float, float]] = []
    try:
        for part in text.split(","):
            if ":" in part:
                t, w = part.split(":", 1)
                atoms.append((float(t), float(w)))
            else:
                atoms.append((float(part), 1.0))
    except ValueError:
        raise InvalidParameterError(f"cannot parse bulk {text!r}; expected t:w,t:w,...") from None
    atoms.sort()
    return BulkMeasure(tuple(atoms))


def _emit(doc: dict, args: argparse.Namespace, command: str, filename: str, started: float) -> None:
    """Print the JSON document, and with --out also write it plus a manifest."""
    text = json.dumps(doc, indent=2)
    print(text)
    if args.out is None:
        return
    out = Path(args.out)
    path = out / filename
    write_atomic(path, text + "\n")
    manifest = RunManifest(
        command=command,
        config=_echo(args),
        seed=seed_for(args),
        wall_clock_seconds=round(time.monotonic() - started, 3),
        outputs=[str(path)],
    )
    write_manifest(manifest, out)


def _echo(args: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v)
            for k, v in vars(args).items() if k not in ("handler",)}


# --- phase ---

def cmd_phase(args: argparse.Namespace) -> int:
    started = time.monotonic()
    ctx = StieltjesContext(c=args.c, bulk=parse_bulk(args.bulk))
    value = rho(args.alpha, ctx)
    doc = {
        "alpha": value.alpha,
        "c": ctx.c,
        "phi": value.phi,
        "phi_prime": value.phi_prime,
        "rho": value.rho,
        "regime": str(value.regime),
        "critical": value.critical,
    }
    _emit(doc, args, "phase", "phase.json", started)
    return EXIT_OK


# --- clt-params ---

def _fourth_moment(args: argparse.Namespace) -> float | None:
    if args.fourth_moment is not None:
        return args.fourth_moment
    if args.dist is not None:
        return Distribution.parse(args.dist).fourth_moment
    return None


def cmd_clt_params(args: argparse.Namespace) -> int:
    started = time.monotonic()
    regime = CltRegime(args.regime)
    fourth = _fourth_moment(args) if regime == CltRegime.DIAGONAL else None
    if regime == CltRegime.DIAGONAL and (fourth is None or not math.isfinite(fourth)):
        raise InvalidParameterError("the diagonal regime needs a finite --fourth-moment (or --dist)")

    if args.case is not None:
        model = build_case1(args.p) if args.case == "case1" else build_case2(args.p, args.rho)
        doc = {
            "case": args.case,
            "p": model.p,
            "n": args.n,
            "c": model.p / args.n,
            "regime": str(regime),
            "groups": model_clt_table(model, args.n, regime, fourth),
        }
        _emit(doc, args, "clt-params", "clt_params.json", started)
        return EXIT_OK

    if args.alpha is None or args.c is None:
        raise InvalidParameterError("clt-params needs --alpha and --c, or --case")
    ctx = StieltjesContext(c=args.c, bulk=parse_bulk(args.bulk))
    params = clt_params(args.alpha, ctx, regime, fourth)
    doc = {
        "alpha": params.alpha,
        "c": ctx.c,
        "regime": str(regime),
        "phi": params.phi,
        "kappa": params.kappa_s,
        "theta": params.theta,
        "nu": params.nu,
        "beta_x": params.beta_x,
        "var_diag": omega_variance(params, diagonal=True),
        "var_off": omega_variance(params, diagonal=False),
        "sigma2": sigma2(params),
    }
    _emit(doc, args, "clt-params", "clt_params.json", started)
    return EXIT_OK


# --- simulate ---

def _print_summary(summary: EmpiricalSummary) -> None:
    print(f"{summary.kind}: {summary.completed}/{summary.reps} replications, "
          f"{len(summary.failures)} failed")
    for g in summary.groups:
        var = g.variance
        var_text = ", ".join(f"{v:.4f}" for v in var) if var is not None else "undefined"
        notes = []
        if g.sigma2_theory is not None:
            notes.append(f"theory {g.sigma2_theory:.4f}")
        if g.sigma2_ref is not None:
            notes.append(f"finite-p {g.sigma2_ref:.4f}")
        theory = f" ({', '.join(notes)})" if notes else ""
        print(f"  alpha={g.alpha:g} ranks={list(g.ranks)} var={var_text}{theory}")
    for k in summary.ks:
        print(f"  alpha={k.alpha:g} KS={k.statistic:.4f} critical={k.critical:.4f} "
              f"{'pass' if k.passed else 'FAIL'}")
    if summary.frequency:
        table = ", ".join(f"{k}: {v:.3f}" for k, v in summary.frequency.items())
        print(f"  frequency of M0: {table}")
        print(f"  exact locations: {summary.location_accuracy:.3f}")


def cmd_simulate(args: argparse.Namespace) -> int:
    started = time.monotonic()
    doc = read_document(args.config) if args.config else {}
    overrides = {
        "kind": args.kind,
        "seed": args.seed,
        "threads": args.threads,
        "reps": args.reps,
        "p": args.p,
        "n": args.n,
    }
    plan = build_plan(doc, overrides)
    if plan.kind == "clt":
        summary = run_clt_experiment(plan.config)
    elif plan.kind == "detect":
        summary = run_detection_experiment(plan.config, plan.detection)
    else:
        summary = universality_check(plan.config, plan.compare)

    _print_summary(summary)
    out = Path(args.out)
    written = write_summary(summary, out)
    manifest = RunManifest(
        command=f"simulate {plan.kind}",
        config=plan.settings,
        seed=plan.config.seed,
        wall_clock_seconds=round(time.monotonic() - started, 3),
        outputs=[str(p) for p in written],
    )
    write_manifest(manifest, out)
    return EXIT_OK


# --- detect ---

def _detection_config(args: argparse.Namespace, c: float) -> DetectionConfig:
    regime = CltRegime(args.regime)
    return DetectionConfig(
        c=c,
        ratio_threshold=args.ratio_threshold,
        regime=regime,
        fourth_moment=args.fourth_moment,
        bulk=parse_bulk(args.bulk) if args.bulk is not None else None,
        filter_plugin_sums=args.filter_plugin_sums,
    )


def _is_eigenvalue_input(args: argparse.Namespace) -> bool:
    return args.eigenvalues or (not args.transpose and looks_like_eigenvalue_file(args.input))


def _load_eigenvalues(args: argparse.Namespace) -> tuple[np.ndarray, float]:
    """(eigenvalues descending, c) from an eigenvalue list."""
    eigs = read_eigenvalues(args.input)
    if args.c is not None:
        return eigs, args.c
    if args.n is not None:
        return eigs, eigs.size / args.n
    raise InvalidParameterError("an eigenvalue list needs --c or --n")


def _load_data(args: argparse.Namespace) -> np.ndarray:
    """p x n data matrix, standardized per variable unless --no-standardize."""
    X = read_data_matrix(args.input, transpose=args.transpose)
    p, n = X.shape
    if n < 2:
        raise InputFormatError("raw data needs at least two observations")
    logger.info("read %d variables x %d observations from %s", p, n, args.input)
    return standardize_rows(X) if args.standardize else X


def report_document(report: SpikeReport, c: float) -> dict:
    doc = json.loads(encode_report(report))
    doc["c"] = c
    doc["groups"] = [
        {"ranks": list(g.ranks), "multiplicity": g.multiplicity, "mean_alpha_hat": g.mean_alpha_hat}
        for g in group_detections(report)
    ]
    return doc


def cmd_detect(args: argparse.Namespace) -> int:
    started = time.monotonic()
    if _is_eigenvalue_input(args):
        eigs, c = _load_eigenvalues(args)
        report = detect_spikes(eigs, _detection_config(args, c))
    else:
        X = _load_data(args)
        c = X.shape[0] / X.shape[1]
        report = detect_from_data(X, _detection_config(args, c))
    logger.info("M0 = %d at ranks %s", report.m_hat, list(report.locations))
    _emit(report_document(report, c), args, "detect", "report.json", started)
    return EXIT_OK


def print_error(message: str) -> None:
    print(f"spikelab: error: {message}", file=sys.stderr)


def seed_for(args: argparse.Namespace) -> int:
    return resolve_seed(getattr(args, "seed", None), None)
