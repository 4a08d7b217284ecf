"""JSON documents and CSV readers.

JSON codecs come in encode/decode pairs; floats are written with repr
precision so decode(encode(x)) == x. CSV input is read with pandas; any
malformed row raises InputFormatError carrying the 1-based file line.

Report document:
    {"m_hat": int,
     "detections": [{"rank", "l", "alpha_hat", "phi_hat", "sigma2", "ci": [lo, hi]}],
     "ranks": [{"rank", "l", ..., "accepted", "note"}],
     "bulk": {"atoms": [[t, w]], "bands": [[lo, hi]], "size"} | absent}
"""

from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from src.errors import InputFormatError
from src.inference.estimate import BulkFit, RankTest, SpikeReport
from src.population.model import BulkMeasure, PopulationModel, model_from_document, model_to_document

if TYPE_CHECKING:
    from src.experiments.mc import EmpiricalSummary, GroupSummary

_PARSER_LINE = re.compile(r"line (\d+)")


# --- Models ---

def encode_model(model: PopulationModel) -> str:
    return json.dumps(model_to_document(model), indent=2)


def decode_model(text: str) -> PopulationModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"invalid model JSON: {exc.msg}", exc.lineno) from exc
    return model_from_document(doc)


# --- Spike reports ---

def _rank_to_document(t: RankTest) -> dict:
    doc: dict = {
        "rank": t.rank,
        "l": t.l,
        "alpha_hat": t.alpha_hat,
        "phi_hat": t.phi_hat,
        "sigma2": t.sigma2,
        "ci": [t.lower, t.upper] if t.lower is not None else None,
        "accepted": t.accepted,
    }
    if t.note is not None:
        doc["note"] = t.note
    return doc


def _rank_from_document(doc: dict) -> RankTest:
    ci = doc.get("ci") or [None, None]
    return RankTest(
        rank=int(doc["rank"]),
        l=float(doc["l"]),
        alpha_hat=doc.get("alpha_hat"),
        phi_hat=doc.get("phi_hat"),
        sigma2=doc.get("sigma2"),
        lower=ci[0],
        upper=ci[1],
        accepted=bool(doc.get("accepted", True)),
        note=doc.get("note"),
    )


def report_to_document(report: SpikeReport) -> dict:
    doc: dict = {
        "m_hat": report.m_hat,
        "detections": [_rank_to_document(d) for d in report.detections],
        "ranks": [_rank_to_document(t) for t in report.intervals_all],
    }
    fit = report.bulk_fit
    if fit is not None:
        doc["bulk"] = {
            "atoms": [[t, w] for t, w in fit.measure.atoms],
            "bands": [[lo, hi] for lo, hi in fit.bands],
            "size": fit.size,
        }
    return doc


def _fit_from_document(doc: dict | None) -> BulkFit | None:
    if doc is None:
        return None
    return BulkFit(
        measure=BulkMeasure(tuple((float(t), float(w)) for t, w in doc["atoms"])),
        bands=tuple((float(lo), float(hi)) for lo, hi in doc["bands"]),
        size=int(doc["size"]),
    )


def report_from_document(doc: dict) -> SpikeReport:
    try:
        detections = tuple(_rank_from_document(d) for d in doc["detections"])
        tests = tuple(_rank_from_document(t) for t in doc.get("ranks", []))
        m_hat = int(doc["m_hat"])
        fit = _fit_from_document(doc.get("bulk"))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFormatError(f"malformed spike report: {exc}") from exc
    if m_hat != len(detections):
        raise InputFormatError(f"m_hat={m_hat} but {len(detections)} detections listed")
    return SpikeReport(m_hat=m_hat, detections=detections, intervals_all=tests, bulk_fit=fit)


def encode_report(report: SpikeReport) -> str:
    return json.dumps(report_to_document(report), indent=2)


def decode_report(text: str) -> SpikeReport:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"invalid report JSON: {exc.msg}", exc.lineno) from exc
    return report_from_document(doc)


# --- Experiment summaries (write-only; samples go to CSV) ---

def _finite(x: float | None) -> float | None:
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _group_to_document(g: GroupSummary) -> dict:
    variance = g.variance
    covariance = g.covariance
    return {
        "alpha": g.alpha,
        "multiplicity": g.multiplicity,
        "ranks": list(g.ranks),
        "phi_n": g.phi_n,
        "count": g.count,
        "mean": [float(v) for v in g.mean] if g.count else None,
        "variance": [float(v) for v in variance] if variance is not None else None,
        "variance_defined": g.variance_defined,
        "covariance": covariance.tolist() if covariance is not None else None,
        "trace_variance": g.trace_variance,
        "sigma2_theory": _finite(g.sigma2_theory),
        "phi_ref": _finite(g.phi_ref),
        "sigma2_ref": _finite(g.sigma2_ref),
    }


def summary_to_document(summary: EmpiricalSummary) -> dict:
    doc: dict = {
        "kind": summary.kind,
        "reps": summary.reps,
        "completed": summary.completed,
        "failures": [{"replication": f.rep, "message": f.message} for f in summary.failures],
        "elapsed_seconds": round(summary.elapsed, 3),
    }
    if summary.groups:
        doc["groups"] = [_group_to_document(g) for g in summary.groups]
    if summary.omega:
        doc["omega"] = [
            {"alpha": o.alpha, "var_diag": o.var_diag, "var_off": o.var_off,
             "trace_var": o.trace_var, "ratio": o.ratio}
            for o in summary.omega
        ]
    if summary.frequency:
        doc["frequency"] = {str(k): v for k, v in summary.frequency.items()}
        doc["mode"] = summary.mode()
        doc["location_accuracy"] = summary.location_accuracy
        doc["mean_alpha_hat"] = {str(k): v for k, v in summary.mean_alpha_hat.items()}
    if summary.compare_groups:
        doc["compare_groups"] = [_group_to_document(g) for g in summary.compare_groups]
    if summary.ks:
        doc["ks"] = [
            {"alpha": k.alpha, "statistic": k.statistic, "critical": k.critical,
             "level": k.level, "passed": k.passed}
            for k in summary.ks
        ]
    return doc


def summary_to_json(summary: EmpiricalSummary) -> str:
    return json.dumps(summary_to_document(summary), indent=2)


# --- CSV input ---

def _read_cells(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, header=None, dtype=str, skip_blank_lines=False,
                            skipinitialspace=True, keep_default_na=False, na_values=[""])
    except pd.errors.EmptyDataError as exc:
        raise InputFormatError(f"{path} is empty") from exc
    except pd.errors.ParserError as exc:
        match = _PARSER_LINE.search(str(exc))
        line = int(match.group(1)) if match else None
        raise InputFormatError("ragged row: more fields than the first row", line) from exc
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc.strerror}") from exc
    # a trailing blank line is not a row
    while len(frame) and frame.iloc[-1].isna().all():
        frame = frame.iloc[:-1]
    return frame


def _to_numbers(cells: pd.DataFrame) -> np.ndarray:
    missing = cells.isna()
    if missing.to_numpy().any():
        row = int(np.flatnonzero(missing.any(axis=1).to_numpy())[0])
        raise InputFormatError(f"ragged row: missing field, expected {cells.shape[1]} fields", row + 1)
    numbers = cells.apply(pd.to_numeric, errors="coerce")
    bad = numbers.isna().to_numpy()
    if bad.any():
        row, col = (int(v) for v in np.argwhere(bad)[0])
        raise InputFormatError(f"non-numeric cell {cells.iat[row, col]!r} in column {col + 1}", row + 1)
    values = numbers.to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        row = int(np.flatnonzero(~np.isfinite(values).all(axis=1))[0])
        raise InputFormatError("non-finite value", row + 1)
    return values


def read_data_matrix(path: str | Path, transpose: bool = False) -> np.ndarray:
    """p x n data (rows = variables). `transpose` reads samples-as-rows files."""
    values = _to_numbers(_read_cells(Path(path)))
    return values.T.copy() if transpose else values


def read_eigenvalues(path: str | Path) -> np.ndarray:
    """One eigenvalue per line, returned in descending order."""
    values = _to_numbers(_read_cells(Path(path)))
    if values.shape[1] != 1:
        raise InputFormatError(f"expected one eigenvalue per line, found {values.shape[1]} columns", 1)
    return np.sort(values[:, 0])[::-1]


def looks_like_eigenvalue_file(path: str | Path) -> bool:
    """True when the first line holds a single field."""
    with open(path) as fh:
        first = fh.readline()
    return first.count(",") == 0
