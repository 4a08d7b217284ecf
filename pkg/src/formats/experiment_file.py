"""Experiment files.

TOML and JSON carry the same keys:

    kind = "clt"            # clt | detect | universality
    case = "case1"          # case1 | case2 | custom
    p = 500
    n = 1000
    rho = 0.5               # case2 only
    dist = "gaussian"       # gaussian | rademacher | heavy_tail
    compare_dist = "rademacher"   # universality only
    reps = 1000
    seed = 7
    threads = 8
    targets = [4.0]
    truncate_eta = 0.25
    record_omega = true
    regime = "diagonal"     # theory column of clt summaries
    model = {...}           # custom case: model document

    [detect]
    ratio_threshold = 0.2
    regime = "delocalized"
    fourth_moment = 3.0
    filter_plugin_sums = false   # true also filters the sums at phi^

Command-line overrides win over file values. Unknown keys are rejected.
"""

from __future__ import annotations

import json
import logging
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

from src.config import DEFAULT_N, DEFAULT_P, DEFAULT_REPS, DEFAULT_RHO, DEFAULT_SEED, SEED_ENV_VAR
from src.errors import ConfigError, InputFormatError, InvalidParameterError
from src.experiments.mc import ExperimentConfig
from src.inference.estimate import DetectionConfig
from src.population.model import PopulationModel, build_case1, build_case2, model_from_document
from src.population.sampler import Distribution
from src.theory.clt import CltRegime

logger = logging.getLogger(__name__)

KINDS = ("clt", "detect", "universality")
CASES = ("case1", "case2", "custom")

_TOP_KEYS = {
    "kind", "case", "p", "n", "rho", "dist", "reps", "seed", "threads", "targets",
    "truncate_eta", "record_omega", "compare_dist", "regime", "model", "detect",
}
_DETECT_KEYS = {"ratio_threshold", "regime", "fourth_moment", "filter_plugin_sums"}


@dataclass(frozen=True)
class ExperimentPlan:
    """A fully resolved experiment file.

    `compare` is the second run of a universality check; `settings` echoes
    every resolved value for the run manifest.
    """
    kind: str
    config: ExperimentConfig
    detection: DetectionConfig | None
    compare: ExperimentConfig | None
    settings: dict


def resolve_seed(flag: int | None, file_value: int | None,
                 environ: Mapping[str, str] | None = None) -> int:
    """--seed, then the file, then SPIKELAB_SEED, then the package default."""
    if flag is not None:
        return flag
    if file_value is not None:
        return file_value
    env = os.environ if environ is None else environ
    raw = env.get(SEED_ENV_VAR)
    if raw:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR}={raw!r} is not an integer") from None
    return DEFAULT_SEED


def read_document(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc.strerror}") from exc
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise InputFormatError(f"{path}: {exc.msg}", exc.lineno) from exc
    else:
        try:
            doc = tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as exc:
            raise InputFormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return doc


def _typed(doc: dict, key: str, kind: type, default=None):
    value = doc.get(key, default)
    if value is None:
        return None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{key} must be an integer")
    if not isinstance(value, kind):
        raise ConfigError(f"{key} must be of type {kind.__name__}, got {value!r}")
    return value


def _build_model(doc: dict) -> PopulationModel:
    case = _typed(doc, "case", str, "case1")
    if case not in CASES:
        raise ConfigError(f"case must be one of {', '.join(CASES)}, got {case!r}")
    if case == "custom":
        model_doc = doc.get("model")
        if not isinstance(model_doc, dict):
            raise ConfigError("case 'custom' needs a model table")
        model = model_from_document({**model_doc, "case": "custom"})
        if "p" in doc and doc["p"] != model.p:
            raise ConfigError(f"p={doc['p']} disagrees with the model document (p={model.p})")
        return model
    p = _typed(doc, "p", int, DEFAULT_P)
    if case == "case1":
        return build_case1(p)
    return build_case2(p, _typed(doc, "rho", float, DEFAULT_RHO))


def _regime(value: str | None, key: str) -> CltRegime | None:
    if value is None:
        return None
    try:
        return CltRegime(value)
    except ValueError:
        raise ConfigError(f"{key} must be 'delocalized' or 'diagonal', got {value!r}") from None


def _detection(doc: dict, c: float, dist: Distribution) -> DetectionConfig:
    table = doc.get("detect", {})
    if not isinstance(table, dict):
        raise ConfigError("detect must be a table")
    unknown = sorted(set(table) - _DETECT_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys in [detect]: {', '.join(unknown)}")
    regime = _regime(_typed(table, "regime", str), "detect.regime") or CltRegime.DELOCALIZED
    fourth = _typed(table, "fourth_moment", float)
    if regime == CltRegime.DIAGONAL and fourth is None:
        fourth = dist.fourth_moment
    kwargs: dict = {"c": c, "regime": regime, "fourth_moment": fourth}
    threshold = _typed(table, "ratio_threshold", float)
    if threshold is not None:
        kwargs["ratio_threshold"] = threshold
    filtered = _typed(table, "filter_plugin_sums", bool)
    if filtered is not None:
        kwargs["filter_plugin_sums"] = filtered
    return DetectionConfig(**kwargs)


def build_plan(doc: dict, overrides: Mapping[str, object] | None = None,
               environ: Mapping[str, str] | None = None) -> ExperimentPlan:
    """Merge overrides (None values ignored) into `doc` and resolve everything."""
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    flag_seed = None
    merged = dict(doc)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            flag_seed = value
            continue
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown override {key!r}")
        merged[key] = value

    kind = _typed(merged, "kind", str, "clt")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}, got {kind!r}")
    try:
        model = _build_model(merged)
        dist = Distribution.parse(_typed(merged, "dist", str, "gaussian"))
        n = _typed(merged, "n", int, DEFAULT_N)
        seed = resolve_seed(flag_seed, _typed(merged, "seed", int), environ)
        targets = tuple(float(t) for t in merged.get("targets", ()))
        config = ExperimentConfig(
            model=model,
            n=n,
            dist=dist,
            reps=_typed(merged, "reps", int, DEFAULT_REPS),
            seed=seed,
            targets=targets,
            threads=_typed(merged, "threads", int),
            truncate_eta=_typed(merged, "truncate_eta", float),
            record_omega=bool(_typed(merged, "record_omega", bool, False)),
            regime=_regime(_typed(merged, "regime", str), "regime"),
        )
        detection = _detection(merged, model.p / n, dist) if kind == "detect" else None
        compare = None
        if kind == "universality":
            other = _typed(merged, "compare_dist", str)
            if other is None:
                raise ConfigError("universality runs need compare_dist")
            compare = ExperimentConfig(
                model=model, n=n, dist=Distribution.parse(other), reps=config.reps,
                seed=seed, targets=targets, threads=config.threads,
                truncate_eta=config.truncate_eta, regime=config.regime,
            )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidParameterError):
            raise
        raise ConfigError(str(exc)) from exc

    settings = {
        "kind": kind,
        "case": model.case,
        "p": model.p,
        "n": n,
        "rho": model.rho,
        "dist": str(dist.kind),
        "compare_dist": str(compare.dist.kind) if compare else None,
        "reps": config.reps,
        "seed": seed,
        "threads": config.threads,
        "targets": list(targets),
        "truncate_eta": config.truncate_eta,
        "record_omega": config.record_omega,
        "regime": str(config.regime) if config.regime else None,
        "model_fingerprint": model.fingerprint(),
    }
    if detection is not None:
        settings["detect"] = {
            "ratio_threshold": detection.ratio_threshold,
            "regime": str(detection.regime),
            "fourth_moment": detection.fourth_moment,
            "filter_plugin_sums": detection.filter_plugin_sums,
        }
    logger.debug("resolved experiment: %s", settings)
    return ExperimentPlan(kind=kind, config=config, detection=detection, compare=compare, settings=settings)


def load_experiment(path: str | Path, overrides: Mapping[str, object] | None = None,
                    environ: Mapping[str, str] | None = None) -> ExperimentPlan:
    return build_plan(read_document(path), overrides, environ)
