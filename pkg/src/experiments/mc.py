"""Replicated experiments.

Three kinds of run share one replication loop (see replication.py):

- clt: renormalized spiked eigenvalues gamma = sqrt(n)(l_j / phi_n - 1) per spike group,
  optionally together with the Omega_M block at phi_n;
- detect: the spike-count estimator M0 and the detected ranks;
- universality: two clt runs under different entry laws, compared by KS per group.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import ks_2samp

from src.config import CSV_DIGITS, DEFAULT_REPS, DEFAULT_SEED, KS_LEVEL
from src.errors import ConfigError, InvalidParameterError
from src.experiments.replication import ReplicationBatch, ReplicationFailure, run_replications
from src.formats.serialization import summary_to_json
from src.inference.estimate import DetectionConfig, detect_spikes
from src.population.model import PopulationModel, SpikeGroup, bulk_of
from src.population.sampler import (
    Distribution,
    TruncationConfig,
    draw_matrix,
    eigvals_desc,
    sample_cov,
    truncate_center_rescale,
)
from src.theory.clt import CltRegime, gamma_from_eigs, model_clt_table, omega_statistic
from src.theory.spectral import phi_n

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    """One replicated experiment.

    Attributes:
        model: Population model; fixes p.
        n: Sample size.
        dist: Entry law of X.
        reps: Number of replications.
        seed: Base seed; replication r uses the stream (seed, r).
        targets: Spike values to record; empty records every group.
        threads: Worker threads; None uses every core.
        truncate_eta: If set, X is truncated at eta sqrt(n) and re-standardized.
        record_omega: Also evaluate the Omega_M block at phi_n for each group.
        regime: Limiting-variance regime used for the theory column; None skips it.
    """
    model: PopulationModel
    n: int
    dist: Distribution = field(default_factory=Distribution)
    reps: int = DEFAULT_REPS
    seed: int = DEFAULT_SEED
    targets: tuple[float, ...] = ()
    threads: int | None = None
    truncate_eta: float | None = None
    record_omega: bool = False
    regime: CltRegime | None = None

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise InvalidParameterError(f"reps must be >= 1, got {self.reps}")
        if self.n < 1:
            raise InvalidParameterError(f"n must be >= 1, got {self.n}")
        if self.seed < 0:
            raise InvalidParameterError(f"seed must be non-negative, got {self.seed}")
        known = {g.alpha for g in self.model.spec.spikes}
        missing = [t for t in self.targets if t not in known]
        if missing:
            raise ConfigError(f"targets {missing} are not spikes of the model")

    @property
    def p(self) -> int:
        return self.model.p

    @property
    def c_n(self) -> float:
        return self.model.p / self.n

    def target_groups(self) -> list[SpikeGroup]:
        groups = list(self.model.spec.spikes)
        if not self.targets:
            return groups
        return [g for g in groups if g.alpha in self.targets]


@dataclass(frozen=True, slots=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray


@dataclass(frozen=True)
class GroupSummary:
    """gamma samples of one spike group, one row per completed replication.

    `phi_ref` and `sigma2_ref` are the finite-p reference values in which the
    other spikes count as part of the bulk; `n` is the sample size behind
    the samples.
    """
    alpha: float
    multiplicity: int
    ranks: tuple[int, ...]
    phi_n: float
    samples: np.ndarray
    sigma2_theory: float | None = None
    phi_ref: float | None = None
    sigma2_ref: float | None = None
    n: int | None = None

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    @property
    def variance_defined(self) -> bool:
        return self.count >= 2

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def variance(self) -> np.ndarray | None:
        return self.samples.var(axis=0, ddof=1) if self.variance_defined else None

    @property
    def covariance(self) -> np.ndarray | None:
        if self.multiplicity < 2 or not self.variance_defined:
            return None
        return np.cov(self.samples, rowvar=False)

    @property
    def trace_variance(self) -> float | None:
        """Variance of the sum of the group's gamma values."""
        if not self.variance_defined:
            return None
        return float(self.samples.sum(axis=1).var(ddof=1))

    def recentred(self) -> np.ndarray:
        """gamma moved from phi_n to phi_ref: sqrt(n)(l / phi_ref - 1)."""
        if self.phi_ref is None or self.n is None:
            return self.samples
        root = math.sqrt(self.n)
        return (self.samples / root + 1.0) * (self.phi_n / self.phi_ref) * root - root

    def drift(self) -> float | None:
        """Largest |mean| in standard errors over the group's columns, at phi_ref when known."""
        if not self.variance_defined:
            return None
        samples = self.recentred()
        se = np.sqrt(samples.var(axis=0, ddof=1) / self.count)
        return float(np.max(np.abs(samples.mean(axis=0)) / se))

    def histogram(self) -> Histogram:
        counts, edges = np.histogram(np.sort(self.samples.ravel()), bins="fd")
        return Histogram(edges=edges, counts=counts)


@dataclass(frozen=True, slots=True)
class OmegaSummary:
    """Entry variances of the recorded Omega_M blocks of one group."""
    alpha: float
    var_diag: float
    var_off: float | None
    trace_var: float

    @property
    def ratio(self) -> float | None:
        if self.var_off is None or self.var_off == 0:
            return None
        return self.var_diag / self.var_off


@dataclass(frozen=True, slots=True)
class KsResult:
    alpha: float
    statistic: float
    critical: float
    level: float = KS_LEVEL

    @property
    def passed(self) -> bool:
        return self.statistic < self.critical


@dataclass(frozen=True)
class EmpiricalSummary:
    """Aggregate of a run. Built from replication-ordered results only."""
    kind: str
    reps: int
    completed: int
    failures: tuple[ReplicationFailure, ...] = ()
    groups: tuple[GroupSummary, ...] = ()
    omega: tuple[OmegaSummary, ...] = ()
    frequency: dict[int, float] = field(default_factory=dict)
    location_accuracy: float | None = None
    mean_alpha_hat: dict[int, float] = field(default_factory=dict)
    compare_groups: tuple[GroupSummary, ...] = ()
    ks: tuple[KsResult, ...] = ()
    elapsed: float = 0.0

    def group(self, alpha: float) -> GroupSummary:
        for g in self.groups:
            if g.alpha == alpha:
                return g
        raise KeyError(alpha)

    def mode(self) -> int | None:
        if not self.frequency:
            return None
        return max(self.frequency.items(), key=lambda kv: (kv[1], -kv[0]))[0]


# --- Replication bodies ---

def _draw(config: ExperimentConfig, rep: int) -> np.ndarray:
    X = draw_matrix(config.dist, config.p, config.n, config.seed, rep)
    if config.truncate_eta is not None:
        X = truncate_center_rescale(X, TruncationConfig(config.truncate_eta), config.n)
    return X


def _spectrum(config: ExperimentConfig, X: np.ndarray) -> np.ndarray:
    return eigvals_desc(sample_cov(config.model, X))


def _offsets(model: PopulationModel) -> dict[float, slice]:
    """Position of each group's spikes inside D1."""
    out: dict[float, slice] = {}
    start = 0
    for g in model.spec.spikes:
        out[g.alpha] = slice(start, start + g.multiplicity)
        start += g.multiplicity
    return out


def _clt_replication(config: ExperimentConfig, rep: int) -> tuple[dict[float, np.ndarray], dict[float, np.ndarray]]:
    X = _draw(config, rep)
    gamma = gamma_from_eigs(_spectrum(config, X), config.model, config.c_n)
    wanted = {g.alpha for g in config.target_groups()}
    values = {g.alpha: v for g, v in zip(gamma.groups, gamma.values) if g.alpha in wanted}
    blocks: dict[float, np.ndarray] = {}
    if config.record_omega:
        offsets = _offsets(config.model)
        for g, phi_k in zip(gamma.groups, gamma.phis):
            if g.alpha not in wanted:
                continue
            omega = omega_statistic(phi_k, X, config.model).matrix
            sl = offsets[g.alpha]
            blocks[g.alpha] = omega[sl, sl]
    return values, blocks


def _theory(config: ExperimentConfig) -> dict[float, dict]:
    if config.regime is None:
        return {}
    fourth = config.dist.fourth_moment
    if config.regime == CltRegime.DIAGONAL and not math.isfinite(fourth):
        logger.info("no theory column: the fourth moment of %s is infinite", config.dist.kind)
        return {}
    table = model_clt_table(config.model, config.n, config.regime,
                            fourth if config.regime == CltRegime.DIAGONAL else None)
    return {row["alpha"]: row for row in table}


def _theory_columns(row: dict | None) -> dict:
    if row is None:
        return {}
    return {"sigma2_theory": row["sigma2"], "phi_ref": row["phi_ref"], "sigma2_ref": row["sigma2_ref"]}


def _omega_summary(alpha: float, blocks: list[np.ndarray]) -> OmegaSummary:
    stack = np.stack(blocks)
    m = stack.shape[1]
    diag = stack[:, np.arange(m), np.arange(m)].ravel()
    iu = np.triu_indices(m, k=1)
    off = stack[:, iu[0], iu[1]].ravel()
    trace = np.trace(stack, axis1=1, axis2=2)
    ddof = 1 if len(blocks) > 1 else 0
    return OmegaSummary(
        alpha=alpha,
        var_diag=float(diag.var(ddof=ddof)),
        var_off=float(off.var(ddof=ddof)) if off.size else None,
        trace_var=float(trace.var(ddof=ddof)),
    )


def run_clt_experiment(config: ExperimentConfig) -> EmpiricalSummary:
    """gamma samples per target group over all replications."""
    started = time.monotonic()
    logger.info("clt run: case=%s p=%d n=%d dist=%s reps=%d seed=%d",
                config.model.case, config.p, config.n, config.dist.kind, config.reps, config.seed)
    batch: ReplicationBatch = run_replications(
        lambda rep: _clt_replication(config, rep), config.reps, config.threads,
    )
    ordered = batch.ordered()
    theory = _theory(config)
    phis = _phi_n(config)

    groups: list[GroupSummary] = []
    omegas: list[OmegaSummary] = []
    for g in config.target_groups():
        rows = [values[g.alpha] for _, (values, _) in ordered]
        samples = np.vstack(rows) if rows else np.empty((0, g.multiplicity))
        groups.append(GroupSummary(
            alpha=g.alpha, multiplicity=g.multiplicity, ranks=g.indices,
            phi_n=phis[g.alpha], samples=samples, n=config.n, **_theory_columns(theory.get(g.alpha)),
        ))
        if config.record_omega and ordered:
            omegas.append(_omega_summary(g.alpha, [blocks[g.alpha] for _, (_, blocks) in ordered]))

    elapsed = time.monotonic() - started
    logger.info("clt run finished: %d/%d replications in %.1fs", batch.completed, config.reps, elapsed)
    return EmpiricalSummary(
        kind="clt",
        reps=config.reps,
        completed=batch.completed,
        failures=tuple(batch.failures),
        groups=tuple(groups),
        omega=tuple(omegas),
        elapsed=elapsed,
    )


def _phi_n(config: ExperimentConfig) -> dict[float, float]:
    """phi_n(alpha_k) at c_n = p/n with the finite-p bulk."""
    bulk_n = bulk_of(config.model)
    return {g.alpha: phi_n(g.alpha, config.c_n, bulk_n) for g in config.model.spec.spikes}


def _detect_replication(config: ExperimentConfig, det: DetectionConfig, rep: int) -> tuple[int, tuple[int, ...], tuple[float, ...]]:
    eigs = _spectrum(config, _draw(config, rep))
    report = detect_spikes(eigs, det)
    return report.m_hat, report.locations, tuple(d.alpha_hat for d in report.detections)


def run_detection_experiment(config: ExperimentConfig, det: DetectionConfig) -> EmpiricalSummary:
    """Frequency table of M0, exact-location accuracy and mean alpha^ per rank."""
    started = time.monotonic()
    det = replace(det, c=config.c_n)
    logger.info("detect run: case=%s p=%d n=%d dist=%s reps=%d seed=%d",
                config.model.case, config.p, config.n, config.dist.kind, config.reps, config.seed)
    batch = run_replications(
        lambda rep: _detect_replication(config, det, rep), config.reps, config.threads,
    )
    ordered = batch.ordered()
    truth = tuple(sorted(config.model.spec.spike_ranks))

    counts: dict[int, int] = {}
    exact = 0
    alpha_sums: dict[int, list[float]] = {}
    for _, (m_hat, locations, alphas) in ordered:
        counts[m_hat] = counts.get(m_hat, 0) + 1
        if locations == truth:
            exact += 1
        for rank, a in zip(locations, alphas):
            alpha_sums.setdefault(rank, []).append(a)
    total = len(ordered)
    frequency = {k: counts[k] / total for k in sorted(counts)} if total else {}
    mean_alpha = {rank: float(np.mean(v)) for rank, v in sorted(alpha_sums.items())}

    elapsed = time.monotonic() - started
    logger.info("detect run finished: mode M0=%s in %.1fs",
                max(counts, key=counts.get) if counts else None, elapsed)
    return EmpiricalSummary(
        kind="detect",
        reps=config.reps,
        completed=batch.completed,
        failures=tuple(batch.failures),
        frequency=frequency,
        location_accuracy=exact / total if total else None,
        mean_alpha_hat=mean_alpha,
        elapsed=elapsed,
    )


# --- Universality ---

def ks_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sup-distance between the empirical CDFs of two samples."""
    a = np.ravel(np.asarray(a, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise InvalidParameterError("KS distance needs two non-empty samples")
    return float(ks_2samp(a, b).statistic)


def ks_critical(level: float, n1: int, n2: int) -> float:
    """Asymptotic two-sample critical value c(level) sqrt((n1 + n2) / (n1 n2))."""
    c_alpha = math.sqrt(-math.log(level / 2.0) / 2.0)
    return c_alpha * math.sqrt((n1 + n2) / (n1 * n2))


def universality_check(config_a: ExperimentConfig, config_b: ExperimentConfig,
                       level: float = KS_LEVEL) -> EmpiricalSummary:
    """Run the same clt experiment under two entry laws and compare per group."""
    if config_a.model.fingerprint() != config_b.model.fingerprint():
        raise ConfigError("universality check needs the same population model in both runs")
    if (config_a.n, config_a.reps) != (config_b.n, config_b.reps):
        raise ConfigError("universality check needs matching n and reps")
    if config_a.target_groups() != config_b.target_groups():
        raise ConfigError("universality check needs the same target groups")

    first = run_clt_experiment(config_a)
    second = run_clt_experiment(config_b)
    results: list[KsResult] = []
    for ga, gb in zip(first.groups, second.groups):
        stat = ks_distance(ga.samples, gb.samples)
        crit = ks_critical(level, ga.samples.size, gb.samples.size)
        results.append(KsResult(alpha=ga.alpha, statistic=stat, critical=crit, level=level))
        logger.info("alpha=%g: KS=%.4f critical=%.4f (%s)", ga.alpha, stat, crit,
                    "same law" if stat < crit else "laws differ")
    return replace(
        first,
        kind="universality",
        failures=first.failures + second.failures,
        compare_groups=second.groups,
        ks=tuple(results),
        elapsed=first.elapsed + second.elapsed,
    )


# --- Output ---

def _samples_frame(groups: tuple[GroupSummary, ...], label: str) -> pd.DataFrame:
    frames = []
    for g in groups:
        frame = pd.DataFrame(g.samples, columns=[f"gamma_{i + 1}" for i in range(g.multiplicity)])
        frame.insert(0, "replication", np.arange(g.count))
        frame.insert(0, "alpha", g.alpha)
        frame.insert(0, "run", label)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def _histogram_frame(groups: tuple[GroupSummary, ...], label: str) -> pd.DataFrame:
    rows = []
    for g in groups:
        if g.count == 0:
            continue
        hist = g.histogram()
        for left, right, count in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            rows.append({"run": label, "alpha": g.alpha, "bin_left": left,
                         "bin_right": right, "count": int(count)})
    return pd.DataFrame(rows)


def write_summary(summary: EmpiricalSummary, out_dir: str | Path) -> list[Path]:
    """summary.json plus gamma_samples.csv and histograms.csv when there are samples."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    path = out / "summary.json"
    path.write_text(summary_to_json(summary))
    written.append(path)

    if summary.groups:
        samples = _samples_frame(summary.groups, "a")
        hist = _histogram_frame(summary.groups, "a")
        if summary.compare_groups:
            samples = pd.concat([samples, _samples_frame(summary.compare_groups, "b")], ignore_index=True)
            hist = pd.concat([hist, _histogram_frame(summary.compare_groups, "b")], ignore_index=True)
        for name, frame in (("gamma_samples.csv", samples), ("histograms.csv", hist)):
            path = out / name
            frame.to_csv(path, index=False, float_format=f"%.{CSV_DIGITS}g")
            written.append(path)

    for path in written:
        logger.info("wrote %s", path)
    return written
