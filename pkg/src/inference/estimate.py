"""Spike detection from a sample spectrum.

For every rank j the pipeline estimates the population spike that would put
a sample eigenvalue at l_j and asks whether l_j falls inside the acceptance
interval its limiting law predicts:

    m(l_j)   ~ (1/p) sum_{r_ij >= thr} 1/(l_i - l_j),  r_ij = |l_i - l_j| / max(l_i, l_j)
    m_(l_j)  = -(1 - c)/l_j + c m(l_j)
    alpha^   = -1 / m_(l_j)
    phi^     = phi(alpha^) under the fitted bulk H^
    sigma^2  from m(phi^), m2(phi^) summed over all i
    C_j      = [(z_lo sigma^/sqrt(n) + 1) phi^, (z_hi sigma^/sqrt(n) + 1) phi^]

H^ is a point mass at the level of the eigenvalues inside the Marchenko-Pastur
band it predicts, widened at both edges by a Tracy-Widom quantile; a known
population bulk may be passed instead. Ranks whose l_j or phi^ falls inside
the fitted band are undetectable. The number of spikes M0 is the count of
ranks with l_j in C_j.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from src.config import (
    BULK_FIT_MAX_ITER,
    EDGE_TW_QUANTILE,
    LOWER_LEVEL,
    RATIO_THRESHOLD,
    RATIO_THRESHOLD_RANGE,
    UPPER_LEVEL,
)
from src.errors import (
    EstimationDegenerateError,
    InvalidParameterError,
    InversionError,
    NumericalError,
)
from src.population.model import BulkMeasure
from src.population.sampler import eigvals_desc
from src.theory.clt import CltParams, CltRegime, sigma2
from src.theory.spectral import StieltjesContext, phi, phi_prime, support_edges

logger = logging.getLogger(__name__)

Z_LOWER = float(norm.ppf(LOWER_LEVEL))
Z_UPPER = float(norm.ppf(UPPER_LEVEL))


@dataclass(frozen=True, slots=True)
class DetectionConfig:
    """Settings of the detection pipeline.

    Attributes:
        c: Dimension ratio p/n of the data the eigenvalues came from.
        ratio_threshold: Relative gap below which a neighbour is left out of
            the sum giving alpha^.
        lower_q, upper_q: Standard-normal quantiles bounding C_j.
        regime: Which limiting variance sigma_k^2 is used.
        fourth_moment: E|x|^4, required in the diagonal regime.
        bulk: Known population bulk H. None fits a point mass to the spectrum.
        filter_plugin_sums: Variant that applies the ratio filter (relative
            to phi^) to the sums giving m(phi^) and m2(phi^) as well. The
            default False sums over every eigenvalue.
    """
    c: float
    ratio_threshold: float = RATIO_THRESHOLD
    lower_q: float = Z_LOWER
    upper_q: float = Z_UPPER
    regime: CltRegime = CltRegime.DELOCALIZED
    fourth_moment: float | None = None
    bulk: BulkMeasure | None = None
    filter_plugin_sums: bool = False

    def __post_init__(self) -> None:
        if not (self.c > 0 and math.isfinite(self.c)):
            raise InvalidParameterError(f"c must be positive, got {self.c}")
        if not 0 < self.ratio_threshold < 1:
            raise InvalidParameterError(f"ratio_threshold must lie in (0, 1), got {self.ratio_threshold}")
        if not self.lower_q < 0 < self.upper_q:
            raise InvalidParameterError("quantiles must satisfy lower_q < 0 < upper_q")
        if self.regime == CltRegime.DIAGONAL and self.fourth_moment is None:
            raise InvalidParameterError("the diagonal regime needs fourth_moment")
        lo, hi = RATIO_THRESHOLD_RANGE
        if not lo <= self.ratio_threshold <= hi:
            logger.warning("ratio_threshold %.3g is outside the usual range [%.2g, %.2g]",
                           self.ratio_threshold, lo, hi)


@dataclass(frozen=True, slots=True)
class BulkFit:
    """Bulk measure H^ used for phi^ and the lambda bands its spectrum occupies.

    A band starting at 0 also holds the zero eigenvalues left when p > n.
    """
    measure: BulkMeasure
    bands: tuple[tuple[float, float], ...]
    size: int = 0  # eigenvalues inside the bands

    @property
    def level(self) -> float:
        return self.measure.lowest

    def mask(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        inside = np.zeros(values.shape, dtype=bool)
        for lo, hi in self.bands:
            inside |= (values <= hi) & ((values >= lo) | (lo == 0.0))
        return inside

    def contains(self, lam: float) -> bool:
        return bool(self.mask(np.array([lam]))[0])


@dataclass(frozen=True, slots=True)
class RankTest:
    """Outcome of the interval test at one rank.

    `note` says why the rank is undetectable; the numeric fields after
    `l` are None in that case.
    """
    rank: int
    l: float
    alpha_hat: float | None = None
    phi_hat: float | None = None
    sigma2: float | None = None
    lower: float | None = None
    upper: float | None = None
    accepted: bool = False
    note: str | None = None

    @property
    def detectable(self) -> bool:
        return self.note is None


@dataclass(frozen=True, slots=True)
class DetectionGroup:
    """A run of adjacent accepted ranks, read as one spike of that multiplicity."""
    ranks: tuple[int, ...]
    mean_alpha_hat: float

    @property
    def multiplicity(self) -> int:
        return len(self.ranks)


@dataclass(frozen=True, slots=True)
class SpikeReport:
    m_hat: int
    detections: tuple[RankTest, ...]
    intervals_all: tuple[RankTest, ...] = field(default=(), repr=False)
    bulk_fit: BulkFit | None = field(default=None, repr=False)

    @property
    def locations(self) -> tuple[int, ...]:
        return tuple(d.rank for d in self.detections)


# --- Bulk fit ---

def _point_bands(t: float, c: float, n: float) -> tuple[tuple[float, float], ...]:
    """Marchenko-Pastur band of delta_t widened by the Tracy-Widom quantile at each edge."""
    s = math.sqrt(c)
    n23 = n ** (-2.0 / 3.0)
    hi = t * (1.0 + s) ** 2 + EDGE_TW_QUANTILE * t * (1.0 + s) * (1.0 + 1.0 / s) ** (1.0 / 3.0) * n23
    if c >= 1:
        return ((0.0, hi),)
    lo = t * (1.0 - s) ** 2 - EDGE_TW_QUANTILE * t * (1.0 - s) * (1.0 / s - 1.0) ** (1.0 / 3.0) * n23
    return ((max(lo, 0.0), hi),)


def _measure_bands(bulk: BulkMeasure, c: float, n: float) -> tuple[tuple[float, float], ...]:
    if len(bulk.atoms) == 1:
        return _point_bands(bulk.lowest, c, n)
    widen = EDGE_TW_QUANTILE * n ** (-2.0 / 3.0)
    bands: list[tuple[float, float]] = []
    start = 0.0
    for gap_lo, gap_hi in support_edges(StieltjesContext(c=c, bulk=bulk)):
        if gap_lo > start:
            bands.append((start * (1.0 - widen), gap_lo * (1.0 + widen)))
        start = gap_hi
    return tuple(bands)


def fit_bulk(eigs: np.ndarray, config: DetectionConfig) -> BulkFit:
    """Bulk used for phi^ and for the inside-the-bulk checks.

    Without a configured bulk the level t of delta_t starts at the mean
    eigenvalue and is refitted to the mean of the eigenvalues inside the
    band until that set stops changing.
    """
    eigs = np.asarray(eigs, dtype=float)
    if eigs.size == 0:
        raise InvalidParameterError("empty eigenvalue list")
    n = eigs.size / config.c
    if config.bulk is not None:
        fit = BulkFit(config.bulk, _measure_bands(config.bulk, config.c, n))
        return replace(fit, size=int(fit.mask(eigs).sum()))

    level = float(np.mean(eigs))
    previous: np.ndarray | None = None
    for _ in range(BULK_FIT_MAX_ITER):
        if not level > 0:
            raise EstimationDegenerateError(f"bulk level {level:g} is not positive")
        fit = BulkFit(BulkMeasure.point(level), _point_bands(level, config.c, n))
        inside = fit.mask(eigs)
        if not inside.any():
            raise EstimationDegenerateError(f"no eigenvalue inside the bulk band at level {level:g}")
        if previous is not None and np.array_equal(inside, previous):
            break
        previous = inside
        level = float(np.mean(eigs[inside]))
    else:
        logger.debug("bulk fit still moving after %d iterations; level %.6g", BULK_FIT_MAX_ITER, level)
    logger.debug("bulk level %.6g with %d of %d eigenvalues inside", fit.level, int(inside.sum()), eigs.size)
    return replace(fit, size=int(inside.sum()))


# --- Plug-in transforms ---

def _kept(lam: float, eigs: np.ndarray, threshold: float) -> np.ndarray:
    """Mask of eigenvalues with relative gap to lam at least `threshold`."""
    top = np.maximum(eigs, lam)
    gap = np.abs(eigs - lam)
    ratio = np.divide(gap, top, out=np.zeros_like(gap), where=top > 0)
    return ratio >= threshold


def empirical_m(lam: float, eigs: np.ndarray, config: DetectionConfig) -> float:
    """(1/p) sum over the filtered eigenvalues of 1/(l_i - lam)."""
    eigs = np.asarray(eigs, dtype=float)
    if eigs.size == 0:
        raise InvalidParameterError("empty eigenvalue list")
    mask = _kept(lam, eigs, config.ratio_threshold)
    if not mask.any():
        raise EstimationDegenerateError(f"no eigenvalue passes the ratio filter at lambda={lam:g}")
    return float(np.sum(1.0 / (eigs[mask] - lam)) / eigs.size)


def empirical_m2(lam: float, eigs: np.ndarray, config: DetectionConfig, filtered: bool = True) -> float:
    """(1/p) sum of 1/(l_i - lam)^2 over the filtered (or all) eigenvalues."""
    eigs = np.asarray(eigs, dtype=float)
    mask = _kept(lam, eigs, config.ratio_threshold) if filtered else np.ones(eigs.size, dtype=bool)
    if not mask.any():
        raise EstimationDegenerateError(f"no eigenvalue passes the ratio filter at lambda={lam:g}")
    return float(np.sum(1.0 / (eigs[mask] - lam) ** 2) / eigs.size)


def _empirical_m_any(lam: float, eigs: np.ndarray, config: DetectionConfig, filtered: bool) -> float:
    if filtered:
        return empirical_m(lam, eigs, config)
    eigs = np.asarray(eigs, dtype=float)
    return float(np.sum(1.0 / (eigs - lam)) / eigs.size)


def underline_from_m(m_val: float, lam: float, c: float) -> float:
    """Companion transform from the ordinary one: -(1 - c)/lam + c m."""
    if lam == 0:
        raise InvalidParameterError("lambda must be non-zero")
    return -(1.0 - c) / lam + c * m_val


def underline2_from_m2(m2_val: float, lam: float, c: float) -> float:
    """Derivative counterpart: (1 - c)/lam^2 + c m2."""
    if lam == 0:
        raise InvalidParameterError("lambda must be non-zero")
    return (1.0 - c) / (lam * lam) + c * m2_val


def alpha_hat(lam: float, eigs: np.ndarray, config: DetectionConfig) -> float:
    m_under = underline_from_m(empirical_m(lam, eigs, config), lam, config.c)
    if m_under == 0:
        raise InversionError(f"estimated companion transform vanishes at lambda={lam:g}")
    return -1.0 / m_under


def acceptance_interval(phi_hat: float, sigma: float, n: float, config: DetectionConfig) -> tuple[float, float]:
    root_n = math.sqrt(n)
    return (
        (config.lower_q * sigma / root_n + 1.0) * phi_hat,
        (config.upper_q * sigma / root_n + 1.0) * phi_hat,
    )


def _plugin_params(
    alpha: float, phi_hat: float, eigs: np.ndarray, config: DetectionConfig, bulk: BulkMeasure,
) -> CltParams:
    filtered = config.filter_plugin_sums
    c = config.c
    m_val = _empirical_m_any(phi_hat, eigs, config, filtered)
    m2_val = empirical_m2(phi_hat, eigs, config, filtered)
    beta = 0.0
    if config.regime == CltRegime.DIAGONAL:
        beta = config.fourth_moment - 3.0
    # m~(phi^) under H^, where the companion transform is -1/alpha^
    t = bulk.support
    mt_val = float(-np.sum(bulk.weights * t * alpha / (alpha - t)) / phi_hat)
    return CltParams.from_transforms(
        alpha,
        phi_hat,
        underline_from_m(m_val, phi_hat, c),
        underline2_from_m2(m2_val, phi_hat, c),
        mt_val,
        c,
        beta=beta,
        regime=config.regime,
    )


def plugin_sigma2(
    alpha: float, phi_hat: float, eigs: np.ndarray, config: DetectionConfig, bulk: BulkMeasure,
) -> float:
    """sigma^2 from the plug-in transforms at phi^.

    An eigenvalue sitting exactly at phi^ makes the literal m2 sum infinite,
    which sends sigma^2 to 0.
    """
    eigs = np.asarray(eigs, dtype=float)
    if not config.filter_plugin_sums and np.any(eigs == phi_hat):
        return 0.0
    var = sigma2(_plugin_params(alpha, phi_hat, eigs, config, bulk))
    if not var >= 0:
        raise EstimationDegenerateError(f"negative variance estimate {var:g}")
    return var


def _chain(lam: float, eigs: np.ndarray, config: DetectionConfig, fit: BulkFit) -> tuple[float, float, float]:
    """alpha^, phi^, sigma^2 at lambda; raises when the rank is undetectable."""
    if fit.contains(lam):
        raise EstimationDegenerateError(f"l={lam:g} lies inside the fitted bulk")
    alpha = alpha_hat(lam, eigs, config)
    if not alpha > 0:
        raise EstimationDegenerateError(f"estimated spike {alpha:g} is not positive")
    ctx = StieltjesContext(c=config.c, bulk=fit.measure)
    if not phi_prime(alpha, ctx) > 0:
        raise EstimationDegenerateError(f"alpha^={alpha:g} is not a distant spike under the fitted bulk")
    phi_hat = phi(alpha, ctx)
    if fit.contains(phi_hat):
        raise EstimationDegenerateError(f"phi^={phi_hat:g} lies inside the fitted bulk")
    return alpha, phi_hat, plugin_sigma2(alpha, phi_hat, eigs, config, fit.measure)


def interval(
    lam: float, eigs: np.ndarray, config: DetectionConfig, fit: BulkFit | None = None,
) -> tuple[float, float]:
    """C_j for the eigenvalue lam; raises EstimationDegenerateError when undetectable."""
    eigs = np.asarray(eigs, dtype=float)
    try:
        fit = fit_bulk(eigs, config) if fit is None else fit
        _, phi_hat, var = _chain(lam, eigs, config, fit)
    except (NumericalError, InvalidParameterError) as exc:
        if isinstance(exc, EstimationDegenerateError):
            raise
        raise EstimationDegenerateError(f"undetectable at lambda={lam:g}: {exc}") from exc
    return acceptance_interval(phi_hat, math.sqrt(var), eigs.size / config.c, config)


def rank_test(rank: int, eigs: np.ndarray, config: DetectionConfig, fit: BulkFit | None = None) -> RankTest:
    """Interval test for the eigenvalue at 1-based `rank`."""
    eigs = np.asarray(eigs, dtype=float)
    lam = float(eigs[rank - 1])
    if fit is None:
        fit = fit_bulk(eigs, config)
    try:
        alpha, phi_hat, var = _chain(lam, eigs, config, fit)
    except (NumericalError, InvalidParameterError) as exc:
        logger.debug("rank %d (l=%.6g) undetectable: %s", rank, lam, exc)
        return RankTest(rank=rank, l=lam, note=str(exc))
    lower, upper = acceptance_interval(phi_hat, math.sqrt(var), eigs.size / config.c, config)
    return RankTest(
        rank=rank, l=lam, alpha_hat=alpha, phi_hat=phi_hat, sigma2=var,
        lower=lower, upper=upper, accepted=lower <= lam <= upper,
    )


def detect_spikes(eigs: np.ndarray, config: DetectionConfig) -> SpikeReport:
    """Test every rank; M0 is the number of ranks whose eigenvalue is in its interval."""
    eigs = np.asarray(eigs, dtype=float)
    if eigs.size == 0:
        raise InvalidParameterError("empty eigenvalue list")
    if np.any(np.diff(eigs) > 0):
        raise InvalidParameterError("eigenvalues must be sorted in descending order")
    fit = fit_bulk(eigs, config)
    tests = tuple(rank_test(j, eigs, config, fit) for j in range(1, eigs.size + 1))
    detections = tuple(t for t in tests if t.accepted)
    logger.debug("detected %d spikes among %d eigenvalues", len(detections), eigs.size)
    return SpikeReport(m_hat=len(detections), detections=detections, intervals_all=tests, bulk_fit=fit)


def group_detections(report: SpikeReport) -> list[DetectionGroup]:
    groups: list[DetectionGroup] = []
    run: list[RankTest] = []
    for det in report.detections:
        if run and det.rank != run[-1].rank + 1:
            groups.append(_close(run))
            run = []
        run.append(det)
    if run:
        groups.append(_close(run))
    return groups


def _close(run: list[RankTest]) -> DetectionGroup:
    return DetectionGroup(
        ranks=tuple(d.rank for d in run),
        mean_alpha_hat=float(np.mean([d.alpha_hat for d in run])),
    )


def detect_from_data(X: np.ndarray, config: DetectionConfig | None = None) -> SpikeReport:
    """Run detection on a p x n data matrix; c is taken as p/n."""
    X = np.asarray(X, dtype=float)
    p, n = X.shape
    c = p / n
    config = DetectionConfig(c=c) if config is None else replace(config, c=c)
    S = X @ X.T / n
    eigs = eigvals_desc((S + S.T) / 2.0)
    return detect_spikes(eigs, config)
