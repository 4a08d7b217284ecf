"""Seeded data matrices, sample covariance and the truncation pipeline.

Every draw goes through a Philox generator keyed by (seed, replication), so
replications can run in any order or on any thread and still produce the
same matrices.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid, trapezoid

from src.config import (
    CSV_DIGITS,
    HEAVY_TAIL_GRID_MAX,
    HEAVY_TAIL_GRID_POINTS,
    SYMMETRY_TOL,
    TRUNCATION_RATE,
)
from src.errors import DegenerateScaleError, InvalidDimensionError, InvalidParameterError
from src.population.model import PopulationModel

logger = logging.getLogger(__name__)


class DistKind(StrEnum):
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"    # +-1 with probability 1/2
    HEAVY_TAIL = "heavy_tail"    # density a0 / ((|x|+1)^5 log(|x|+2)), standardized


@dataclass(frozen=True, slots=True)
class Distribution:
    """Entry law of X. Every kind has mean 0 and variance 1."""
    kind: DistKind = DistKind.GAUSSIAN

    @classmethod
    def parse(cls, name: str) -> Distribution:
        try:
            return cls(DistKind(name))
        except ValueError:
            choices = ", ".join(k.value for k in DistKind)
            raise InvalidParameterError(f"unknown distribution {name!r} (choose from {choices})") from None

    @property
    def fourth_moment(self) -> float:
        """E x^4 of the standardized law (infinite for heavy_tail)."""
        if self.kind == DistKind.GAUSSIAN:
            return 3.0
        if self.kind == DistKind.RADEMACHER:
            return 1.0
        return math.inf


@dataclass(frozen=True, slots=True)
class TruncationConfig:
    """Entries with |x| >= eta_n sqrt(n) are zeroed before re-standardizing."""
    eta_n: float

    def __post_init__(self) -> None:
        if not (self.eta_n > 0 and math.isfinite(self.eta_n)):
            raise InvalidParameterError(f"eta_n must be positive, got {self.eta_n}")

    @classmethod
    def default(cls, n: int) -> TruncationConfig:
        return cls(eta_n=n ** TRUNCATION_RATE)

    def bound(self, n: int) -> float:
        return self.eta_n * math.sqrt(n)


# --- Random streams ---

def replication_rng(seed: int, rep: int = 0) -> np.random.Generator:
    """Counter-based stream for replication `rep` of a run seeded with `seed`."""
    if seed < 0 or rep < 0:
        raise InvalidParameterError(f"seed and replication index must be non-negative ({seed}, {rep})")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep)])))


# --- Heavy-tailed law ---

class HeavyTailLaw:
    """Tabulated symmetric law with density a0 / ((|x|+1)^5 log(|x|+2)).

    Finite variance, infinite fourth moment (log-divergent). The CDF of |x|
    is tabulated on a log-spaced grid; sampling inverts it by interpolation
    and divides by the numerical standard deviation.
    """

    def __init__(self, grid_max: float = HEAVY_TAIL_GRID_MAX,
                 points: int = HEAVY_TAIL_GRID_POINTS) -> None:
        x = np.concatenate(([0.0], np.logspace(-6.0, math.log10(grid_max), points)))
        g = self._kernel(x)
        cum = cumulative_trapezoid(g, x, initial=0.0)
        segments = np.diff(cum)
        # tail mass accumulated from the far end keeps small survivals accurate
        tail = np.concatenate((np.cumsum(segments[::-1])[::-1], [0.0]))
        half_mass = float(cum[-1])

        self.grid = x
        self.a0 = 1.0 / (2.0 * half_mass)
        self._cdf_abs = cum / half_mass
        self._tail = tail / half_mass
        second = float(trapezoid(x * x * g, x)) / half_mass
        self.scale = math.sqrt(second)
        logger.debug("heavy-tail law: a0=%.6g scale=%.6g", self.a0, self.scale)

    @staticmethod
    def _kernel(x: np.ndarray) -> np.ndarray:
        return 1.0 / ((x + 1.0) ** 5 * np.log(x + 2.0))

    def density(self, x: np.ndarray | float) -> np.ndarray:
        """Density of the raw (unstandardized) law."""
        return self.a0 * self._kernel(np.abs(np.asarray(x, dtype=float)))

    def survival(self, tau: float) -> float:
        """P(|x| > tau) in raw units."""
        if tau <= 0:
            return 1.0
        if tau >= self.grid[-1]:
            return 0.0
        return float(np.interp(tau, self.grid, self._tail))

    def truncated_moment(self, k: float, T: float) -> float:
        """E[|x|^k ; |x| <= T] in raw units."""
        mask = self.grid <= T
        x = self.grid[mask]
        if x.size < 2:
            return 0.0
        return float(trapezoid(x ** k * self._kernel(x), x)) * 2.0 * self.a0

    def sample(self, rng: np.random.Generator, size: tuple[int, ...]) -> np.ndarray:
        u = rng.random(size)
        magnitude = np.interp(u, self._cdf_abs, self.grid)
        sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
        return sign * magnitude / self.scale


@functools.lru_cache(maxsize=1)
def heavy_tail_law() -> HeavyTailLaw:
    return HeavyTailLaw()


# --- Drawing ---

def draw_entries(dist: Distribution, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    if dist.kind == DistKind.GAUSSIAN:
        return rng.standard_normal(shape)
    if dist.kind == DistKind.RADEMACHER:
        return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0
    return heavy_tail_law().sample(rng, shape)


def draw_matrix(dist: Distribution, p: int, n: int, seed: int, rep: int = 0) -> np.ndarray:
    """p x n matrix of i.i.d. standardized entries; deterministic in (seed, rep)."""
    if p < 1 or n < 1:
        raise InvalidDimensionError(f"p and n must be >= 1, got p={p}, n={n}")
    return draw_entries(dist, (p, n), replication_rng(seed, rep))


def sample_cov(model: PopulationModel, X: np.ndarray) -> np.ndarray:
    """S = T (1/n) X X^T T^T with T = Sigma^1/2, exactly symmetric."""
    p, n = X.shape
    if p != model.p:
        raise InvalidDimensionError(f"X has {p} rows but the model has p={model.p}")
    Y = model.root @ X
    S = Y @ Y.T / n
    return (S + S.T) / 2.0


def eigvals_desc(S: np.ndarray) -> np.ndarray:
    """Full spectrum of a symmetric matrix, largest first."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InvalidDimensionError(f"expected a square matrix, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if S.size and float(np.max(np.abs(S - S.T))) > SYMMETRY_TOL * scale:
        raise InvalidParameterError("matrix is not symmetric")
    return np.linalg.eigvalsh(S)[::-1]


# --- Truncation ---

def truncate_center_rescale(X: np.ndarray, cfg: TruncationConfig, n: int | None = None) -> np.ndarray:
    """Zero entries with |x| >= eta_n sqrt(n), then subtract the empirical mean
    and divide by the empirical SD of the truncated matrix.

    The result is bounded by (eta_n sqrt(n) + |mean|) / sd, not by
    eta_n sqrt(n) / sd alone: centering moves every entry by mean / sd.
    """
    if n is None:
        n = X.shape[1]
    bound = cfg.bound(n)
    kept = np.where(np.abs(X) < bound, X, 0.0)
    dropped = int(np.count_nonzero(np.abs(X) >= bound))
    if dropped:
        logger.debug("truncation at %.4g zeroed %d of %d entries", bound, dropped, X.size)
    mean = float(kept.mean())
    sd = float(kept.std())
    if not sd > 0:
        raise DegenerateScaleError(f"truncation at {bound:.4g} left a constant matrix")
    return (kept - mean) / sd


# --- Raw data helpers ---

def standardize_rows(X: np.ndarray) -> np.ndarray:
    """Center each variable (row) and scale it to unit sample SD."""
    X = np.asarray(X, dtype=float)
    centered = X - X.mean(axis=1, keepdims=True)
    sd = centered.std(axis=1, ddof=1, keepdims=True) if X.shape[1] > 1 else np.zeros((X.shape[0], 1))
    flat = np.flatnonzero(~(sd[:, 0] > 0))
    if flat.size:
        raise DegenerateScaleError(f"variable {int(flat[0]) + 1} is constant; cannot standardize")
    return centered / sd


def write_matrix_csv(X: np.ndarray, path: str | Path) -> Path:
    """Row-major CSV dump with full double precision."""
    path = Path(path)
    pd.DataFrame(np.asarray(X, dtype=float)).to_csv(
        path, header=False, index=False, float_format=f"%.{CSV_DIGITS}g",
    )
    logger.debug("wrote %s matrix to %s", X.shape, path)
    return path
