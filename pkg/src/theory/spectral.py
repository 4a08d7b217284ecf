"""Stieltjes-transform machinery and the phase-transition map phi.

For a discrete bulk H = sum_i w_i delta_{t_i} and aspect ratio c = p/n:

    phi(a)   = a (1 + c sum_i w_i t_i / (a - t_i))
    phi'(a)  = 1 - c sum_i w_i t_i^2 / (a - t_i)^2
    lambda   = -1/m + c sum_i w_i t_i / (1 + t_i m)      (companion transform m)

The last equation is phi evaluated at a = -1/m, so the companion transform
outside the support is m(lambda) = -1/a where a is the unique preimage of
lambda on a branch with phi'(a) > 0. Every function here works through that
correspondence; all of them are pure.
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

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from src.config import (
    ATOM_TOL,
    BRACKET_GROWTH,
    BRACKET_MAX_STEPS,
    EDGE_MARGIN,
    GAP_SCAN_POINTS,
    ROOT_MAX_ITER,
    ROOT_TOL,
)
from src.errors import (
    BranchAmbiguityError,
    DomainError,
    InvalidParameterError,
    InversionError,
    RootFindingError,
    SingularityError,
)
from src.population.model import BulkMeasure

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class StieltjesContext:
    """Aspect ratio c and bulk measure H. Hashable, so branch layouts cache per context."""
    c: float
    bulk: BulkMeasure

    def __post_init__(self) -> None:
        if not self.c >= 0 or math.isinf(self.c):
            raise InvalidParameterError(f"aspect ratio c must be >= 0, got {self.c}")


class Regime(StrEnum):
    DISTANT = "distant"
    RIGHT_THRESHOLD = "right-threshold"  # sticks to the right edge of a bulk component
    LEFT_THRESHOLD = "left-threshold"    # sticks to the left edge


@dataclass(frozen=True, slots=True)
class PhaseValue:
    alpha: float
    phi: float
    phi_prime: float
    rho: float
    regime: Regime
    critical: float | None = None  # critical point used for threshold regimes


@dataclass(frozen=True, slots=True)
class Branch:
    """Spike interval (alpha_lo, alpha_hi) with phi' > 0 and its image in lambda."""
    alpha_lo: float
    alpha_hi: float
    lam_lo: float
    lam_hi: float


# --- phi and derivatives ---

def _check_off_atoms(alpha: float, bulk: BulkMeasure) -> None:
    for t, _ in bulk.atoms:
        if abs(alpha - t) <= ATOM_TOL * max(1.0, t):
            raise SingularityError(f"alpha={alpha!r} sits on bulk atom {t!r}")


def _phi(alpha: float, c: float, bulk: BulkMeasure) -> float:
    if not alpha > 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")
    if c == 0:
        return float(alpha)
    _check_off_atoms(alpha, bulk)
    t = bulk.support
    w = bulk.weights
    return float(alpha * (1.0 + c * np.sum(w * t / (alpha - t))))


def phi(alpha: float, ctx: StieltjesContext) -> float:
    """Limit of the sample spiked eigenvalue for a distant spike alpha."""
    return _phi(alpha, ctx.c, ctx.bulk)


def phi_n(alpha: float, c_n: float, bulk_n: BulkMeasure) -> float:
    """Finite-sample phi with c_n = p/n and the bulk ESD H_n."""
    if c_n < 0:
        raise InvalidParameterError(f"c_n must be >= 0, got {c_n}")
    return _phi(alpha, c_n, bulk_n)


def _phi_prime_raw(alpha: float, c: float, t: np.ndarray, w: np.ndarray) -> float:
    return float(1.0 - c * np.sum(w * t * t / (alpha - t) ** 2))


def phi_prime(alpha: float, ctx: StieltjesContext) -> float:
    if ctx.c == 0:
        return 1.0
    _check_off_atoms(alpha, ctx.bulk)
    return _phi_prime_raw(alpha, ctx.c, ctx.bulk.support, ctx.bulk.weights)


# --- Branch layout ---

_XTOL = 1e-15


def _brentq(f, lo: float, hi: float, what: str) -> float:
    try:
        root, info = brentq(
            f, lo, hi, xtol=_XTOL, maxiter=ROOT_MAX_ITER, full_output=True, disp=False,
        )
    except ValueError as exc:
        raise RootFindingError(f"{what}: {exc}", (lo, hi)) from exc
    if not info.converged:
        raise RootFindingError(f"{what}: no convergence after {info.iterations} iterations", (lo, hi))
    return float(root)


def _toward_atom(fp, start: float, atom: float) -> float:
    """Step from start toward atom until phi' turns negative."""
    x = start
    for _ in range(BRACKET_MAX_STEPS):
        x = atom + (x - atom) / BRACKET_GROWTH
        if fp(x) < 0:
            return x
    raise RootFindingError("phi' stays positive next to a bulk atom", (min(start, atom), max(start, atom)))


@functools.lru_cache(maxsize=256)
def branches(ctx: StieltjesContext) -> tuple[Branch, ...]:
    """All spike intervals on which phi' > 0, ascending.

    Inside each gap between atoms phi' is concave, so each gap holds at most
    one branch; below the lowest atom phi' decreases from 1 - c, above the
    highest it increases to 1.
    """
    t = ctx.bulk.support
    w = ctx.bulk.weights
    c = ctx.c
    if c == 0:
        return (Branch(0.0, math.inf, 0.0, math.inf),)

    def fp(a: float) -> float:
        return _phi_prime_raw(a, c, t, w)

    def ph(a: float) -> float:
        return _phi(a, c, ctx.bulk)

    found: list[Branch] = []

    # Below the lowest atom.
    lo_atom = float(t[0])
    if 1.0 - c > 0:
        near_zero = lo_atom * 1e-6
        if fp(near_zero) <= 0:
            raise RootFindingError("phi' not positive near zero although c < 1", (near_zero, lo_atom))
        right = _toward_atom(fp, lo_atom / 2.0, lo_atom)
        crit = _brentq(fp, near_zero, right, "left edge of lowest bulk component")
        found.append(Branch(0.0, crit, 0.0, ph(crit)))

    # Gaps between atoms.
    for a, b in zip(t[:-1], t[1:]):
        a, b = float(a), float(b)
        grid = np.linspace(a, b, GAP_SCAN_POINTS + 2)[1:-1]
        vals = np.array([fp(x) for x in grid])
        k = int(np.argmax(vals))
        lo_k, hi_k = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
        res = minimize_scalar(lambda x: -fp(x), bounds=(lo_k, hi_k), method="bounded",
                              options={"xatol": ROOT_TOL * b})
        peak = float(res.x) if -res.fun >= vals[k] else float(grid[k])
        if fp(peak) <= 0:
            logger.debug("gap (%g, %g) holds no distant spikes", a, b)
            continue
        left = _toward_atom(fp, peak, a)
        right = _toward_atom(fp, peak, b)
        lo_crit = _brentq(fp, left, peak, f"left critical point in gap ({a:g}, {b:g})")
        hi_crit = _brentq(fp, peak, right, f"right critical point in gap ({a:g}, {b:g})")
        found.append(Branch(lo_crit, hi_crit, ph(lo_crit), ph(hi_crit)))

    # Above the highest atom.
    hi_atom = float(t[-1])
    trial = 2.0 * hi_atom
    for _ in range(BRACKET_MAX_STEPS):
        if fp(trial) > 0:
            break
        trial = hi_atom + (trial - hi_atom) * BRACKET_GROWTH
    else:
        raise RootFindingError("phi' never turns positive above the bulk", (hi_atom, trial))
    left = _toward_atom(fp, trial, hi_atom)
    crit = _brentq(fp, left, trial, "right edge of highest bulk component")
    found.append(Branch(crit, math.inf, ph(crit), math.inf))
    return tuple(found)


def support_edges(ctx: StieltjesContext) -> list[tuple[float, float]]:
    """Lambda intervals outside the support, one per branch, ascending."""
    if len(ctx.bulk.atoms) == 1 and ctx.c > 0:
        t = ctx.bulk.lowest
        s = math.sqrt(ctx.c)
        right = (t * (1 + s) ** 2, math.inf)
        if ctx.c < 1:
            return [(0.0, t * (1 - s) ** 2), right]
        return [right]
    return [(b.lam_lo, b.lam_hi) for b in branches(ctx)]


# --- Threshold logic ---

def rho(alpha: float, ctx: StieltjesContext) -> PhaseValue:
    """Almost-sure limit of the sample eigenvalue attached to spike alpha."""
    value = phi(alpha, ctx)
    slope = phi_prime(alpha, ctx)
    if slope > 0:
        return PhaseValue(alpha, value, slope, value, Regime.DISTANT)

    for branch in branches(ctx):
        if alpha < branch.alpha_lo and not _atom_between(ctx.bulk, alpha, branch.alpha_lo):
            crit = branch.alpha_lo
            return PhaseValue(alpha, value, slope, phi(crit, ctx), Regime.RIGHT_THRESHOLD, crit)
        if alpha > branch.alpha_hi and not _atom_between(ctx.bulk, branch.alpha_hi, alpha):
            crit = branch.alpha_hi
            return PhaseValue(alpha, value, slope, phi(crit, ctx), Regime.LEFT_THRESHOLD, crit)
    lo = max((t for t, _ in ctx.bulk.atoms if t < alpha), default=0.0)
    hi = min((t for t, _ in ctx.bulk.atoms if t > alpha), default=math.inf)
    raise RootFindingError(
        f"no critical point of phi' around alpha={alpha:g}; the spike is absorbed by the bulk",
        (lo, hi),
    )


def _atom_between(bulk: BulkMeasure, lo: float, hi: float) -> bool:
    return any(lo < t < hi for t, _ in bulk.atoms)


# --- Companion Stieltjes transform ---

def _near_edge(lam: float, edges: list[tuple[float, float]]) -> bool:
    for lo, hi in edges:
        for e in (lo, hi):
            if e > 0 and math.isfinite(e) and abs(lam - e) <= EDGE_MARGIN * max(1.0, e):
                return True
    return False


def _alpha_single_atom(lam: float, ctx: StieltjesContext) -> float:
    """Closed form for H = delta_t: lam t m^2 + (lam + t - c t) m + 1 = 0."""
    t = ctx.bulk.lowest
    c = ctx.c
    a2 = lam * t
    a1 = lam + t - c * t
    disc = a1 * a1 - 4.0 * a2
    if disc < 0:
        raise DomainError(f"lambda={lam:g} lies inside the bulk support")
    q = -0.5 * (a1 + math.copysign(math.sqrt(disc), a1))
    roots = (q / a2, 1.0 / q) if q != 0 else ()
    admissible: list[float] = []
    for m in roots:
        if m == 0:
            continue
        alpha = -1.0 / m
        if alpha > 0 and (alpha - t) ** 2 > c * t * t:
            admissible.append(m)
    if not admissible:
        raise DomainError(f"lambda={lam:g} has no distant-spike preimage")
    if len(admissible) > 1 and not math.isclose(admissible[0], admissible[1], rel_tol=1e-12):
        raise BranchAmbiguityError(f"two admissible branches at lambda={lam:g}", tuple(roots))
    return -1.0 / admissible[0]


def _alpha_on_branches(lam: float, ctx: StieltjesContext) -> float:
    hits: list[float] = []
    for branch in branches(ctx):
        if not branch.lam_lo < lam < branch.lam_hi:
            continue
        lo = branch.alpha_lo
        hi = branch.alpha_hi
        if math.isinf(hi):
            hi = max(2.0 * lo, lam, 1.0)
            for _ in range(BRACKET_MAX_STEPS):
                if phi(hi, ctx) > lam:
                    break
                hi *= BRACKET_GROWTH
            else:
                raise RootFindingError("cannot bracket phi(alpha) = lambda from above", (lo, hi))
        alpha = _brentq(lambda a: _phi(a, ctx.c, ctx.bulk) - lam if a > 0 else -lam,
                        lo, hi, f"inverting phi at lambda={lam:g}")
        residual = _phi(alpha, ctx.c, ctx.bulk) - lam
        if abs(residual) > ROOT_TOL * max(1.0, lam):
            raise RootFindingError(f"residual {residual:.3g} after inverting phi", (lo, hi))
        hits.append(alpha)
    if not hits:
        raise DomainError(f"lambda={lam:g} lies inside the bulk support")
    if len(hits) > 1:
        raise BranchAmbiguityError(f"several branches at lambda={lam:g}", tuple(-1.0 / a for a in hits))
    return hits[0]


def alpha_from_lambda(lam: float, ctx: StieltjesContext) -> float:
    """Spike alpha with phi(alpha) = lambda on a distant branch, i.e. -1/m(lambda)."""
    m = mp_m_underline(lam, ctx)
    if m == 0:
        raise InversionError(f"companion transform vanishes at lambda={lam:g}")
    return -1.0 / m


def mp_m_underline(lam: float, ctx: StieltjesContext) -> float:
    """Companion Stieltjes transform m(lambda) of the n x n law, lambda off the support."""
    if not lam > 0 or math.isinf(lam):
        raise DomainError(f"lambda must be positive and finite, got {lam}")
    if ctx.c == 0:
        return -1.0 / lam
    if _near_edge(lam, support_edges(ctx)):
        raise DomainError(f"lambda={lam:g} is within {EDGE_MARGIN:g} of a support edge")
    if len(ctx.bulk.atoms) == 1:
        alpha = _alpha_single_atom(lam, ctx)
    else:
        alpha = _alpha_on_branches(lam, ctx)
    return -1.0 / alpha


def m_underline_2(lam: float, ctx: StieltjesContext) -> float:
    """Integral of (lambda - x)^-2 under the companion law, i.e. m'(lambda)."""
    m = mp_m_underline(lam, ctx)
    if ctx.c == 0:
        return 1.0 / (lam * lam)
    t = ctx.bulk.support
    w = ctx.bulk.weights
    denom = 1.0 / (m * m) - ctx.c * np.sum(w * t * t / (1.0 + t * m) ** 2)
    return float(1.0 / denom)


def mp_m(lam: float, ctx: StieltjesContext) -> float:
    """Stieltjes transform of the p x p law, from m_companion = -(1-c)/lambda + c m."""
    if ctx.c == 0:
        raise InvalidParameterError("the p x p transform is undefined for c = 0")
    return (mp_m_underline(lam, ctx) + (1.0 - ctx.c) / lam) / ctx.c


def fixed_point_residual(lam: float, m: float, ctx: StieltjesContext) -> float:
    """lambda + 1/m - c sum w t / (1 + t m); zero at the companion transform."""
    t = ctx.bulk.support
    w = ctx.bulk.weights
    return float(lam + 1.0 / m - ctx.c * np.sum(w * t / (1.0 + t * m)))
