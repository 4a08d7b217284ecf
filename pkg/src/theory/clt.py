"""Limiting laws of spiked sample eigenvalues.

For a distant spike alpha with phi = phi(alpha), the m_k renormalized sample
eigenvalues sqrt(n)(l_j / phi_n - 1) converge to the eigenvalues of
-(1/kappa_s) [Omega]_kk, where [Omega]_kk is a symmetric Gaussian block with

    Var(omega_ii) = 2 theta            (delocalized U1)
                  = 2 theta + beta_x nu (diagonal / block-diagonal Sigma)
    Var(omega_ij) = theta              (i != j)

    kappa_s = 1 + phi alpha m2(phi) + alpha m(phi)
    theta   = alpha^2 m2(phi)
    nu      = alpha^2 / (phi (1 + c m~(phi)))^2

with m, m2 the companion Stieltjes transform and its derivative.
"""

from __future__ import annotations

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

from src.errors import InvalidParameterError, NumericalError, SingularResolventError
from src.population.model import BulkMeasure, PopulationModel, SpikeGroup, bulk_of
from src.theory.spectral import (
    StieltjesContext,
    m_underline_2,
    mp_m_underline,
    phi,
    phi_n,
    phi_prime,
)

logger = logging.getLogger(__name__)

_RESOLVENT_TOL = 1e-12
_UNIT_TOL = 1e-8


class CltRegime(StrEnum):
    DELOCALIZED = "delocalized"  # U1 delocalized: fourth moment drops out
    DIAGONAL = "diagonal"        # diagonal or block-diagonal Sigma: fourth moment enters


class Field(StrEnum):
    REAL = "real"
    COMPLEX = "complex"


@dataclass(frozen=True, slots=True)
class CltParams:
    """Parameters of the limiting law for one spike group."""
    alpha: float
    phi: float
    m_under: float
    m_under2: float
    m_tilde: float
    kappa_s: float
    theta: float
    nu: float
    beta_x: float
    multiplicity: int = 1
    regime: CltRegime = CltRegime.DELOCALIZED

    def __post_init__(self) -> None:
        if not self.theta > 0:
            raise InvalidParameterError(f"theta must be positive, got {self.theta}")
        if self.kappa_s == 0:
            raise InvalidParameterError("kappa_s vanishes")

    @classmethod
    def from_transforms(
        cls,
        alpha: float,
        phi_value: float,
        m_under: float,
        m_under2: float,
        m_tilde: float,
        c: float,
        beta: float = 0.0,
        multiplicity: int = 1,
        regime: CltRegime = CltRegime.DELOCALIZED,
    ) -> CltParams:
        """Assemble kappa_s, theta and nu from transform values.

        Used both with analytic transforms and with plug-in estimates.
        """
        kappa = 1.0 + phi_value * alpha * m_under2 + alpha * m_under
        theta_value = alpha * alpha * m_under2
        nu_value = alpha * alpha / (phi_value * (1.0 + c * m_tilde)) ** 2
        return cls(
            alpha=alpha,
            phi=phi_value,
            m_under=m_under,
            m_under2=m_under2,
            m_tilde=m_tilde,
            kappa_s=kappa,
            theta=theta_value,
            nu=nu_value,
            beta_x=beta,
            multiplicity=multiplicity,
            regime=regime,
        )


@dataclass(frozen=True, slots=True)
class OmegaSample:
    """Symmetrized M x M value of Omega_M(lambda, X).

    `asymmetry` is max |A - A^T| / max(1, max |A|) before symmetrization.
    """
    matrix: np.ndarray
    asymmetry: float = 0.0


@dataclass(frozen=True, slots=True)
class GammaSample:
    """Per spike group: sqrt(n)(l_j / phi_n(alpha_k) - 1) for j in J_k."""
    groups: tuple[SpikeGroup, ...]
    phis: tuple[float, ...]
    values: tuple[np.ndarray, ...]

    def for_alpha(self, alpha: float) -> np.ndarray:
        for group, vals in zip(self.groups, self.values):
            if group.alpha == alpha:
                return vals
        raise KeyError(alpha)


# --- Scalar parameters ---

def _require_distant(alpha: float, ctx: StieltjesContext) -> float:
    return _distant(alpha, ctx)[0]


def _distant(alpha: float, ctx: StieltjesContext) -> tuple[float, float]:
    """(phi, phi') at a distant spike."""
    value = phi(alpha, ctx)
    slope = phi_prime(alpha, ctx)
    if not slope > 0:
        raise InvalidParameterError(f"alpha={alpha:g} is not a distant spike (phi' <= 0)")
    return value, slope


def kappa_s(alpha: float, ctx: StieltjesContext) -> float:
    value = _require_distant(alpha, ctx)
    return 1.0 + value * alpha * m_underline_2(value, ctx) + alpha * mp_m_underline(value, ctx)


def theta(alpha: float, ctx: StieltjesContext) -> float:
    value = _require_distant(alpha, ctx)
    return alpha * alpha * m_underline_2(value, ctx)


def m_tilde(phi_value: float, ctx: StieltjesContext) -> float:
    """Limit of (1/(p-M)) tr(D2 (B - phi)^-1), B = (1/n) D2^1/2 U2^* X X^* U2 D2^1/2.

    Deterministic equivalent -(1/phi) sum_i w_i t_i / (1 + t_i m(phi)).
    """
    m = mp_m_underline(phi_value, ctx)
    t = ctx.bulk.support
    w = ctx.bulk.weights
    return float(-np.sum(w * t / (1.0 + t * m)) / phi_value)


def nu(alpha: float, ctx: StieltjesContext) -> float:
    value = _require_distant(alpha, ctx)
    if ctx.c == 0:
        return alpha * alpha / (value * value)
    return alpha * alpha / (value * (1.0 + ctx.c * m_tilde(value, ctx))) ** 2


def beta_x(fourth_moment: float, u1_column: np.ndarray) -> float:
    """sum_t u_t^4 E|x|^4 - 3 for a unit spike eigenvector column."""
    u = np.asarray(u1_column, dtype=float)
    norm = float(np.linalg.norm(u))
    if abs(norm - 1.0) > _UNIT_TOL:
        raise InvalidParameterError(f"u1 column must be a unit vector, norm={norm:g}")
    return float(np.sum(u ** 4) * fourth_moment - 3.0)


def clt_params(
    alpha: float,
    ctx: StieltjesContext,
    regime: CltRegime = CltRegime.DELOCALIZED,
    fourth_moment: float | None = None,
    u_column: np.ndarray | None = None,
    multiplicity: int = 1,
) -> CltParams:
    """Full parameter bundle for a distant spike.

    In the diagonal regime `fourth_moment` is required; `u_column` defaults
    to a standard basis vector (diagonal Sigma).
    """
    value, slope = _distant(alpha, ctx)
    beta = 0.0
    if regime == CltRegime.DIAGONAL:
        if fourth_moment is None:
            raise InvalidParameterError("the diagonal regime needs the fourth moment E|x|^4")
        if u_column is None:
            u_column = np.zeros(1)
            u_column[0] = 1.0
        beta = beta_x(fourth_moment, u_column)
    # on a distant branch m(phi(alpha)) = -1/alpha and m'(phi(alpha)) = 1/(alpha^2 phi'(alpha))
    m_value = -1.0 / alpha
    m2_value = 1.0 / (alpha * alpha * slope)
    t = ctx.bulk.support
    mt_value = float(-np.sum(ctx.bulk.weights * t / (1.0 + t * m_value)) / value) if ctx.c > 0 else 0.0
    return CltParams.from_transforms(
        alpha, value, m_value, m2_value, mt_value, ctx.c,
        beta=beta, multiplicity=multiplicity, regime=regime,
    )


def omega_variance(params: CltParams, diagonal: bool, field: Field = Field.REAL) -> float:
    """Variance of an entry of the limiting block [Omega]_kk."""
    if field == Field.COMPLEX:
        if params.regime == CltRegime.DIAGONAL:
            raise InvalidParameterError("the fourth-moment correction is only derived for real data")
        return params.theta
    if not diagonal:
        return params.theta
    if params.regime == CltRegime.DIAGONAL:
        return 2.0 * params.theta + params.beta_x * params.nu
    return 2.0 * params.theta


def sigma2(params: CltParams) -> float:
    """Limiting variance of one renormalized eigenvalue of a simple spike."""
    return omega_variance(params, diagonal=True) / params.kappa_s ** 2


def sigma_single(params: CltParams) -> float:
    if params.multiplicity != 1:
        raise InvalidParameterError("sigma_single applies to simple spikes (m_k = 1)")
    return sigma2(params)


def sample_limit_block(rng: np.random.Generator, params: CltParams) -> np.ndarray:
    """Draw the eigenvalues of -(1/kappa_s)[Omega]_kk, descending."""
    m = params.multiplicity
    var_diag = omega_variance(params, diagonal=True)
    if var_diag < 0:
        raise InvalidParameterError(f"diagonal variance {var_diag:g} is negative")
    block = np.zeros((m, m))
    iu = np.triu_indices(m, k=1)
    block[iu] = rng.standard_normal(iu[0].size) * math.sqrt(params.theta)
    block = block + block.T
    block[np.diag_indices(m)] = rng.standard_normal(m) * math.sqrt(var_diag)
    eigs = np.linalg.eigvalsh(-block / params.kappa_s)
    return eigs[::-1]


# --- Finite-n statistics ---

def _bulk_projection(X: np.ndarray, model: PopulationModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Y, l, Q) with Y = D2^1/2 U2^* X and (l, Q) the eigenpairs of YY^*/n."""
    n = X.shape[1]
    Y = np.sqrt(model.D2)[:, None] * (model.u2.T @ X)
    l, Q = np.linalg.eigh(Y @ Y.T / n)
    return Y, l, Q


def _check_resolvent(lam: float, l: np.ndarray, n: int, bulk_dim: int) -> None:
    scale = max(1.0, abs(lam))
    if l.size and np.min(np.abs(lam - l)) <= _RESOLVENT_TOL * scale:
        raise SingularResolventError(f"lambda={lam:g} is an eigenvalue of X^* Gamma X / n")
    if abs(lam) <= _RESOLVENT_TOL and n > bulk_dim:
        raise SingularResolventError("lambda=0 with n > p - M makes the resolvent singular")


def omega_statistic(lam: float, X: np.ndarray, model: PopulationModel) -> OmegaSample:
    """Omega_M(lambda, X) = n^-1/2 [tr(R) D1 - D1^1/2 U1^* X R X^* U1 D1^1/2],
    R = (lambda I_n - X^* Gamma X / n)^-1, Gamma = U2 D2 U2^*.

    Works in the (p - M)-dimensional eigenbasis of D2^1/2 U2^* X X^* U2 D2^1/2 / n
    instead of factorizing the n x n resolvent.
    """
    p, n = X.shape
    if p != model.p:
        raise InvalidParameterError(f"X has {p} rows but the model has p={model.p}")
    bulk_dim = p - model.m
    Y, l, Q = _bulk_projection(X, model)
    _check_resolvent(lam, l, n, bulk_dim)

    inv_gap = 1.0 / (lam - l)
    trace_r = (n - bulk_dim) / lam + float(np.sum(inv_gap))

    Z = model.u1.T @ X
    W = (Z @ Y.T @ Q) / math.sqrt(n)
    zrz = (Z @ Z.T + (W * inv_gap) @ W.T) / lam

    root = np.sqrt(model.D1)
    raw = (trace_r * np.diag(model.D1) - root[:, None] * zrz * root[None, :]) / math.sqrt(n)
    asym = float(np.max(np.abs(raw - raw.T))) / max(1.0, float(np.max(np.abs(raw)))) if raw.size else 0.0
    return OmegaSample(matrix=(raw + raw.T) / 2.0, asymmetry=asym)


def m_tilde_sample(lam: float, X: np.ndarray, model: PopulationModel) -> float:
    """(1/(p-M)) tr(D2 (B - lambda)^-1) from data, B = D2^1/2 U2^* X X^* U2 D2^1/2 / n."""
    _, l, Q = _bulk_projection(X, model)
    _check_resolvent(lam, l, X.shape[1], l.size)
    weights = np.einsum("qi,q,qi->i", Q, model.D2, Q)
    return float(np.mean(weights / (l - lam)))


def gamma_from_eigs(eigs: np.ndarray, model: PopulationModel, c_n: float) -> GammaSample:
    """Renormalize the sample spiked eigenvalues with phi_n(alpha_k)."""
    eigs = np.asarray(eigs, dtype=float)
    if eigs.size != model.p:
        raise InvalidParameterError(f"expected {model.p} eigenvalues, got {eigs.size}")
    if not c_n > 0:
        raise InvalidParameterError(f"c_n must be positive, got {c_n}")
    n = model.p / c_n
    bulk_n = bulk_of(model)
    groups = model.spec.spikes
    phis: list[float] = []
    values: list[np.ndarray] = []
    for group in groups:
        phi_k = phi_n(group.alpha, c_n, bulk_n)
        ranks = np.array(group.indices) - 1
        phis.append(phi_k)
        values.append(math.sqrt(n) * (eigs[ranks] / phi_k - 1.0))
    return GammaSample(groups=tuple(groups), phis=tuple(phis), values=tuple(values))


def reference_context(model: PopulationModel, group: SpikeGroup, n: int) -> StieltjesContext:
    """Finite-p context seen by one spike group.

    The eigenvalue equation of group k involves every other population
    eigenvalue, the remaining spikes included, at c = (p - m_k)/n. Those
    spikes shift phi and m'(phi) by O(1/n), which matters at moderate p
    whenever 2 theta + beta_x nu nearly cancels.
    """
    others = np.concatenate([model.D1[model.D1 != group.alpha], model.D2])
    if others.size == 0:
        raise InvalidParameterError(f"spike {group.alpha:g} is the whole spectrum")
    return StieltjesContext(c=others.size / n, bulk=BulkMeasure.from_values(others))


def _reference(group: SpikeGroup, model: PopulationModel, n: int, regime: CltRegime,
               fourth_moment: float | None, column: np.ndarray) -> CltParams | None:
    try:
        return clt_params(group.alpha, reference_context(model, group, n), regime,
                          fourth_moment, column, group.multiplicity)
    except (InvalidParameterError, NumericalError) as exc:
        logger.debug("no finite-p reference for spike %g: %s", group.alpha, exc)
        return None


def model_clt_table(
    model: PopulationModel,
    n: int,
    regime: CltRegime = CltRegime.DELOCALIZED,
    fourth_moment: float | None = None,
) -> list[dict]:
    """Per spike group: phi_n, the parameter bundle and sigma^2, for c_n = p/n and H_n.

    `phi_ref` and `sigma2_ref` repeat phi and sigma^2 under `reference_context`;
    they are None when the spike is not distant there.
    """
    ctx = StieltjesContext(c=model.p / n, bulk=bulk_of(model))
    rows: list[dict] = []
    start = 0
    for group in model.spec.spikes:
        column = model.u1[:, start]
        start += group.multiplicity
        try:
            params = clt_params(group.alpha, ctx, regime, fourth_moment, column, group.multiplicity)
        except InvalidParameterError:
            logger.warning("spike %g is not distant at c=%g; skipped", group.alpha, ctx.c)
            continue
        ref = _reference(group, model, n, regime, fourth_moment, column)
        rows.append({
            "alpha": group.alpha,
            "multiplicity": group.multiplicity,
            "ranks": list(group.indices),
            "phi_n": params.phi,
            "kappa_s": params.kappa_s,
            "theta": params.theta,
            "nu": params.nu,
            "beta_x": params.beta_x,
            "var_diag": omega_variance(params, diagonal=True),
            "var_off": omega_variance(params, diagonal=False),
            "sigma2": sigma2(params),
            "phi_ref": ref.phi if ref is not None else None,
            "sigma2_ref": sigma2(ref) if ref is not None else None,
        })
    return rows
