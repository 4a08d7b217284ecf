"""Spiked population covariance models.

A PopulationModel is the single source of truth for an experiment: it fixes
the population spectrum (bulk atoms plus spike groups) and the factorization
Sigma = T_p T_p^* with T_p = V diag(D1, D2)^{1/2} U^*. All arrays are treated
as read-only after construction.

CONVENTIONS:
- Ranks are 1-based positions in the descending population spectrum.
- D1 lists the spikes group by group in rank order; D2 lists the bulk values
  in rank order. Column i of U pairs with entry i of diag(D1, D2).
- V defaults to U, which makes T_p the symmetric square root of Sigma.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import toeplitz

from src.config import (
    CASE_BULK_VALUE,
    CASE_MIN_P,
    CASE_MULTIPLICITIES,
    CASE_SPIKES,
    ORTHO_TOL,
)
from src.errors import InvalidDimensionError, InvalidParameterError

_MASS_TOL = 1e-12


@dataclass(frozen=True, slots=True)
class BulkMeasure:
    """Discrete probability measure H on (0, inf).

    Attributes:
        atoms: (support point, mass) pairs, ascending by support point.
    """
    atoms: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not self.atoms:
            raise InvalidParameterError("bulk measure needs at least one atom")
        total = 0.0
        prev = 0.0
        for t, w in self.atoms:
            if not t > 0:
                raise InvalidParameterError(f"bulk atom {t} must be positive")
            if not 0 < w <= 1:
                raise InvalidParameterError(f"bulk mass {w} must lie in (0, 1]")
            if t <= prev:
                raise InvalidParameterError("bulk atoms must be strictly ascending")
            prev = t
            total += w
        if abs(total - 1.0) > _MASS_TOL:
            raise InvalidParameterError(f"bulk masses sum to {total!r}, not 1")

    @classmethod
    def point(cls, t: float = 1.0) -> BulkMeasure:
        """Point mass at t (delta_t)."""
        return cls(((float(t), 1.0),))

    @classmethod
    def from_values(cls, values: Sequence[float] | np.ndarray) -> BulkMeasure:
        """Empirical measure of a list of population eigenvalues."""
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            raise InvalidParameterError("empirical bulk needs at least one value")
        uniq, counts = np.unique(arr, return_counts=True)
        masses = counts / arr.size
        # Push rounding residue onto the heaviest atom so masses sum to 1.
        masses[np.argmax(masses)] += 1.0 - masses.sum()
        return cls(tuple((float(t), float(w)) for t, w in zip(uniq, masses)))

    @property
    def support(self) -> np.ndarray:
        return np.array([t for t, _ in self.atoms])

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms])

    @property
    def lowest(self) -> float:
        return self.atoms[0][0]

    @property
    def highest(self) -> float:
        return self.atoms[-1][0]


@dataclass(frozen=True, slots=True)
class SpikeGroup:
    """One spike value alpha_k with its multiplicity m_k and rank set J_k."""
    alpha: float
    multiplicity: int
    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise InvalidParameterError(f"spike {self.alpha} must be positive")
        if self.multiplicity < 1:
            raise InvalidParameterError("spike multiplicity must be at least 1")
        if len(self.indices) != self.multiplicity:
            raise InvalidParameterError("spike rank set size must equal multiplicity")
        first = self.indices[0]
        if self.indices != tuple(range(first, first + self.multiplicity)):
            raise InvalidParameterError(f"spike ranks {self.indices} are not contiguous")


@dataclass(frozen=True, slots=True)
class SpectrumSpec:
    """Population eigenvalue layout.

    Attributes:
        p: Dimension.
        bulk: Limiting bulk measure H.
        spikes: Spike groups, descending by alpha.
        eigenvalues: Full population spectrum beta_{p,1..p}, descending.
    """
    p: int
    bulk: BulkMeasure
    spikes: tuple[SpikeGroup, ...]
    eigenvalues: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.eigenvalues) != self.p:
            raise InvalidDimensionError("eigenvalue list length must equal p")
        if any(a < b for a, b in zip(self.eigenvalues, self.eigenvalues[1:])):
            raise InvalidParameterError("eigenvalues must be descending")
        atoms = self.bulk.support
        for group in self.spikes:
            if np.any(np.abs(atoms - group.alpha) <= _MASS_TOL * max(1.0, group.alpha)):
                raise InvalidParameterError(
                    f"spike {group.alpha} lies on the bulk support"
                )
            for j in group.indices:
                if not 1 <= j <= self.p or self.eigenvalues[j - 1] != group.alpha:
                    raise InvalidParameterError(
                        f"spike {group.alpha} does not sit at rank {j}"
                    )

    @property
    def total_multiplicity(self) -> int:
        return sum(g.multiplicity for g in self.spikes)

    @property
    def spike_ranks(self) -> tuple[int, ...]:
        return tuple(j for g in self.spikes for j in g.indices)


@dataclass(frozen=True, eq=False)
class PopulationModel:
    """Sigma = T_p T_p^* with T_p = V diag(D1, D2)^{1/2} U^*.

    Attributes:
        spec: Spectrum layout.
        U: p x p orthogonal right factor; first M columns form U1.
        V: p x p orthogonal left factor.
        D1: The M spike values (diagonal of D1).
        D2: The p - M bulk values (diagonal of D2).
        case: "case1", "case2" or "custom".
        rho: Toeplitz parameter for case2, else None.
    """
    spec: SpectrumSpec
    U: np.ndarray
    V: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    case: str = "custom"
    rho: float | None = None
    _root: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        p = self.spec.p
        if self.U.shape != (p, p) or self.V.shape != (p, p):
            raise InvalidDimensionError("U and V must be p x p")
        if self.D1.size + self.D2.size != p:
            raise InvalidDimensionError("D1 and D2 must together hold p values")
        if not np.allclose(self.U.T @ self.U, np.eye(p), atol=ORTHO_TOL):
            raise InvalidParameterError("U is not orthogonal")
        for arr in (self.U, self.V, self.D1, self.D2):
            arr.setflags(write=False)
        d = np.sqrt(np.concatenate([self.D1, self.D2]))
        root = (self.V * d) @ self.U.T
        root.setflags(write=False)
        object.__setattr__(self, "_root", root)

    @property
    def p(self) -> int:
        return self.spec.p

    @property
    def m(self) -> int:
        """Total spike multiplicity M."""
        return self.D1.size

    @property
    def root(self) -> np.ndarray:
        """T_p, so that S = T_p (XX^*/n) T_p^*."""
        return self._root

    @property
    def sigma(self) -> np.ndarray:
        return self._root @ self._root.T

    @property
    def u1(self) -> np.ndarray:
        return self.U[:, : self.m]

    @property
    def u2(self) -> np.ndarray:
        return self.U[:, self.m:]

    def fingerprint(self) -> str:
        """SHA-256 of the JSON document; identifies the model in manifests."""
        doc = json.dumps(model_to_document(self), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()


def spike_groups(spec: SpectrumSpec) -> list[SpikeGroup]:
    """Spike groups in descending alpha order."""
    return sorted(spec.spikes, key=lambda g: -g.alpha)


def bulk_of(model: PopulationModel) -> BulkMeasure:
    """Finite-p bulk ESD H_n (spikes excluded)."""
    return BulkMeasure.from_values(model.D2)


def delocalization(model: PopulationModel) -> float:
    """max |U1[t, s]|^2, the finite-p proxy of the delocalization condition."""
    if model.m == 0:
        return 0.0
    return float(np.max(model.u1 ** 2))


def _layout(
    bulk_values: Sequence[float],
    spikes: Sequence[tuple[float, int]],
) -> tuple[list[float], list[SpikeGroup], np.ndarray]:
    """Sort spikes and bulk into the descending spectrum.

    Returns (eigenvalues, groups, order) where order[i] is the 0-based rank of
    entry i of diag(D1, D2). Ties put spikes before bulk values.
    """
    spikes = sorted(spikes, key=lambda s: -s[0])
    alphas = [a for a, _ in spikes]
    if len(set(alphas)) != len(alphas):
        raise InvalidParameterError("spike values must be distinct across groups")
    entries: list[tuple[float, int, int]] = []  # (value, is_bulk, position in diag(D1, D2))
    pos = 0
    for alpha, mult in spikes:
        if mult < 1:
            raise InvalidParameterError("spike multiplicity must be at least 1")
        for _ in range(mult):
            entries.append((float(alpha), 0, pos))
            pos += 1
    bulk_sorted = sorted((float(v) for v in bulk_values), reverse=True)
    for v in bulk_sorted:
        entries.append((v, 1, pos))
        pos += 1

    ranked = sorted(entries, key=lambda e: (-e[0], e[1], e[2]))
    order = np.empty(len(entries), dtype=int)
    for rank, (_, _, position) in enumerate(ranked):
        order[position] = rank

    groups: list[SpikeGroup] = []
    start = 0
    for alpha, mult in spikes:
        ranks = sorted(int(order[i]) + 1 for i in range(start, start + mult))
        groups.append(SpikeGroup(float(alpha), mult, tuple(ranks)))
        start += mult
    eigenvalues = [e[0] for e in ranked]
    return eigenvalues, groups, order


def _assemble(
    p: int,
    bulk_values: Sequence[float],
    spikes: Sequence[tuple[float, int]],
    basis: np.ndarray | None,
    case: str,
    rho: float | None,
) -> PopulationModel:
    if len(bulk_values) + sum(m for _, m in spikes) != p:
        raise InvalidDimensionError("bulk values and spike multiplicities must add up to p")
    if len(bulk_values) == 0:
        raise InvalidDimensionError("at least one bulk value is required")
    eigenvalues, groups, order = _layout(bulk_values, spikes)
    bulk = BulkMeasure.from_values(bulk_values)
    spec = SpectrumSpec(p=p, bulk=bulk, spikes=tuple(groups), eigenvalues=tuple(eigenvalues))

    if basis is None:
        basis = np.eye(p)
    # Column i of U is the basis vector sitting at the rank of diag entry i.
    U = np.ascontiguousarray(basis[:, order])
    m = spec.total_multiplicity
    D1 = np.array([g.alpha for g in groups for _ in range(g.multiplicity)])
    D2 = np.array(sorted((float(v) for v in bulk_values), reverse=True))
    assert D1.size == m
    return PopulationModel(spec=spec, U=U, V=U.copy(), D1=D1, D2=D2, case=case, rho=rho)


def _case_spikes() -> list[tuple[float, int]]:
    return list(zip(CASE_SPIKES, CASE_MULTIPLICITIES))


def build_case1(p: int) -> PopulationModel:
    """Sigma = diag(4, 3, 3, 0.2, 0.2, 0.1, 1, ..., 1) in descending order."""
    if p < CASE_MIN_P:
        raise InvalidDimensionError(f"case1 needs p >= {CASE_MIN_P}, got {p}")
    m = sum(CASE_MULTIPLICITIES)
    return _assemble(p, [CASE_BULK_VALUE] * (p - m), _case_spikes(), None, "case1", None)


def toeplitz_basis(p: int, rho: float) -> np.ndarray:
    """Eigenvectors of the Toeplitz matrix rho^|i-j|, by descending eigenvalue."""
    T = toeplitz(rho ** np.arange(p))
    _, vecs = np.linalg.eigh(T)
    return vecs[:, ::-1]


def build_case2(p: int, rho: float) -> PopulationModel:
    """Sigma = U0 Lambda U0^* with Lambda the case1 spectrum and U0 Toeplitz eigenvectors."""
    if p < CASE_MIN_P:
        raise InvalidDimensionError(f"case2 needs p >= {CASE_MIN_P}, got {p}")
    if not 0 < rho < 1:
        raise InvalidParameterError(f"rho must lie in (0, 1), got {rho}")
    m = sum(CASE_MULTIPLICITIES)
    basis = toeplitz_basis(p, rho)
    return _assemble(
        p, [CASE_BULK_VALUE] * (p - m), _case_spikes(), basis, "case2", float(rho),
    )


def build_custom(
    p: int,
    bulk_atoms: Sequence[tuple[float, int]],
    spikes: Sequence[tuple[float, int]],
    basis: np.ndarray | None = None,
) -> PopulationModel:
    """Model from (value, count) bulk atoms and (alpha, multiplicity) spikes.

    `basis` is an optional p x p orthogonal matrix whose k-th column is the
    population eigenvector of rank k+1; identity when omitted.
    """
    bulk_values: list[float] = []
    for value, count in bulk_atoms:
        if count < 1:
            raise InvalidParameterError("bulk atom counts must be positive")
        bulk_values.extend([float(value)] * int(count))
    if basis is not None and basis.shape != (p, p):
        raise InvalidDimensionError("basis must be p x p")
    return _assemble(p, bulk_values, spikes, basis, "custom", None)


# --- JSON document ---

def model_to_document(model: PopulationModel) -> dict:
    """{p, bulk:[{t,w}], spikes:[{alpha,m,ranks}], case, rho?}."""
    doc: dict = {
        "p": model.p,
        "bulk": [{"t": t, "w": w} for t, w in model.spec.bulk.atoms],
        "spikes": [
            {"alpha": g.alpha, "m": g.multiplicity, "ranks": list(g.indices)}
            for g in model.spec.spikes
        ],
        "case": model.case,
    }
    if model.rho is not None:
        doc["rho"] = model.rho
    return doc


def model_from_document(doc: dict) -> PopulationModel:
    """Rebuild a model from its JSON document.

    Custom models rebuild with the identity basis: the document carries the
    spectrum, not U.
    """
    try:
        case = doc.get("case", "custom")
        p = int(doc["p"])
        if case == "case1":
            return build_case1(p)
        if case == "case2":
            return build_case2(p, float(doc["rho"]))
        if case != "custom":
            raise InvalidParameterError(f"unknown model case {case!r}")
        spikes = [(float(s["alpha"]), int(s["m"])) for s in doc.get("spikes", [])]
        n_bulk = p - sum(m for _, m in spikes)
        atoms: list[tuple[float, int]] = []
        for atom in doc["bulk"]:
            count = float(atom["w"]) * n_bulk
            if abs(count - round(count)) > 1e-6:
                raise InvalidParameterError(
                    f"bulk mass {atom['w']} does not give an integer count for p={p}"
                )
            atoms.append((float(atom["t"]), int(round(count))))
    except (KeyError, TypeError) as exc:
        raise InvalidParameterError(f"malformed model document: {exc}") from exc
    model = build_custom(p, atoms, spikes)
    for g_doc, g in zip(sorted(doc.get("spikes", []), key=lambda s: -s["alpha"]), model.spec.spikes):
        if "ranks" in g_doc and tuple(g_doc["ranks"]) != g.indices:
            raise InvalidParameterError(
                f"document ranks {g_doc['ranks']} disagree with layout {list(g.indices)}"
            )
    return model
