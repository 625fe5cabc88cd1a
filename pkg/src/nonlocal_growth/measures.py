"""Discrete measures on the half-line and the norms used to compare them.

A :class:`DiscreteMeasure` is a finite sum of non-negative point masses
``sum_k m_k * delta(x_k)`` with ``x_k > 0``.  Differences of measures are
carried around as :class:`SignedAtomList`.

The flat (bounded-Lipschitz dual) norm

    ||mu||_flat = sup { sum_k psi(x_k) w_k : |psi| <= 1, Lip(psi) <= 1 }

only depends on the values ``psi_k = psi(x_k)``.  On the line, the pairwise
Lipschitz constraints are implied by those between neighbouring sorted
locations, so the supremum is a small linear program with box constraints
and ``2 (K - 1)`` difference constraints.  Any feasible vector extends to a
globally admissible test function by piecewise-linear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, sparse

__all__ = [
    "DiscreteMeasure",
    "SignedAtomList",
    "difference",
    "tv_norm",
    "flat_norm",
    "weighted_flat_norm",
    "exp_moment",
    "tail_mass",
]


def _merge(locations: np.ndarray, masses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort atoms by location and add up masses sitting at identical points."""
    if locations.size == 0:
        return locations, masses
    order = np.argsort(locations, kind="stable")
    locations = locations[order]
    masses = masses[order]
    uniq, start = np.unique(locations, return_index=True)
    return uniq, np.add.reduceat(masses, start)


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Non-negative atomic measure on (0, inf).

    ``locations`` must be strictly increasing and strictly positive; masses
    must be non-negative.  ``allow_origin`` relaxes the positivity of the
    first location to ``>= 0`` for norm checks that never divide by ``r``.
    """

    locations: np.ndarray
    masses: np.ndarray
    allow_origin: bool = False

    def __post_init__(self):
        x = np.array(self.locations, dtype=float).reshape(-1)
        m = np.array(self.masses, dtype=float).reshape(-1)
        if x.shape != m.shape:
            raise ValueError(f"got {x.size} locations but {m.size} masses")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(m))):
            raise ValueError("atom locations and masses must be finite")
        if x.size:
            if self.allow_origin:
                if x[0] < 0.0:
                    raise ValueError("atom locations must be >= 0")
            elif x[0] <= 0.0:
                raise ValueError("atom locations must be > 0")
            if np.any(np.diff(x) <= 0.0):
                raise ValueError("atom locations must be strictly increasing")
        if np.any(m < 0.0):
            raise ValueError("atom masses must be non-negative")
        x.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "locations", x)
        object.__setattr__(self, "masses", m)

    @classmethod
    def empty(cls) -> "DiscreteMeasure":
        return cls(np.empty(0), np.empty(0))

    def __len__(self) -> int:
        return self.locations.size

    def __iter__(self):
        return zip(self.locations.tolist(), self.masses.tolist())

    def __repr__(self) -> str:
        return f"DiscreteMeasure(n_atoms={len(self)}, total_mass={self.masses.sum():.6g})"

    def signed(self) -> "SignedAtomList":
        return SignedAtomList(self.locations, self.masses)


@dataclass(frozen=True, eq=False)
class SignedAtomList:
    """Signed atomic measure; atoms at equal locations are merged on construction."""

    locations: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        x = np.array(self.locations, dtype=float).reshape(-1)
        w = np.array(self.masses, dtype=float).reshape(-1)
        if x.shape != w.shape:
            raise ValueError(f"got {x.size} locations but {w.size} masses")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
            raise ValueError("atom locations and masses must be finite")
        x, w = _merge(x, w)
        x.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "locations", x)
        object.__setattr__(self, "masses", w)

    @classmethod
    def from_atoms(cls, atoms) -> "SignedAtomList":
        atoms = list(atoms)
        if not atoms:
            return cls(np.empty(0), np.empty(0))
        x, w = zip(*atoms)
        return cls(np.asarray(x, float), np.asarray(w, float))

    def __len__(self) -> int:
        return self.locations.size

    def __neg__(self) -> "SignedAtomList":
        return SignedAtomList(self.locations, -self.masses)

    def __add__(self, other: "SignedAtomList") -> "SignedAtomList":
        return SignedAtomList(
            np.concatenate([self.locations, other.locations]),
            np.concatenate([self.masses, other.masses]),
        )

    def __sub__(self, other: "SignedAtomList") -> "SignedAtomList":
        return self + (-other)

    def scaled(self, factor: float) -> "SignedAtomList":
        return SignedAtomList(self.locations, factor * self.masses)


def difference(mu: DiscreteMeasure, nu: DiscreteMeasure) -> SignedAtomList:
    """``mu - nu`` as a merged signed atom list."""
    return mu.signed() - nu.signed()


def tv_norm(m: DiscreteMeasure | SignedAtomList) -> float:
    """Total variation; for a non-negative measure this is its total mass."""
    return float(np.abs(m.masses).sum())


def _bl_dual(locations: np.ndarray, coeffs: np.ndarray) -> float:
    """max sum_k c_k psi_k  s.t.  |psi_k| <= 1, |psi_k - psi_{k+1}| <= x_{k+1} - x_k."""
    n = coeffs.size
    if n == 0:
        return 0.0
    if n == 1:
        return float(abs(coeffs[0]))
    gaps = np.diff(locations)
    rows = np.arange(n - 1)
    # psi_k - psi_{k+1} <= gap_k
    d = sparse.csr_matrix(
        (np.r_[np.ones(n - 1), -np.ones(n - 1)], (np.r_[rows, rows], np.r_[rows, rows + 1])),
        shape=(n - 1, n),
    )
    a_ub = sparse.vstack([d, -d], format="csr")
    b_ub = np.r_[gaps, gaps]
    res = optimize.linprog(-coeffs, A_ub=a_ub, b_ub=b_ub, bounds=(-1.0, 1.0), method="highs")
    if res.status != 0:
        raise RuntimeError(f"flat-norm LP failed: {res.message}")
    return max(0.0, float(-res.fun))


def flat_norm(d: SignedAtomList | DiscreteMeasure) -> float:
    """Bounded-Lipschitz dual norm of an atomic signed measure."""
    if isinstance(d, DiscreteMeasure):
        d = d.signed()
    return _bl_dual(d.locations, d.masses)


def weighted_flat_norm(d: SignedAtomList | DiscreteMeasure, weight_exponent: int = 1) -> float:
    """Flat norm of ``d / r**e``, with ``e`` in {1, 2}.

    Every location must be strictly positive.
    """
    if weight_exponent not in (1, 2):
        raise ValueError(f"weight_exponent must be 1 or 2, got {weight_exponent!r}")
    if isinstance(d, DiscreteMeasure):
        d = d.signed()
    if len(d) and d.locations[0] <= 0.0:
        raise ValueError("weighted flat norm needs all atom locations > 0")
    return _bl_dual(d.locations, d.masses / d.locations**weight_exponent)


def exp_moment(m: DiscreteMeasure) -> float:
    """``sum_k exp(x_k) m_k``."""
    return float(np.dot(np.exp(m.locations), m.masses))


def tail_mass(m: DiscreteMeasure, r0: float) -> float:
    """Mass carried by atoms strictly beyond ``r0``."""
    if not r0 > 0.0:
        raise ValueError(f"r0 must be positive, got {r0!r}")
    return float(m.masses[m.locations > r0].sum())
