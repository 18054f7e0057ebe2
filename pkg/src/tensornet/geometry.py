"""Molecular graphs: atomic systems, cutoff neighbor lists and radial features."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from tensornet import autodiff as ad
from tensornet.autodiff import Tensor, value_of

__all__ = [
    "GeometryError",
    "AtomicSystem",
    "EdgeSet",
    "RadialBasis",
    "build_edges",
    "rbf_expand",
    "cutoff_fn",
    "CELL_LIST_THRESHOLD",
]

CELL_LIST_THRESHOLD = 1000
COINCIDENT_TOL = 1e-8


class GeometryError(ValueError):
    """Raised for degenerate or malformed geometries."""


@dataclass
class AtomicSystem:
    """Atomic numbers and positions (Angstrom), with optional labels."""

    atomic_numbers: np.ndarray
    positions: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None
    dipole: np.ndarray | None = None
    polarizability: np.ndarray | None = None
    shielding: np.ndarray | None = None

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.atomic_numbers)
        if n < 1:
            raise GeometryError("a system needs at least one atom")
        if self.positions.shape != (n, 3):
            raise GeometryError(f"positions shape {self.positions.shape} does not match {n} atoms")
        if np.any(self.atomic_numbers < 1):
            raise GeometryError("atomic numbers must be positive")
        if not np.all(np.isfinite(self.positions)):
            raise GeometryError("positions contain non-finite values")
        if self.energy is not None:
            self.energy = float(self.energy)
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != (n, 3):
                raise GeometryError(f"forces shape {self.forces.shape} does not match {n} atoms")
        if self.dipole is not None:
            self.dipole = np.asarray(self.dipole, dtype=np.float64).reshape(3)
        if self.polarizability is not None:
            pol = np.asarray(self.polarizability, dtype=np.float64).reshape(3, 3)
            if np.max(np.abs(pol - pol.T)) > 1e-8:
                raise GeometryError("polarizability label is not symmetric")
            self.polarizability = pol
        if self.shielding is not None:
            self.shielding = np.asarray(self.shielding, dtype=np.float64).reshape(n, 3, 3)

    def __len__(self):
        return len(self.atomic_numbers)

    def transformed(self, matrix=None, translation=None) -> "AtomicSystem":
        """Positions mapped by r -> M r + t, labels mapped by their own laws.

        Energies are invariant, forces and dipoles transform as vectors,
        polarizability and shielding as rank-2 tensors.
        """
        m = np.eye(3) if matrix is None else np.asarray(matrix, dtype=float)
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        return AtomicSystem(
            self.atomic_numbers.copy(),
            self.positions @ m.T + t,
            energy=self.energy,
            forces=None if self.forces is None else self.forces @ m.T,
            dipole=None if self.dipole is None else m @ self.dipole,
            polarizability=None if self.polarizability is None else m @ self.polarizability @ m.T,
            shielding=None if self.shielding is None else m @ self.shielding @ m.T,
        )

    def permuted(self, perm) -> "AtomicSystem":
        perm = np.asarray(perm)
        return AtomicSystem(
            self.atomic_numbers[perm],
            self.positions[perm],
            energy=self.energy,
            forces=None if self.forces is None else self.forces[perm],
            dipole=self.dipole,
            polarizability=self.polarizability,
            shielding=None if self.shielding is None else self.shielding[perm],
        )


@dataclass
class EdgeSet:
    """Directed neighbor pairs (i, j), with vectors pointing from i to j."""

    src: np.ndarray
    dst: np.ndarray
    distances: np.ndarray
    unit_vectors: np.ndarray

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def __len__(self):
        return len(self.src)


def _filter_pairs(pos, i, j, r_c):
    vec = pos[j] - pos[i]
    dist = np.sqrt(np.sum(vec * vec, axis=-1))
    close = dist < COINCIDENT_TOL
    if np.any(close):
        k = int(np.argmax(close))
        raise GeometryError(
            f"atoms {int(i[k])} and {int(j[k])} coincide (distance {dist[k]:.3e} A)"
        )
    keep = dist <= r_c
    return i[keep], j[keep], vec[keep], dist[keep]


def _brute_candidates(n):
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    return i, j


def _cell_candidates(pos, r_c):
    cell = np.floor((pos - pos.min(axis=0)) / r_c).astype(np.int64)
    buckets: dict[tuple, list[int]] = {}
    for k, key in enumerate(map(tuple, cell)):
        buckets.setdefault(key, []).append(k)
    ii, jj = [], []
    offsets = list(itertools.product((-1, 0, 1), repeat=3))
    for key, members in buckets.items():
        members = np.asarray(members)
        near = [buckets[nb] for nb in
                (tuple(a + b for a, b in zip(key, off)) for off in offsets) if nb in buckets]
        others = np.concatenate([np.asarray(m) for m in near])
        a, b = np.meshgrid(members, others, indexing="ij")
        a, b = a.ravel(), b.ravel()
        keep = a != b
        ii.append(a[keep])
        jj.append(b[keep])
    i = np.concatenate(ii)
    j = np.concatenate(jj)
    order = np.lexsort((j, i))
    return i[order], j[order]


def build_edges(system, r_c: float, method: str = "auto") -> EdgeSet:
    """All ordered pairs with 0 < r_ij <= r_c, sorted by (i, j).

    ``method`` is ``"brute"``, ``"cells"`` or ``"auto"`` (cells above
    :data:`CELL_LIST_THRESHOLD` atoms).  Both paths produce identical sets.
    """
    if r_c <= 0:
        raise GeometryError(f"cutoff must be positive, got {r_c}")
    pos = system.positions if isinstance(system, AtomicSystem) else np.asarray(system, float)
    n = len(pos)
    if method == "auto":
        method = "cells" if n > CELL_LIST_THRESHOLD else "brute"
    if n < 2:
        i = j = np.zeros(0, dtype=np.int64)
    elif method == "brute":
        i, j = _brute_candidates(n)
    elif method == "cells":
        i, j = _cell_candidates(pos, r_c)
    else:
        raise ValueError(f"unknown neighbor search method {method!r}")
    i, j, vec, dist = _filter_pairs(pos, i.astype(np.int64), j.astype(np.int64), r_c)
    unit = vec / dist[:, None] if len(dist) else np.zeros((0, 3))
    return EdgeSet(i, j, dist, unit)


@dataclass
class RadialBasis:
    """Exponential radial basis: centres in exp(-r) space, shared width."""

    d: int
    r_c: float
    mu: np.ndarray = field(default=None)
    beta: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.d < 1 or self.r_c <= 0:
            raise ValueError("need d >= 1 and r_c > 0")
        if self.mu is None:
            self.mu = np.linspace(np.exp(-self.r_c), 1.0, self.d)
        if self.beta is None:
            self.beta = np.full(self.d, (2.0 / self.d * (1.0 - np.exp(-self.r_c))) ** -2)
        self.mu = np.asarray(self.mu, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)


def rbf_expand(r, basis: RadialBasis):
    """exp(-beta_k (exp(-r) - mu_k)^2) for each basis function; shape (..., d)."""
    dtype = value_of(r).dtype if np.issubdtype(value_of(r).dtype, np.floating) else np.float64
    mu = basis.mu.astype(dtype)
    beta = basis.beta.astype(dtype)
    shape = value_of(r).shape
    diff = ad.exp(-r).reshape(shape + (1,)) - mu if isinstance(r, Tensor) \
        else np.exp(-np.asarray(r, dtype=dtype))[..., None] - mu
    return ad.exp(-(beta * (diff * diff)))


def cutoff_fn(r, r_c: float):
    """Cosine envelope 0.5 (cos(pi r / r_c) + 1) inside r_c, zero outside."""
    rv = value_of(r)
    dtype = rv.dtype if np.issubdtype(rv.dtype, np.floating) else np.float64
    inside = (rv <= r_c).astype(dtype)
    return (ad.cos(r * (np.pi / r_c)) + 1.0) * 0.5 * inside
