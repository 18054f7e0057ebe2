"""Small synthetic systems used by tests, the CLI and the acceptance suite."""

from __future__ import annotations

import numpy as np

from tensornet.geometry import AtomicSystem

__all__ = [
    "morse_energy_forces",
    "morse_dataset",
    "random_system",
    "chiral_fixture",
    "best_improper_rmsd",
]

# tetrahedral 5-atom skeleton (centre + 4 neighbours at 1.5 A)
_TETRA = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [1.0, -1.0, -1.0],
                   [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]) * (1.5 / np.sqrt(3.0))


def morse_energy_forces(positions, depth=1.0, a=1.0, r0=1.5):
    """Sum over all pairs of depth * (1 - exp(-a (r - r0)))^2, with exact forces."""
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    energy = 0.0
    forces = np.zeros_like(pos)
    for i in range(n):
        for j in range(i + 1, n):
            vec = pos[j] - pos[i]
            r = np.linalg.norm(vec)
            e = np.exp(-a * (r - r0))
            energy += depth * (1.0 - e) ** 2
            dudr = 2.0 * depth * a * (1.0 - e) * e
            forces[i] += dudr * vec / r
            forces[j] -= dudr * vec / r
    return energy, forces


def morse_dataset(n_conformations=100, seed=0, noise=0.15, atomic_numbers=(6, 1, 1, 1, 1),
                  depth=1.0, a=1.0, r0=1.5) -> list[AtomicSystem]:
    """Gaussian-perturbed 5-atom conformations labelled with Morse energies/forces."""
    rng = np.random.default_rng(seed)
    systems = []
    for _ in range(n_conformations):
        pos = _TETRA + rng.normal(scale=noise, size=_TETRA.shape)
        e, f = morse_energy_forces(pos, depth, a, r0)
        systems.append(AtomicSystem(np.array(atomic_numbers), pos, energy=e, forces=f))
    return systems


def random_system(n_atoms=20, seed=0, box=4.0, min_distance=0.9, elements=(1, 6, 8)) -> AtomicSystem:
    """Uniform random atoms in a cube with a minimum separation."""
    rng = np.random.default_rng(seed)
    pos = []
    while len(pos) < n_atoms:
        cand = rng.uniform(0.0, box, 3)
        if all(np.linalg.norm(cand - p) >= min_distance for p in pos):
            pos.append(cand)
    return AtomicSystem(rng.choice(np.asarray(elements), n_atoms), np.array(pos))


def chiral_fixture() -> AtomicSystem:
    """Five distinct elements in a point set with no improper self-symmetry."""
    return AtomicSystem(
        np.array([6, 1, 7, 8, 9]),
        np.array([
            [0.000, 0.000, 0.000],
            [1.090, 0.000, 0.000],
            [-0.420, 1.370, 0.000],
            [-0.510, -0.640, 1.150],
            [-0.330, -0.750, -1.280],
        ]),
    )


def best_improper_rmsd(positions) -> float:
    """Smallest RMSD between a centred point set and any improper image of itself.

    The atom correspondence is the identity (as forced by distinct
    elements); the optimal improper orthogonal matrix is found from the
    eigen-decomposition of P^T P.
    """
    p = np.asarray(positions, float)
    p = p - p.mean(axis=0)
    h = p.T @ p
    w, u = np.linalg.eigh(h)
    # improper optimum flips the direction of least spread
    flip = u @ np.diag([-1.0, 1.0, 1.0]) @ u.T
    return float(np.sqrt(np.mean(np.sum((p @ flip.T - p) ** 2, axis=1))))
