"""Rank-2 Cartesian tensor features and their parity-aware algebra.

A tensor feature is an array of shape ``(..., C, 3, 3)``: ``C`` channels of
3x3 real matrices stored channel-major, row-major inside a block.  All
functions act on the trailing two axes and broadcast over the rest, and work
on plain numpy arrays as well as on :class:`~tensornet.autodiff.Tensor`
values (the model calls them on taped tensors).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from tensornet import autodiff as ad
from tensornet.autodiff import Tensor, value_of

__all__ = [
    "EYE",
    "LEVI_LAYOUT",
    "IrrepsTriple",
    "GroupElement",
    "decompose",
    "recompose",
    "compose_from_vector",
    "skew_from_vector",
    "vector_from_skew",
    "sym_product",
    "irreps_of_sym_product",
    "frobenius_norm_sq",
    "linear_mix",
    "matrix_polynomial_update",
    "group_action",
    "transpose",
    "trace",
]

EYE = np.eye(3)

# LEVI_LAYOUT[k] is the skew matrix carrying unit vector e_k:
#   [[0, vz, -vy], [-vz, 0, vx], [vy, -vx, 0]]
LEVI_LAYOUT = np.zeros((3, 3, 3))
LEVI_LAYOUT[0, 1, 2], LEVI_LAYOUT[0, 2, 1] = 1.0, -1.0
LEVI_LAYOUT[1, 2, 0], LEVI_LAYOUT[1, 0, 2] = 1.0, -1.0
LEVI_LAYOUT[2, 0, 1], LEVI_LAYOUT[2, 1, 0] = 1.0, -1.0

_SKEW_TOL = 1e-10
_ORTHO_TOL = 1e-12


class IrrepsTriple(NamedTuple):
    """Scalar (I), vector (A) and symmetric traceless (S) parts of a feature."""

    I: np.ndarray
    A: np.ndarray
    S: np.ndarray


@dataclass(frozen=True)
class GroupElement:
    """An element of O(3), stored as its 3x3 matrix."""

    matrix: np.ndarray
    kind: str

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"group element must be 3x3, got {m.shape}")
        if np.max(np.abs(m @ m.T - EYE)) > _ORTHO_TOL:
            raise ValueError("matrix is not orthogonal to 1e-12")
        det = np.linalg.det(m)
        if self.kind not in ("rotation", "improper"):
            raise ValueError(f"unknown kind {self.kind!r}")
        expected = 1.0 if self.kind == "rotation" else -1.0
        if abs(det - expected) > _ORTHO_TOL:
            raise ValueError(f"determinant {det:+.15f} inconsistent with kind {self.kind!r}")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_matrix(cls, matrix) -> "GroupElement":
        m = np.asarray(matrix, dtype=float)
        return cls(m, "rotation" if np.linalg.det(m) > 0 else "improper")

    @property
    def is_proper(self) -> bool:
        return self.kind == "rotation"

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        return GroupElement.from_matrix(self.matrix @ other.matrix)


def _check_finite(x, what="tensor feature"):
    if not np.all(np.isfinite(value_of(x))):
        raise ValueError(f"non-finite entries in {what}")


def _eye_like(x):
    return EYE.astype(value_of(x).dtype) if np.issubdtype(value_of(x).dtype, np.floating) else EYE


def transpose(x):
    """Swap the two matrix axes."""
    return ad.swapaxes(x, -1, -2)


def trace(x, keepdims=False):
    """Trace over the trailing 3x3 block."""
    return (x * _eye_like(x)).sum(axis=(-2, -1), keepdims=keepdims)


def decompose(x) -> IrrepsTriple:
    """Split ``x`` into (Tr(x)/3 Id, skew part, symmetric traceless part)."""
    _check_finite(x)
    eye = _eye_like(x)
    iso = trace(x, keepdims=True) * (eye / 3.0)
    xt = transpose(x)
    return IrrepsTriple(iso, (x - xt) * 0.5, (x + xt) * 0.5 - iso)


def recompose(t: IrrepsTriple):
    shapes = {value_of(c).shape for c in t}
    if len(shapes) != 1:
        raise ValueError(f"component shapes differ: {sorted(shapes)}")
    return t.I + t.A + t.S


def skew_from_vector(v):
    """Skew matrices holding ``v`` with the [[0, vz, -vy], ...] layout."""
    v_shape = value_of(v).shape
    layout = LEVI_LAYOUT.reshape(3, 9).astype(value_of(v).dtype)
    flat = ad.matmul(v.reshape(-1, 3), layout) if isinstance(v, Tensor) else \
        np.asarray(v).reshape(-1, 3) @ layout
    return flat.reshape(v_shape[:-1] + (3, 3))


def compose_from_vector(v, f_scalar=1.0) -> IrrepsTriple:
    """Build (f Id, skew(v), v v^T - |v|^2/3 Id) from vectors of shape (..., 3)."""
    v_shape = value_of(v).shape
    if v_shape[-1:] != (3,):
        raise ValueError(f"expected vectors with trailing axis 3, got {v_shape}")
    eye = _eye_like(v)
    lead = v_shape[:-1]
    outer = v.reshape(lead + (3, 1)) * v.reshape(lead + (1, 3))
    norm2 = (v * v).sum(axis=-1).reshape(lead + (1, 1))
    sym = outer - norm2 * (eye / 3.0)
    if isinstance(f_scalar, Tensor) or np.ndim(f_scalar):
        f_scalar = f_scalar.reshape(value_of(f_scalar).shape + (1, 1))
    base = np.broadcast_to(eye, lead + (3, 3))
    if isinstance(v, Tensor):
        base = ad.as_tensor(base.copy(), v)
    return IrrepsTriple(base * f_scalar, skew_from_vector(v), sym)


def vector_from_skew(a):
    """Read (A[1,2], A[2,0], A[0,1]) back out of skew matrices.

    For taped inputs this is written as a contraction with the layout so it
    stays differentiable; on an exactly skew block both forms agree bitwise.
    """
    if isinstance(a, Tensor):
        shape = a.shape
        layout = (0.5 * LEVI_LAYOUT.reshape(3, 9).T).astype(a.dtype)
        return ad.matmul(a.reshape(shape[:-2] + (9,)), layout)
    a = np.asarray(a)
    asym = np.max(np.abs(a + np.swapaxes(a, -1, -2)), initial=0.0)
    if asym > _SKEW_TOL:
        raise ValueError(f"matrix is not skew-symmetric (|A + A^T| = {asym:.3e})")
    return np.stack([a[..., 1, 2], a[..., 2, 0], a[..., 0, 1]], axis=-1)


def _same_shape(x, y):
    sx, sy = value_of(x).shape, value_of(y).shape
    if sx != sy:
        raise ValueError(f"channel layout mismatch: {sx} vs {sy}")


def sym_product(x, y):
    """XY + YX per channel; parity-safe for vector-initialised features."""
    _same_shape(x, y)
    return x @ y + y @ x


def irreps_of_sym_product(tx: IrrepsTriple, ty: IrrepsTriple) -> IrrepsTriple:
    """Closed-form decomposition of XY + YX from the parts of X and Y."""
    for cx, cy in zip(tx, ty):
        _same_shape(cx, cy)
    eye = _eye_like(tx.I)
    ix, ax, sx = tx
    iy, ay, sy = ty
    aa = ax @ ay
    ss = sx @ sy
    aa_t, ss_t = transpose(aa), transpose(ss)
    iso = trace(ix @ iy * 2.0 + aa + aa_t + ss + ss_t, keepdims=True) * (eye / 3.0)
    as_, sa = ax @ sy, ay @ sx
    vec = ix @ ay * 2.0 + ax @ iy * 2.0 + (as_ - transpose(as_)) + (sa - transpose(sa))
    ten = (
        ix @ sy * 2.0
        + sx @ iy * 2.0
        + (aa + aa_t - trace(aa, keepdims=True) * (eye * (2.0 / 3.0)))
        + (ss + ss_t - trace(ss, keepdims=True) * (eye * (2.0 / 3.0)))
    )
    return IrrepsTriple(iso, vec, ten)


def frobenius_norm_sq(x):
    """Tr(X^T X) per channel: the squared Frobenius norm."""
    return (x * x).sum(axis=(-2, -1))


def _mix(w, comp):
    shape = value_of(comp).shape
    c = shape[-3]
    if value_of(w).shape != (c, c):
        raise ValueError(f"mixing weights {value_of(w).shape} do not match {c} channels")
    flat = comp.reshape(shape[:-2] + (9,))
    return (w @ flat).reshape(shape)


def linear_mix(t: IrrepsTriple, w_i, w_a, w_s) -> IrrepsTriple:
    """Bias-free channel mixing applied independently to I, A and S."""
    for w in (w_i, w_a, w_s):
        _check_finite(w, "mixing weights")
    return IrrepsTriple(_mix(w_i, t.I), _mix(w_a, t.A), _mix(w_s, t.S))


def matrix_polynomial_update(y):
    """Y + Y^2 per channel."""
    _check_finite(y)
    return y + y @ y


def group_action(x, g):
    """g X g^T on every channel of a numpy feature."""
    m = g.matrix if isinstance(g, GroupElement) else GroupElement.from_matrix(g).matrix
    return m @ np.asarray(x) @ m.T
