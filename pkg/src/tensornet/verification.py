"""Symmetry fuzzing, finite-difference force checks and tensor-algebra oracles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tensornet import tensor_algebra as ta
from tensornet.autodiff import Tensor
from tensornet.geometry import AtomicSystem
from tensornet.model import Graph, ModelConfig, energy, forces, init_params, node_states, predict
from tensornet.nn import ParamStore

__all__ = [
    "random_rotation",
    "SymmetryReport",
    "GradientReport",
    "OracleResult",
    "equivariance_report",
    "gradient_report",
    "appendix_oracle_suite",
    "default_tolerance",
    "plain_product_parts",
]

# head name -> how it transforms under r -> M r + t
_LAWS = {"energy": "scalar", "forces": "vector", "dipole": "vector",
         "polarizability": "rank2", "shielding": "rank2"}
_HEAD_OUTPUTS = {"energy_forces": ("energy", "forces"), "dipole": ("dipole",),
                 "polarizability": ("polarizability",), "shielding": ("shielding",)}


def default_tolerance(dtype="float64", double: float = 1e-9) -> float:
    """Double-precision tolerance, relaxed by 1e4 for single precision."""
    return double if np.dtype(dtype) == np.float64 else double * 1e4


def random_rotation(seed) -> ta.GroupElement:
    """Haar-uniform rotation from a normalised Gaussian quaternion."""
    q = np.random.default_rng(seed).standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    m = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return ta.GroupElement(m, "rotation")


def _relative(max_abs: float, scale: float) -> float:
    if max_abs == 0.0:
        return 0.0
    return max_abs / scale if scale > 0 else np.inf


@dataclass
class SymmetryReport:
    """Deviation statistics per (transform, head) over all trials."""

    trials: int
    tolerance: float
    rows: dict = field(default_factory=dict)  # (transform, head) -> stats dict

    def add(self, transform: str, head: str, abs_dev: np.ndarray, scale: float):
        row = self.rows.setdefault((transform, head), {"abs": [], "rel": []})
        m = float(np.max(abs_dev)) if np.size(abs_dev) else 0.0
        row["abs"].append(m)
        row["rel"].append(_relative(m, scale))

    def stats(self, transform: str, head: str) -> dict:
        row = self.rows[(transform, head)]
        return {"max_abs": max(row["abs"]), "mean_abs": float(np.mean(row["abs"])),
                "max_rel": max(row["rel"]), "mean_rel": float(np.mean(row["rel"]))}

    @property
    def passed(self) -> bool:
        return all(self.stats(*k)["max_rel"] <= self.tolerance for k in self.rows)

    def worst(self) -> tuple[str, str, float]:
        key = max(self.rows, key=lambda k: self.stats(*k)["max_rel"])
        return key[0], key[1], self.stats(*key)["max_rel"]

    def passed_for(self, transforms: Sequence[str]) -> bool:
        return all(self.stats(*k)["max_rel"] <= self.tolerance for k in self.rows if k[0] in transforms)

    def table(self) -> str:
        lines = [f"{'transform':<20} {'head':<15} {'max_abs':>11} {'mean_abs':>11} {'max_rel':>11} {'mean_rel':>11}"]
        for k in self.rows:
            s = self.stats(*k)
            lines.append(f"{k[0]:<20} {k[1]:<15} {s['max_abs']:11.3e} {s['mean_abs']:11.3e} "
                         f"{s['max_rel']:11.3e} {s['mean_rel']:11.3e}")
        return "\n".join(lines)

    def result_line(self) -> str:
        transform, head, dev = self.worst()
        return (f"RESULT {'pass' if self.passed else 'fail'} max_dev={dev:.6e} "
                f"transform={transform} head={head}")


def _outputs(cfg: ModelConfig, heads=None) -> list[str]:
    heads = cfg.heads if heads is None else heads
    return [o for h in heads for o in _HEAD_OUTPUTS[h]]


def _expected(name: str, value, m: np.ndarray):
    law = _LAWS[name]
    if law == "scalar":
        return value
    if law == "vector":
        return value @ m.T
    return m @ value @ m.T


def equivariance_report(cfg: ModelConfig, params: ParamStore, system: AtomicSystem,
                        n_trials: int = 50, seed: int = 0, parity: Sequence[bool] = (False, True),
                        translate: bool = True, tolerance: float | None = None,
                        heads: Sequence[str] | None = None) -> SymmetryReport:
    """Compare predictions on transformed inputs with the transformed predictions.

    Each trial draws a Haar rotation R and a translation t; the improper
    variant uses -R.  Deviations are max absolute differences, made relative
    by the largest magnitude of the reference output.
    """
    outputs = _outputs(cfg, heads)
    tol = default_tolerance(cfg.dtype) if tolerance is None else tolerance
    ref = predict([system], params, cfg, heads=outputs)[0]
    report = SymmetryReport(n_trials, tol)
    rng = np.random.default_rng([seed, 1])
    for trial in range(n_trials):
        r = random_rotation([seed, trial]).matrix
        shift = rng.normal(scale=3.0, size=3) if translate else np.zeros(3)
        for flip in parity:
            m = -r if flip else r
            name = "rotation+parity" if flip else "rotation"
            out = predict([system.transformed(m, shift)], params, cfg, heads=outputs)[0]
            for head in outputs:
                want = _expected(head, np.asarray(ref[head]), m)
                dev = np.abs(np.asarray(out[head]) - want)
                report.add(name, head, dev, float(np.max(np.abs(ref[head]))))
    return report


@dataclass
class GradientReport:
    max_abs_error: float
    max_rel_error: float
    net_force: float
    tolerance: float
    net_tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance and self.net_force <= self.net_tolerance

    def result_line(self) -> str:
        return (f"RESULT {'pass' if self.passed else 'fail'} max_dev={self.max_rel_error:.6e} "
                f"transform=finite_difference head=forces")


def gradient_report(cfg: ModelConfig, params: ParamStore, system: AtomicSystem, h: float = 1e-4,
                    tolerance: float | None = None, net_tolerance: float | None = None) -> GradientReport:
    """Central differences of the energy against the analytic forces."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    tol = default_tolerance(cfg.dtype, 1e-5) if tolerance is None else tolerance
    net_tol = default_tolerance(cfg.dtype, 1e-8) if net_tolerance is None else net_tolerance
    f = forces(system, params, cfg)
    fd = np.zeros_like(f)
    for a in range(len(system)):
        for k in range(3):
            plus = system.positions.copy()
            minus = system.positions.copy()
            plus[a, k] += h
            minus[a, k] -= h
            e_p = energy(AtomicSystem(system.atomic_numbers, plus), params, cfg)[0]
            e_m = energy(AtomicSystem(system.atomic_numbers, minus), params, cfg)[0]
            fd[a, k] = -(e_p - e_m) / (2.0 * h)
    err = float(np.max(np.abs(f - fd)))
    return GradientReport(err, _relative(err, float(np.max(np.abs(fd)))),
                          float(np.linalg.norm(f.sum(axis=0))), tol, net_tol)


# -- algebra oracles -------------------------------------------------------------


@dataclass
class OracleResult:
    key: str
    description: str
    value: float
    threshold: float
    kind: str = "max"  # "max": value <= threshold; "min": value > threshold

    @property
    def passed(self) -> bool:
        return self.value <= self.threshold if self.kind == "max" else self.value > self.threshold

    def line(self) -> str:
        op = "<=" if self.kind == "max" else ">"
        return (f"{'PASS' if self.passed else 'FAIL'} {self.key:<22} {self.value:10.3e} {op} "
                f"{self.threshold:.0e}  {self.description}")


def _sym(x):
    return x + np.swapaxes(x, -1, -2)


def _skew(x):
    return x - np.swapaxes(x, -1, -2)


def _tr(x):
    return np.trace(x, axis1=-2, axis2=-1)[..., None, None] * ta.EYE


def plain_product_parts(tx: ta.IrrepsTriple, ty: ta.IrrepsTriple) -> dict:
    """Closed-form pieces of the decomposition of the plain product XY.

    Returns the scalar part, the vector and pseudovector pieces of the skew
    part and the tensor and pseudotensor pieces of the symmetric traceless
    part, plus the terms that vanish identically.
    """
    ix, ax, sx = tx
    iy, ay, sy = ty
    return {
        "scalar": _tr(ix @ iy + ax @ ay + sx @ sy) / 3.0,
        "trace_zero_1": np.trace(ax @ sy + sx @ ay, axis1=-2, axis2=-1),
        "trace_zero_2": np.trace(ix @ sy + sx @ iy + ix @ ay + ax @ iy, axis1=-2, axis2=-1),
        "vector": ix @ ay + ax @ iy + 0.5 * _skew(ax @ sy) + 0.5 * _skew(ay @ sx),
        "pseudovector": 0.5 * _skew(ax @ ay) + 0.5 * _skew(sx @ sy),
        "iso_zero": ix @ iy - _tr(ix @ iy) / 3.0,
        "pseudotensor": 0.5 * (_sym(ax @ sy) - 2.0 / 3.0 * _tr(ax @ sy))
        + 0.5 * (_sym(sx @ ay) - 2.0 / 3.0 * _tr(sx @ ay)),
        "tensor": ix @ sy + sx @ iy + 0.5 * (_sym(ax @ ay) - 2.0 / 3.0 * _tr(ax @ ay))
        + 0.5 * (_sym(sx @ sy) - 2.0 / 3.0 * _tr(sx @ sy)),
    }


def _vector_built(v, f):
    """f_I Id + f_A skew(v) + f_S (v v^T - |v|^2/3 Id) for vectors v."""
    t = ta.compose_from_vector(v)
    return f[0] * t.I + f[1] * t.A + f[2] * t.S


def _model_weight_parity(group: str, seed: int) -> float:
    """Max relative change of 1/(|X|+1) after one interaction under r -> -r."""
    from tensornet.synthetic import random_system

    cfg = ModelConfig(n_channels=8, n_rbf=8, n_layers=1, group=group)
    params = init_params(cfg, seed)
    tensors = {k: Tensor(v) for k, v in params.items()}
    system = random_system(8, seed=seed, box=3.0)
    weights = []
    for sign in (1.0, -1.0):
        graph = Graph.from_systems([AtomicSystem(system.atomic_numbers, sign * system.positions)], cfg.cutoff)
        x = node_states(graph, Tensor(graph.positions), tensors, cfg)[1]
        weights.append(1.0 / (ta.frobenius_norm_sq(x.value) + 1.0))
    return float(np.max(np.abs(weights[0] - weights[1])) / np.max(np.abs(weights[0])))


def appendix_oracle_suite(seed: int = 0, n_cases: int = 1000, tol: float = 1e-13,
                          generic_floor: float = 1e-3) -> list[OracleResult]:
    """Numerical checks of the parity algebra behind the symmetric product."""
    rng = np.random.default_rng(seed)
    res: list[OracleResult] = []

    # parity acts on vector-built features as transposition
    v = rng.standard_normal((n_cases, 3))
    f = rng.standard_normal((3, n_cases, 1, 1))
    x_v = _vector_built(v, f)
    res.append(OracleResult("transpose_parity", "vector-built X(-v) equals X(v)^T",
                            float(np.max(np.abs(_vector_built(-v, f) - np.swapaxes(x_v, -1, -2)))), tol))

    # generic inputs for the product identities
    x = rng.standard_normal((n_cases, 3, 3))
    y = rng.standard_normal((n_cases, 3, 3))
    tx, ty = ta.decompose(x), ta.decompose(y)
    parts = plain_product_parts(tx, ty)
    direct = ta.decompose(x @ y)
    res.append(OracleResult("vanishing_traces", "traces of mixed I/A/S products vanish",
                            float(max(np.max(np.abs(parts["trace_zero_1"])),
                                      np.max(np.abs(parts["trace_zero_2"])),
                                      np.max(np.abs(parts["iso_zero"])))), tol))
    res.append(OracleResult("plain_closed_forms", "plain product XY: closed-form parts match direct decomposition", float(max(
        np.max(np.abs(parts["scalar"] - direct.I)),
        np.max(np.abs(parts["vector"] + parts["pseudovector"] - direct.A)),
        np.max(np.abs(parts["tensor"] + parts["pseudotensor"] - direct.S)))), tol))

    # plain products mix parities: the pseudovector piece is generically nonzero
    pv = ta.frobenius_norm_sq(0.5 * _skew(tx.A @ ty.A))
    res.append(OracleResult("pseudovector_generic", "pseudovector bracket of XY, 5th percentile of |.|",
                            float(np.percentile(pv, 5)), generic_floor, kind="min"))

    # XY + YX: the parity-mixing brackets cancel
    ax, ay, sx, sy = tx.A, ty.A, tx.S, ty.S
    bracket_a = 0.5 * (ax @ ay - ay @ ax + ay @ ax - ax @ ay)
    bracket_s = 0.5 * (sx @ sy - sy @ sx + sy @ sx - sx @ sy)
    pseudo_t = sum(0.5 * (_sym(p) - 2.0 / 3.0 * _tr(p)) for p in (ax @ sy, sx @ ay, ay @ sx, sy @ ax))
    res.append(OracleResult("bracket_cancellation", "XY+YX: pseudovector and pseudotensor brackets cancel", float(max(
        np.max(np.abs(bracket_a)), np.max(np.abs(bracket_s)), np.max(np.abs(pseudo_t)))), tol))
    closed = ta.irreps_of_sym_product(tx, ty)
    direct_s = ta.decompose(ta.sym_product(x, y))
    res.append(OracleResult("sym_closed_forms", "XY+YX: closed-form parts match direct decomposition", float(max(
        np.max(np.abs(c - d)) for c, d in zip(closed, direct_s))), tol))

    # transposing both factors keeps I and S and flips A
    xt, yt = np.swapaxes(x, -1, -2), np.swapaxes(y, -1, -2)
    flipped = ta.decompose(ta.sym_product(xt, yt))
    res.append(OracleResult("summary_identity", "XY+YX under transposition: (I, A, S) -> (I, -A, S)", float(max(
        np.max(np.abs(flipped.I - direct_s.I)), np.max(np.abs(flipped.A + direct_s.A)),
        np.max(np.abs(flipped.S - direct_s.S)))), tol))

    # squared Frobenius norm is O(3) invariant
    norms = ta.frobenius_norm_sq(x)
    dev = np.max(np.abs(ta.frobenius_norm_sq(xt) - norms) / norms)
    for k in range(8):
        m = random_rotation([seed, k]).matrix * (-1.0 if k % 2 else 1.0)
        dev = max(dev, np.max(np.abs(ta.frobenius_norm_sq(m @ x @ m.T) - norms) / norms))
    res.append(OracleResult("frobenius_invariance", "Tr(X^T X) invariant under rotations, reflections and transposition",
                            float(dev), tol))

    # model level: normalisation weights after one interaction
    res.append(OracleResult("o3_norm_weights", "O3 model: 1/(|X|+1) after one interaction is parity invariant",
                            _model_weight_parity("O3", seed), 1e-12))
    res.append(OracleResult("so3_norm_weights", "SO3 model: 1/(|X|+1) after one interaction changes under parity",
                            _model_weight_parity("SO3", seed), 1e-9, kind="min"))
    return res
