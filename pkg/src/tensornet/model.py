"""Model forward pass: embedding, interaction layers and output heads.

Node features are ``(N, C, 3, 3)`` arrays.  Every step is built from taped
primitives so energies can be differentiated with respect to positions
(forces) and parameters (training).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from tensornet import autodiff as ad
from tensornet import tensor_algebra as ta
from tensornet.autodiff import Tensor
from tensornet.geometry import AtomicSystem, RadialBasis, build_edges, cutoff_fn, rbf_expand
from tensornet.nn import ParamStore, channel_mix, init_linear, init_mlp, layer_norm, linear, mlp, mlp_layers

__all__ = [
    "HEADS",
    "DEFAULT_ELEMENT_WEIGHTS",
    "ModelConfig",
    "Graph",
    "init_params",
    "forward",
    "embed",
    "interact",
    "node_states",
    "pseudovector_channels",
    "energy",
    "forces",
    "predict",
]

HEADS = ("energy_forces", "dipole", "polarizability", "shielding")

# shielding weights for H, C, O
DEFAULT_ELEMENT_WEIGHTS = {1: 1.0, 6: 1.0 / 0.167, 8: 1.0 / 0.022}


@dataclass
class ModelConfig:
    n_channels: int = 128
    n_rbf: int = 32
    cutoff: float = 4.5
    n_layers: int = 2
    group: str = "O3"
    max_atomic_number: int = 118
    heads: tuple = ("energy_forces",)
    energy_scale: float = 1.0
    energy_shift: float = 0.0
    element_shifts: dict | None = None
    element_weights: dict = field(default_factory=lambda: dict(DEFAULT_ELEMENT_WEIGHTS))
    dtype: str = "float64"

    def __post_init__(self):
        self.heads = tuple(self.heads)
        if self.n_channels < 1 or self.n_rbf < 1 or self.cutoff <= 0:
            raise ValueError("n_channels, n_rbf and cutoff must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.group not in ("O3", "SO3"):
            raise ValueError(f"group must be O3 or SO3, got {self.group!r}")
        unknown = set(self.heads) - set(HEADS)
        if unknown:
            raise ValueError(f"unknown heads {sorted(unknown)}; choose from {HEADS}")
        if not self.heads:
            raise ValueError("at least one head must be enabled")
        if any(w <= 0 for w in self.element_weights.values()):
            raise ValueError("shielding element weights must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def half_channels(self) -> int:
        return max(self.n_channels // 2, 1)

    def radial_basis(self) -> RadialBasis:
        return RadialBasis(self.n_rbf, self.cutoff)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Graph:
    """One or more systems merged into a single disconnected graph."""

    atomic_numbers: np.ndarray
    positions: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    system_index: np.ndarray
    n_systems: int

    @classmethod
    def from_systems(cls, systems: Sequence[AtomicSystem], cutoff: float) -> "Graph":
        z, pos, src, dst, sys_idx = [], [], [], [], []
        offset = 0
        for k, s in enumerate(systems):
            edges = build_edges(s, cutoff)
            z.append(s.atomic_numbers)
            pos.append(s.positions)
            src.append(edges.src + offset)
            dst.append(edges.dst + offset)
            sys_idx.append(np.full(len(s), k, dtype=np.int64))
            offset += len(s)
        return cls(np.concatenate(z), np.concatenate(pos), np.concatenate(src),
                   np.concatenate(dst), np.concatenate(sys_idx), len(systems))

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Random parameters for ``cfg``; deterministic per seed."""
    store = ParamStore(seed)
    c, d, h = cfg.n_channels, cfg.n_rbf, cfg.half_channels
    store.add("embedding.atom_table", store.rng.standard_normal((cfg.max_atomic_number + 1, c)))
    init_linear(store, "embedding.pair", 2 * c, c)
    for part in "IAS":
        init_linear(store, f"embedding.rbf_{part}", d, c)
    store.add("embedding.norm.gamma", np.ones(c))
    store.add("embedding.norm.beta", np.zeros(c))
    init_mlp(store, "embedding.mlp", [c, 2 * c, 3 * c])
    for part in "IAS":
        init_linear(store, f"embedding.mix_{part}", c, c, bias=False)
    for layer in range(cfg.n_layers):
        name = f"interaction.{layer}"
        for part in "IAS":
            init_linear(store, f"{name}.mix_{part}", c, c, bias=False)
        init_mlp(store, f"{name}.mlp", [d, c, 2 * c, 3 * c])
        for part in "IAS":
            init_linear(store, f"{name}.update_{part}", c, c, bias=False)
    if "energy_forces" in cfg.heads:
        store.add("energy.norm.gamma", np.ones(3 * c))
        store.add("energy.norm.beta", np.zeros(3 * c))
        init_mlp(store, "energy.mlp", [3 * c, c, h, 1], xavier_last=2)
    if "dipole" in cfg.heads:
        _init_chain(store, "dipole.chain", c, h)
        init_mlp(store, "dipole.gate", [c, h, 1], xavier_last=2)
    if "polarizability" in cfg.heads:
        for part in "IS":
            _init_chain(store, f"polarizability.chain_{part}", c, h)
        init_mlp(store, "polarizability.gate", [c, h, 2], xavier_last=2)
    if "shielding" in cfg.heads:
        init_linear(store, "shielding.pseudo_1", c, c, bias=False)
        init_linear(store, "shielding.pseudo_2", c, c, bias=False)
        for part in ("I", "Ap", "S"):
            _init_chain(store, f"shielding.chain_{part}", c, h)
        init_mlp(store, "shielding.gate", [c, h, 3], xavier_last=2)
    return store


def _init_chain(store, name, c, h):
    init_linear(store, f"{name}.0", c, h, bias=False, scheme="xavier")
    init_linear(store, f"{name}.1", h, 1, bias=False, scheme="xavier")


def _gate(f, comp):
    """Scale each channel of ``comp`` (..., C, 3, 3) by ``f`` (..., C)."""
    return f.reshape(f.shape + (1, 1)) * comp


def _split3(f, c):
    return f[..., :c], f[..., c:2 * c], f[..., 2 * c:]


def _normalize(x):
    return x / (ta.frobenius_norm_sq(x) + 1.0).reshape(x.shape[:-2] + (1, 1))


def _compact_maps():
    """Linear maps between flattened 3x3 blocks and (t, v, S upper triangle).

    A block X = t Id + A(v) + S has 1 + 3 + 6 = 10 coordinates.  _SPREAD
    copies one (f_I, f_A, f_S) weight triple onto them.
    """
    unit = np.eye(9).reshape(9, 3, 3)
    t = ta.decompose(unit)
    iu = np.triu_indices(3)
    to_compact = np.concatenate([
        t.I[:, 0, 0][:, None], ta.vector_from_skew(t.A), t.S[:, iu[0], iu[1]]], axis=1)
    from_compact = np.zeros((10, 3, 3))
    from_compact[0] = np.eye(3)
    from_compact[1:4] = ta.LEVI_LAYOUT
    for k, (a, b) in enumerate(zip(*iu)):
        from_compact[4 + k, a, b] = from_compact[4 + k, b, a] = 1.0
    spread = np.zeros((3, 10))
    spread[0, 0], spread[1, 1:4], spread[2, 4:] = 1.0, 1.0, 1.0
    return to_compact, from_compact.reshape(10, 9), spread


_TO_COMPACT, _FROM_COMPACT, _SPREAD = _compact_maps()


class _EdgeGeometry:
    def __init__(self, graph: Graph, pos: Tensor, cfg: ModelConfig):
        vec = ad.take(pos, graph.dst) - ad.take(pos, graph.src)
        self.distances = ad.sqrt((vec * vec).sum(axis=-1))
        self.unit = vec / self.distances.reshape((graph.n_edges, 1))
        self.rbf = rbf_expand(self.distances, cfg.radial_basis())
        self.phi = cutoff_fn(self.distances, cfg.cutoff)


def embed(graph: Graph, geom: _EdgeGeometry, params: Mapping, cfg: ModelConfig):
    """Atomic tensor embeddings X^(i), shape (N, C, 3, 3)."""
    c = cfg.n_channels
    z = graph.atomic_numbers
    if np.any(z > cfg.max_atomic_number):
        bad = int(z[z > cfg.max_atomic_number][0])
        raise ValueError(f"atomic number {bad} exceeds max_atomic_number={cfg.max_atomic_number}")
    z_atom = ad.take(params["embedding.atom_table"], z)
    z_pair = linear(
        ad.concat([ad.take(z_atom, graph.src), ad.take(z_atom, graph.dst)], axis=-1),
        params["embedding.pair.weight"], params["embedding.pair.bias"],
    )
    w = ad.concat([params[f"embedding.rbf_{p}.weight"] for p in "IAS"], axis=0)
    b = ad.concat([params[f"embedding.rbf_{p}.bias"] for p in "IAS"], axis=0)
    e = graph.n_edges
    # (E, 3, C) coefficients of the I0, A0, S0 edge basis, scaled by phi * Z_ij
    coeff = linear(geom.rbf, w, b).reshape((e, 3, c)) * (geom.phi.reshape((e, 1)) * z_pair).reshape((e, 1, c))
    i0, a0, s0 = ta.compose_from_vector(geom.unit)
    basis = ad.concat([i0.reshape((e, 1, 9)), a0.reshape((e, 1, 9)), s0.reshape((e, 1, 9))], axis=1)
    edge_x = ad.matmul(ad.swapaxes(coeff, -1, -2), basis)
    x = ad.index_add(edge_x, graph.src, graph.n_atoms).reshape((graph.n_atoms, c, 3, 3))

    h = layer_norm(ta.frobenius_norm_sq(x), params["embedding.norm.gamma"], params["embedding.norm.beta"])
    f_i, f_a, f_s = _split3(ad.silu(mlp(h, mlp_layers(params, "embedding.mlp"))), c)
    t = ta.linear_mix(ta.decompose(x), params["embedding.mix_I.weight"],
                      params["embedding.mix_A.weight"], params["embedding.mix_S.weight"])
    return _gate(f_i, t.I) + _gate(f_a, t.A) + _gate(f_s, t.S)


def interact(x, graph: Graph, geom: _EdgeGeometry, params: Mapping, cfg: ModelConfig, layer: int):
    """One interaction and node update; returns the new (N, C, 3, 3) state."""
    name = f"interaction.{layer}"
    c = cfg.n_channels
    x = _normalize(x)
    y = ta.linear_mix(ta.decompose(x), params[f"{name}.mix_I.weight"],
                      params[f"{name}.mix_A.weight"], params[f"{name}.mix_S.weight"])
    f = geom.phi.reshape((graph.n_edges, 1)) * ad.silu(mlp(geom.rbf, mlp_layers(params, f"{name}.mlp")))
    e, n = graph.n_edges, graph.n_atoms
    y_full = ta.recompose(y)
    # messages are formed in the compact (I, A, S) coordinates of Y
    y_compact = ad.matmul(y_full.reshape((n, c, 9)), _TO_COMPACT)
    weights = ad.matmul(ad.swapaxes(f.reshape((e, 3, c)), -1, -2), _SPREAD)
    msg = weights * ad.take(y_compact, graph.dst)
    m = ad.matmul(ad.index_add(msg, graph.src, n), _FROM_COMPACT).reshape((n, c, 3, 3))
    _guard(m, layer, "messages")
    if cfg.group == "O3":
        prod = ta.sym_product(y_full, m)
    else:
        prod = (y_full @ m) * 2.0
    _guard(prod, layer, "products")
    t = ta.decompose(prod)
    denom = (ta.frobenius_norm_sq(prod) + 1.0).reshape(prod.shape[:-2] + (1, 1))
    t = ta.IrrepsTriple(t.I / denom, t.A / denom, t.S / denom)
    t = ta.linear_mix(t, params[f"{name}.update_I.weight"],
                      params[f"{name}.update_A.weight"], params[f"{name}.update_S.weight"])
    y_new = ta.recompose(t)
    _guard(y_new, layer, "features")
    return x + ta.matrix_polynomial_update(y_new)


def _guard(x, layer, what):
    """Abort on the first non-finite (atom, channel) block of ``x``."""
    bad = ~np.isfinite(ad.value_of(x))
    if bad.any():
        atom, channel = np.argwhere(bad)[0][:2]
        raise FloatingPointError(
            f"non-finite {what} in interaction layer {layer} (atom {atom}, channel {channel})")


def pseudovector_channels(a, w1, w2):
    """1/2 (A1 A2 - (A1 A2)^T) with A1 = W1 A, A2 = W2 A: parity-even skew channels."""
    shape = a.shape
    flat = a.reshape(shape[:-2] + (9,))
    a1 = channel_mix(w1, flat).reshape(shape)
    a2 = channel_mix(w2, flat).reshape(shape)
    p = a1 @ a2
    return (p - ta.transpose(p)) * 0.5


def _chain(params, name, comp):
    """C -> C/2 -> 1 bias-free channel reduction of (N, C, 3, 3) blocks."""
    n = comp.shape[0]
    flat = comp.reshape(comp.shape[:-2] + (9,))
    out = channel_mix(params[f"{name}.1.weight"], channel_mix(params[f"{name}.0.weight"], flat))
    return out.reshape((n, 3, 3))


def _energy_head(t, graph, params, cfg):
    feats = ad.concat([ta.frobenius_norm_sq(t.I), ta.frobenius_norm_sq(t.A),
                       ta.frobenius_norm_sq(t.S)], axis=-1)
    h = layer_norm(feats, params["energy.norm.gamma"], params["energy.norm.beta"])
    u = mlp(h, mlp_layers(params, "energy.mlp")).reshape((graph.n_atoms,))
    if cfg.element_shifts:
        shift = np.array([cfg.element_shifts.get(int(z), 0.0) for z in graph.atomic_numbers])
    else:
        shift = np.full(graph.n_atoms, cfg.energy_shift)
    atomic = u * cfg.energy_scale + shift.astype(u.dtype)
    return atomic, ad.index_add(atomic, graph.system_index, graph.n_systems)


def _dipole_head(t, graph, params):
    v = ta.vector_from_skew(t.A)
    mu = channel_mix(params["dipole.chain.1.weight"],
                     channel_mix(params["dipole.chain.0.weight"], v)).reshape((graph.n_atoms, 3))
    gate = mlp(ta.frobenius_norm_sq(t.A), mlp_layers(params, "dipole.gate"))
    return ad.index_add(gate * mu, graph.system_index, graph.n_systems)


def _polarizability_head(t, graph, params):
    a_i = _chain(params, "polarizability.chain_I", t.I)
    a_s = _chain(params, "polarizability.chain_S", t.S)
    g = mlp(ta.frobenius_norm_sq(t.I + t.S), mlp_layers(params, "polarizability.gate"))
    n = graph.n_atoms
    per_atom = g[:, 0:1].reshape((n, 1, 1)) * a_i + g[:, 1:2].reshape((n, 1, 1)) * a_s
    return ad.index_add(per_atom, graph.system_index, graph.n_systems)


def _shielding_head(t, graph, params, cfg):
    missing = sorted({int(z) for z in graph.atomic_numbers} - set(cfg.element_weights))
    if missing:
        raise ValueError(f"no shielding weight for element(s) {missing}")
    a_p = pseudovector_channels(t.A, params["shielding.pseudo_1.weight"], params["shielding.pseudo_2.weight"])
    parts = [_chain(params, f"shielding.chain_{p}", comp) for p, comp in (("I", t.I), ("Ap", a_p), ("S", t.S))]
    g = mlp(ta.frobenius_norm_sq(t.I + a_p + t.S), mlp_layers(params, "shielding.gate"))
    n = graph.n_atoms
    total = sum(g[:, k:k + 1].reshape((n, 1, 1)) * parts[k] for k in range(3))
    w = np.array([cfg.element_weights[int(z)] for z in graph.atomic_numbers])
    return total * w.reshape(n, 1, 1).astype(total.dtype)


def _prepare(params, cfg: ModelConfig) -> Mapping:
    dtype = np.dtype(cfg.dtype)
    if isinstance(params, ParamStore):
        return {k: Tensor(v.astype(dtype, copy=False)) for k, v in params.items()}
    return params


def node_states(graph: Graph, pos: Tensor, params: Mapping, cfg: ModelConfig) -> list:
    """Node features after the embedding and after each interaction layer."""
    geom = _EdgeGeometry(graph, pos, cfg)
    x = embed(graph, geom, params, cfg)
    states = [x]
    for layer in range(cfg.n_layers):
        x = interact(x, graph, geom, params, cfg, layer)
        states.append(x)
    return states


def forward(graph: Graph, params: Mapping, cfg: ModelConfig, pos: Tensor | None = None,
            heads: Sequence[str] | None = None) -> dict:
    """Evaluate enabled heads on ``graph``.

    ``params`` maps names to tensors (or is a :class:`ParamStore`); ``pos``
    defaults to a constant tensor of the graph positions.  Returns a dict
    with ``energy`` (per system), ``atomic_energy``, ``dipole``,
    ``polarizability`` (per system) and ``shielding`` (per atom) as
    available.
    """
    params = _prepare(params, cfg)
    dtype = np.dtype(cfg.dtype)
    if pos is None:
        pos = Tensor(graph.positions.astype(dtype))
    heads = cfg.heads if heads is None else tuple(heads)
    x = node_states(graph, pos, params, cfg)[-1]
    t = ta.decompose(x)
    out = {"features": x}
    if "energy_forces" in heads:
        out["atomic_energy"], out["energy"] = _energy_head(t, graph, params, cfg)
    if "dipole" in heads:
        out["dipole"] = _dipole_head(t, graph, params)
    if "polarizability" in heads:
        out["polarizability"] = _polarizability_head(t, graph, params)
    if "shielding" in heads:
        out["shielding"] = _shielding_head(t, graph, params, cfg)
    return out


def _energy_and_forces(graph: Graph, params: ParamStore, cfg: ModelConfig, heads=None):
    dtype = np.dtype(cfg.dtype)
    with ad.taping() as tape:
        pos = Tensor(graph.positions.astype(dtype), requires_grad=True)
        out = forward(graph, params, cfg, pos=pos, heads=heads)
        total = out["energy"].sum()
        if total.node is None:
            f = np.zeros_like(pos.value)
        else:
            (g,) = ad.backward(tape, total, [pos])
            f = -g.value
    return out, f


def energy(system: AtomicSystem, params: ParamStore, cfg: ModelConfig) -> tuple[float, np.ndarray]:
    """Total energy and per-atom contributions."""
    graph = Graph.from_systems([system], cfg.cutoff)
    out = forward(graph, params, cfg, heads=("energy_forces",))
    return float(out["energy"].value[0]), out["atomic_energy"].value.copy()


def forces(system: AtomicSystem, params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """-dU/dpositions by reverse-mode differentiation."""
    graph = Graph.from_systems([system], cfg.cutoff)
    _, f = _energy_and_forces(graph, params, cfg, heads=("energy_forces",))
    return f


def predict(systems: Sequence[AtomicSystem], params: ParamStore, cfg: ModelConfig,
            heads: Sequence[str] = ("energy", "forces")) -> list[dict]:
    """Per-system predictions for the requested outputs.

    ``heads`` may contain ``energy``, ``forces``, ``dipole``,
    ``polarizability`` and ``shielding``.
    """
    want = set(heads)
    model_heads = []
    if want & {"energy", "forces"}:
        model_heads.append("energy_forces")
    model_heads += [h for h in ("dipole", "polarizability", "shielding") if h in want]
    for h in model_heads:
        if h not in cfg.heads:
            raise ValueError(f"head {h!r} is not enabled in this model")
    results = []
    for system in systems:
        graph = Graph.from_systems([system], cfg.cutoff)
        if "forces" in want:
            out, f = _energy_and_forces(graph, params, cfg, heads=model_heads)
        else:
            out, f = forward(graph, params, cfg, heads=model_heads), None
        res = {}
        if "energy" in want or "forces" in want:
            res["energy"] = float(out["energy"].value[0])
            res["atomic_energy"] = out["atomic_energy"].value.copy()
        if f is not None:
            res["forces"] = f
        if "dipole" in want:
            res["dipole"] = out["dipole"].value[0].copy()
        if "polarizability" in want:
            res["polarizability"] = out["polarizability"].value[0].copy()
        if "shielding" in want:
            res["shielding"] = out["shielding"].value.copy()
        results.append(res)
    return results
