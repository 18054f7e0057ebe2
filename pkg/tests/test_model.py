import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from tensornet import tensor_algebra as ta
from tensornet.autodiff import Tensor
from tensornet.geometry import AtomicSystem
from tensornet.model import (DEFAULT_ELEMENT_WEIGHTS, HEADS, Graph, ModelConfig, energy, forces,
                             forward, init_params, node_states, predict, pseudovector_channels)
from tensornet.synthetic import (best_improper_rmsd, chiral_fixture, morse_energy_forces,
                                 random_system)
from tensornet.verification import random_rotation

from conftest import central_fd


def _states(system, params, cfg):
    graph = Graph.from_systems([system], cfg.cutoff)
    return [s.value for s in node_states(graph, Tensor(graph.positions), params.tensors(False), cfg)]


@pytest.fixture(scope="module")
def all_heads():
    cfg = ModelConfig(n_channels=8, n_rbf=8, cutoff=3.0, n_layers=2, heads=HEADS)
    return cfg, init_params(cfg, seed=5)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_channels=0)
    with pytest.raises(ValueError, match="O3 or SO3"):
        ModelConfig(group="SO2")
    with pytest.raises(ValueError, match="unknown heads"):
        ModelConfig(heads=("charge",))
    with pytest.raises(ValueError, match="positive"):
        ModelConfig(element_weights={1: 0.0})


def test_default_shielding_weights():
    assert DEFAULT_ELEMENT_WEIGHTS == {1: 1.0, 6: 1 / 0.167, 8: 1 / 0.022}
    assert ModelConfig().element_weights == DEFAULT_ELEMENT_WEIGHTS


def test_isolated_atom(all_heads):
    cfg, params = all_heads
    atom = AtomicSystem([6], [[0.3, -0.2, 1.0]])
    for x in _states(atom, params, cfg):
        np.testing.assert_array_equal(x, 0)
    res = predict([atom], params, cfg, heads=("energy", "forces", "dipole", "polarizability", "shielding"))[0]
    assert np.isfinite(res["energy"])
    np.testing.assert_array_equal(res["forces"], 0)
    np.testing.assert_array_equal(res["dipole"], 0)
    np.testing.assert_array_equal(res["polarizability"], 0)
    np.testing.assert_array_equal(res["shielding"], 0)


def test_two_atom_vector_parts_are_opposite(small_cfg, small_params):
    r_hat = np.array([2.0, -1.0, 0.5]) / np.linalg.norm([2.0, -1.0, 0.5])
    pair = AtomicSystem([6, 6], [[0.0, 0.0, 0.0], 1.3 * r_hat])
    x = _states(pair, small_params, small_cfg)[0]
    v0 = ta.vector_from_skew(ta.decompose(x[0]).A)
    v1 = ta.vector_from_skew(ta.decompose(x[1]).A)
    np.testing.assert_allclose(v1, -v0, atol=1e-14)
    assert np.max(np.abs(np.cross(v0, r_hat))) <= 1e-14 * np.max(np.abs(v0))
    assert np.max(np.abs(v0)) > 1e-6


def test_embedding_is_equivariant(small_cfg, small_params, system20):
    x = _states(system20, small_params, small_cfg)[0]
    for seed in range(5):
        g = random_rotation(seed)
        m = g.matrix if seed % 2 == 0 else -g.matrix
        moved = _states(system20.transformed(m, [1.0, 2.0, -0.5]), small_params, small_cfg)[0]
        # positions r -> -r leave vector-built tensors transposed, so compare against the proper part
        expected = ta.group_action(x, g) if seed % 2 == 0 else np.swapaxes(ta.group_action(x, g), -1, -2)
        assert np.max(np.abs(moved - expected)) <= 1e-10 * max(1.0, np.max(np.abs(x)))


def test_component_character_after_each_layer(small_cfg, small_params, system20):
    for x in _states(system20, small_params, small_cfg):
        t = ta.decompose(x)
        np.testing.assert_array_equal(t.A, -np.swapaxes(t.A, -1, -2))
        assert np.max(np.abs(t.S - np.swapaxes(t.S, -1, -2))) == 0
        assert np.max(np.abs(np.trace(t.S, axis1=-2, axis2=-1))) <= 1e-12 * max(1, np.max(np.abs(x)))
        assert np.all(np.isfinite(x))


def test_permutation_and_translation_invariance(small_cfg, small_params, system20):
    u0, _ = energy(system20, small_params, small_cfg)
    rng = np.random.default_rng(0)
    for _ in range(10):
        perm = rng.permutation(len(system20))
        assert abs(energy(system20.permuted(perm), small_params, small_cfg)[0] - u0) <= 1e-9 * abs(u0)
        t = rng.uniform(-10, 10, 3)
        assert abs(energy(system20.transformed(None, t), small_params, small_cfg)[0] - u0) <= 1e-12 * max(1, abs(u0))


def test_o3_energy_invariance_and_force_covariance(small_cfg, small_params, system20):
    u0, _ = energy(system20, small_params, small_cfg)
    f0 = forces(system20, small_params, small_cfg)
    for seed in range(4):
        m = random_rotation(seed).matrix * (-1 if seed % 2 else 1)
        moved = system20.transformed(m)
        assert abs(energy(moved, small_params, small_cfg)[0] - u0) <= 1e-9 * abs(u0)
        np.testing.assert_allclose(forces(moved, small_params, small_cfg), f0 @ m.T,
                                   atol=1e-9 * np.max(np.abs(f0)))


def test_o3_and_so3_differ_on_chiral_molecule():
    # the absolute 1e-6 bound across seeds is exercised by the acceptance suite;
    # here the SO3 defect only has to stand far above round-off
    cfg = ModelConfig(n_channels=8, n_rbf=8, cutoff=3.0, n_layers=1)
    so3 = ModelConfig(n_channels=8, n_rbf=8, cutoff=3.0, n_layers=1, group="SO3")
    mol = chiral_fixture()
    mirrored = mol.transformed(-np.eye(3))
    for seed in range(3):
        params = init_params(cfg, seed=seed)
        assert abs(energy(mol, params, cfg)[0] - energy(mol, params, so3)[0]) > 1e-9
        assert abs(energy(mirrored, params, so3)[0] - energy(mol, params, so3)[0]) > 1e-9
        assert abs(energy(mirrored, params, cfg)[0] - energy(mol, params, cfg)[0]) <= 1e-13


def test_forces_match_finite_differences(small_cfg, small_params):
    s = random_system(8, seed=2, box=3.0)
    f = forces(s, small_params, small_cfg)

    def u(pos):
        return energy(AtomicSystem(s.atomic_numbers, pos), small_params, small_cfg)[0]
    fd = -central_fd(u, s.positions, 1e-4)
    assert np.max(np.abs(f - fd)) / np.max(np.abs(fd)) <= 1e-5
    assert np.linalg.norm(f.sum(axis=0)) <= 1e-8


def test_receptive_field_is_exact():
    rc = 3.0
    for layers in (0, 1, 2):
        cfg = ModelConfig(n_channels=8, n_rbf=8, cutoff=rc, n_layers=layers)
        params = init_params(cfg, seed=layers)
        # a chain with 2.5 A spacing; atom k sits k hops from atom 0
        n = layers + 3
        pos = np.zeros((n, 3))
        pos[:, 0] = 2.5 * np.arange(n)
        pos[-1, 0] = (layers + 1) * rc + 0.5
        pos[-2, 0] = pos[-1, 0] - 2.5
        base = AtomicSystem(np.full(n, 6), pos)
        _, ua = energy(base, params, cfg)
        far = pos.copy()
        far[-1] += [0.7, 0.3, -0.4]
        _, ub = energy(AtomicSystem(np.full(n, 6), far), params, cfg)
        assert ua[0] == ub[0]
        assert ua[-1] != ub[-1]


def test_energy_is_continuous_across_cutoff(small_cfg, small_params):
    rc = small_cfg.cutoff

    def u(d):
        return energy(AtomicSystem([6, 8], [[0, 0, 0], [d, 0, 0]]), small_params, small_cfg)[0]
    jumps = [abs(u(rc - e) - u(rc + e)) for e in (1e-2, 1e-3)]
    k = jumps[0] / 1e-4
    assert jumps[1] <= k * 1e-6 * 1.01
    assert jumps[0] / jumps[1] >= 50


def test_atomic_number_out_of_range(small_cfg, small_params):
    with pytest.raises(ValueError, match="atomic number 119"):
        energy(AtomicSystem([6, 119], [[0, 0, 0], [1, 0, 0]]), small_params, small_cfg)


def test_missing_shielding_weight_rejected(all_heads):
    cfg, params = all_heads
    mol = AtomicSystem([6, 7], [[0, 0, 0], [1.2, 0, 0]])
    with pytest.raises(ValueError, match=r"no shielding weight for element\(s\) \[7\]"):
        predict([mol], params, cfg, heads=("shielding",))


def test_non_finite_features_abort(small_cfg, small_params, system20):
    bad = small_params.copy()
    name = "interaction.1.mlp.0.weight"
    bad.values[name] = np.where(np.arange(bad.values[name].size).reshape(bad.values[name].shape) == 3,
                                np.nan, bad.values[name])
    with pytest.raises(FloatingPointError, match=r"non-finite messages in interaction layer 1 \(atom \d+, channel \d+\)"):
        energy(system20, bad, small_cfg)


def test_pseudovector_channels():
    rng = np.random.default_rng(3)
    w1, w2 = rng.standard_normal((2, 4, 4))
    zero = np.zeros((2, 4, 3, 3))
    np.testing.assert_array_equal(pseudovector_channels(Tensor(zero), w1, w2).value, 0)
    a = ta.skew_from_vector(rng.standard_normal((2, 4, 3)))
    out = pseudovector_channels(Tensor(a), w1, w2).value
    assert np.max(np.abs(out + np.swapaxes(out, -1, -2))) <= 1e-14
    # parity flips every skew input; the product of two of them does not change
    flipped = pseudovector_channels(Tensor(-a), w1, w2).value
    np.testing.assert_array_equal(flipped, out)


def test_head_parities(all_heads, system20):
    cfg, params = all_heads
    heads = ("energy", "forces", "dipole", "polarizability", "shielding")
    ref = predict([system20], params, cfg, heads=heads)[0]
    inv = predict([system20.transformed(-np.eye(3))], params, cfg, heads=heads)[0]
    scale = lambda a: max(1.0, np.max(np.abs(a)))
    np.testing.assert_allclose(inv["dipole"], -ref["dipole"], atol=1e-9 * scale(ref["dipole"]))
    np.testing.assert_allclose(inv["polarizability"], ref["polarizability"],
                               atol=1e-9 * scale(ref["polarizability"]))
    np.testing.assert_allclose(inv["shielding"], ref["shielding"], atol=1e-9 * scale(ref["shielding"]))
    np.testing.assert_allclose(inv["forces"], -ref["forces"], atol=1e-9 * scale(ref["forces"]))
    np.testing.assert_allclose(ref["polarizability"], ref["polarizability"].T, atol=1e-14)


def test_batched_forward_matches_single(small_cfg, small_params):
    systems = [random_system(6, seed=k, box=3.0) for k in range(3)]
    graph = Graph.from_systems(systems, small_cfg.cutoff)
    batched = forward(graph, small_params, small_cfg)["energy"].value
    single = [energy(s, small_params, small_cfg)[0] for s in systems]
    np.testing.assert_allclose(batched, single, rtol=1e-13)


def test_chiral_fixture_has_no_improper_symmetry():
    p = chiral_fixture().positions
    assert best_improper_rmsd(p) > 1e-3
    c = p - p.mean(axis=0)

    def rmsd(rotvec):
        g = -Rotation.from_rotvec(rotvec).as_matrix()
        return np.sqrt(np.mean(np.sum((c @ g.T - c) ** 2, axis=1)))
    rng = np.random.default_rng(0)
    best = min(minimize(rmsd, rng.uniform(-np.pi, np.pi, 3)).fun for _ in range(30))
    assert best > 1e-3
    assert abs(best - best_improper_rmsd(p)) <= 1e-6


def test_morse_forces_match_finite_differences():
    pos = np.random.default_rng(1).normal(size=(5, 3)) * 1.2
    _, f = morse_energy_forces(pos)
    fd = -central_fd(lambda x: morse_energy_forces(x)[0], pos, 1e-5)
    np.testing.assert_allclose(f, fd, atol=1e-8)
