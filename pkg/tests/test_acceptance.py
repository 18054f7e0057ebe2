"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers;
run with ``pytest tests/test_acceptance.py -s`` to see them.
"""

import time

import numpy as np
import pytest

from tensornet import tensor_algebra as ta
from tensornet.geometry import AtomicSystem, RadialBasis
from tensornet.io.checkpoint import (Checkpoint, decode_checkpoint, encode_checkpoint,
                                     load_checkpoint, save_checkpoint)
from tensornet.model import (DEFAULT_ELEMENT_WEIGHTS, HEADS, ModelConfig, energy, init_params,
                             predict)
from tensornet.synthetic import chiral_fixture, morse_dataset, random_system
from tensornet.training import TrainConfig, Trainer
from tensornet.verification import (appendix_oracle_suite, equivariance_report, gradient_report,
                                    random_rotation)

ALL_OUTPUTS = ("energy", "forces", "dipole", "polarizability", "shielding")


def verdict(n, ok, detail, elapsed, budget):
    """Print the criterion line and fail the test if it did not hold."""
    in_time = elapsed < budget
    line = f"{'PASS' if ok and in_time else 'FAIL'} criterion {n:>2}: {detail} ({elapsed:.1f} s / {budget:.0f} s)"
    print("\n" + line)
    assert ok and in_time, line


def test_criterion_01_algebra_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1000, 3, 3))
    i, a, s = ta.decompose(x)
    round_trip = np.max(np.abs(i + a + s - x))
    gram = [np.max(np.abs(np.einsum("nij,nij->n", p, q))) for p, q in ((i, a), (i, s), (a, s))]
    equiv = 0.0
    for k in range(10):
        m = random_rotation([0, k]).matrix * (-1.0 if k % 2 else 1.0)
        moved = ta.decompose(m @ x @ m.T)
        equiv = max(equiv, *(np.max(np.abs(p - m @ q @ m.T)) for p, q in zip(moved, (i, a, s))))
    dev = max(round_trip, *gram, equiv)
    verdict(1, dev <= 1e-13, f"round trip {round_trip:.1e}, orthogonality {max(gram):.1e}, "
            f"equivariance {equiv:.1e} <= 1e-13", time.perf_counter() - t0, 10)


def test_criterion_02_appendix_oracles():
    t0 = time.perf_counter()
    results = appendix_oracle_suite(seed=0, n_cases=1000)
    for r in results:
        print("  " + r.line())
    failed = [r.key for r in results if not r.passed]
    verdict(2, not failed, f"{len(results) - len(failed)}/{len(results)} oracles hold"
            + (f", failing {failed}" if failed else ""), time.perf_counter() - t0, 30)


def test_criterion_03_o3_equivariance():
    t0 = time.perf_counter()
    worst, ok = [], True
    for layers in (0, 1, 2):
        cfg = ModelConfig(n_channels=16, n_rbf=16, n_layers=layers, heads=HEADS)
        params = init_params(cfg, seed=layers)
        rep = equivariance_report(cfg, params, random_system(20, seed=100 + layers), n_trials=50,
                                  seed=layers, tolerance=1e-9)
        ok &= rep.passed
        transform, head, dev = rep.worst()
        worst.append(f"L={layers} {dev:.1e} ({head}, {transform})")
    verdict(3, ok, "worst relative deviation " + "; ".join(worst) + " <= 1e-9",
            time.perf_counter() - t0, 120)


def test_criterion_04_so3_parity_defect():
    t0 = time.perf_counter()
    mol = chiral_fixture()
    mirror = mol.transformed(-np.eye(3))
    gaps, rot_ok = [], True
    for seed in range(10):
        cfg = ModelConfig(n_channels=16, n_rbf=16, cutoff=4.5, n_layers=1, group="SO3")
        params = init_params(cfg, seed=seed)
        rep = equivariance_report(cfg, params, mol, n_trials=10, seed=seed, parity=(False,),
                                  tolerance=1e-9)
        rot_ok &= rep.passed
        gaps.append(abs(energy(mirror, params, cfg)[0] - energy(mol, params, cfg)[0]))
    hits = sum(g > 1e-6 for g in gaps)
    verdict(4, rot_ok and hits >= 9,
            f"rotations {'invariant' if rot_ok else 'NOT invariant'}; |U(-r)-U(r)| > 1e-6 for {hits}/10 "
            f"seeds (need 9), gaps {', '.join(f'{g:.1e}' for g in gaps)}",
            time.perf_counter() - t0, 60)


def test_criterion_05_forces_match_finite_differences():
    t0 = time.perf_counter()
    cfg = ModelConfig(n_channels=16, n_rbf=16, n_layers=2)
    params = init_params(cfg, seed=5)
    systems = [random_system(10, seed=1, box=3.0), random_system(20, seed=2), chiral_fixture(),
               morse_dataset(1, seed=3)[0], AtomicSystem([1, 8], [[0, 0, 0], [0.3, 0.5, 0.7]])]
    reports = [gradient_report(cfg, params, s, h=1e-4) for s in systems]
    rel = max(r.max_rel_error for r in reports)
    net = max(r.net_force for r in reports)
    verdict(5, all(r.passed for r in reports),
            f"{len(systems)} systems, max relative error {rel:.1e} <= 1e-5, net force {net:.1e} <= 1e-8",
            time.perf_counter() - t0, 60)


def test_criterion_06_receptive_field_and_cutoff_continuity():
    t0 = time.perf_counter()
    rc, exact = 3.0, True
    for layers in (0, 1, 2):
        cfg = ModelConfig(n_channels=16, n_rbf=16, cutoff=rc, n_layers=layers)
        params = init_params(cfg, seed=layers)
        # chain with 2.5 A spacing; the last atom sits beyond (L+1) rc from atom 0
        n = layers + 3
        pos = np.zeros((n, 3))
        pos[:, 0] = 2.5 * np.arange(n)
        pos[-1, 0] = (layers + 1) * rc + 0.5
        pos[-2, 0] = pos[-1, 0] - 2.5
        z = np.full(n, 6)
        _, ua = energy(AtomicSystem(z, pos), params, cfg)
        for seed in range(5):
            moved = pos.copy()
            moved[-1] += np.random.default_rng(seed).uniform(-0.4, 0.4, 3)
            _, ub = energy(AtomicSystem(z, moved), params, cfg)
            exact &= ua[0] == ub[0] and ua[-1] != ub[-1]
    cfg = ModelConfig(n_channels=16, n_rbf=16, cutoff=rc, n_layers=2)
    params = init_params(cfg, seed=9)

    def u(d):
        return energy(AtomicSystem([6, 8], [[0, 0, 0], [d, 0, 0]]), params, cfg)[0]
    jumps = [abs(u(rc - e) - u(rc + e)) for e in (1e-2, 1e-3)]
    k = jumps[0] / 1e-2 ** 2
    smooth = jumps[1] <= k * 1e-3 ** 2 and jumps[0] / jumps[1] >= 50
    verdict(6, exact and smooth,
            f"far-atom change in U_0 exactly zero for L=0,1,2: {exact}; jump {jumps[0]:.2e} at 1e-2, "
            f"{jumps[1]:.2e} at 1e-3 (ratio {jumps[0] / jumps[1]:.0f}, need >= 50)",
            time.perf_counter() - t0, 60)


def test_criterion_07_permutation_and_translation():
    t0 = time.perf_counter()
    cfg = ModelConfig(n_channels=16, n_rbf=16, n_layers=2)
    params = init_params(cfg, seed=7)
    mol = random_system(20, seed=21)
    ref = energy(mol, params, cfg)[0]
    rng = np.random.default_rng(7)
    dev = 0.0
    for _ in range(100):
        perm = rng.permutation(20)
        shifted = AtomicSystem(mol.atomic_numbers[perm], mol.positions[perm] + rng.normal(scale=5.0, size=3))
        dev = max(dev, abs(energy(shifted, params, cfg)[0] - ref))
    verdict(7, dev <= 1e-9, f"max |dU| over 100 permutations+translations {dev:.1e} <= 1e-9",
            time.perf_counter() - t0, 60)


@pytest.mark.slow
def test_criterion_08_overfit_morse_fixture():
    t0 = time.perf_counter()
    model_cfg = ModelConfig(n_channels=64, n_rbf=32, cutoff=4.5, n_layers=1)
    train_cfg = TrainConfig(batch_size=8, lr_init=1e-3, warmup_steps=500, plateau_patience=10,
                            val_fraction=0.0, seed=0)
    tr = Trainer(morse_dataset(100, seed=0), model_cfg, train_cfg)
    for _ in range(10):
        tr.step()
    early = tr.evaluate(tr.train_set)
    for _ in range(1990):
        tr.step()
    late = tr.evaluate(tr.train_set)
    e_ratio = early["energy_mae"] / late["energy_mae"]
    f_ratio = early["forces_mae"] / late["forces_mae"]
    verdict(8, e_ratio >= 50 and f_ratio >= 10,
            f"energy MAE {early['energy_mae']:.3e} -> {late['energy_mae']:.3e} ({e_ratio:.0f}x, need 50x); "
            f"force MAE {early['forces_mae']:.3e} -> {late['forces_mae']:.3e} ({f_ratio:.0f}x, need 10x)",
            time.perf_counter() - t0, 300)


def test_criterion_09_serialization(tmp_path):
    t0 = time.perf_counter()
    cfg = ModelConfig(n_channels=16, n_rbf=16, n_layers=2, heads=HEADS)
    params = init_params(cfg, seed=4)
    ckpt = Checkpoint(cfg, TrainConfig(), dict(params.items()), {"opt.step": np.array(3)})
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    same_bytes = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    same_bytes &= encode_checkpoint(decode_checkpoint(encode_checkpoint(ckpt))) == encode_checkpoint(ckpt)
    systems = [random_system(12, seed=s) for s in range(3)]
    before = predict(systems, params, cfg, heads=ALL_OUTPUTS)
    after = predict(systems, loaded.param_store(), loaded.model_cfg, heads=ALL_OUTPUTS)
    same_pred = all(np.array_equal(a[k], b[k]) for a, b in zip(before, after) for k in ALL_OUTPUTS)
    verdict(9, same_bytes and same_pred,
            f"save/load/save byte-identical: {same_bytes}; predictions bit-identical: {same_pred}",
            time.perf_counter() - t0, 10)


def test_criterion_10_anchored_constants():
    t0 = time.perf_counter()
    checks = {}
    for d, rc in ((8, 5.0), (32, 4.5), (16, 3.0)):
        b = RadialBasis(d, rc)
        checks[f"mu endpoints d={d}"] = b.mu[0] == np.exp(-rc) and b.mu[-1] == 1.0
        checks[f"beta d={d}"] = np.all(b.beta == (2.0 / d * (1.0 - np.exp(-rc))) ** -2)
    vx, vy, vz = 0.3, -1.1, 2.0
    a = ta.skew_from_vector(np.array([vx, vy, vz]))
    checks["skew layout"] = np.array_equal(a, [[0, vz, -vy], [-vz, 0, vx], [vy, -vx, 0]])
    want = {1: 1.0, 6: 1 / 0.167, 8: 1 / 0.022}
    checks["shielding weights"] = DEFAULT_ELEMENT_WEIGHTS == want and ModelConfig().element_weights == want
    bad = [k for k, v in checks.items() if not v]
    verdict(10, not bad, f"{len(checks) - len(bad)}/{len(checks)} constants exact"
            + (f", failing {bad}" if bad else ""), time.perf_counter() - t0, 10)
