import itertools
import struct

import numpy as np
import pytest

from tensornet.geometry import AtomicSystem
from tensornet.io.checkpoint import (MAGIC, Checkpoint, CheckpointError, decode_checkpoint,
                                     encode_checkpoint, load_checkpoint, save_checkpoint)
from tensornet.io.config import (ConfigError, canonical_text, parse_canonical_text, parse_config,
                                 parse_config_text)
from tensornet.io.extxyz import (ELEMENTS, ExtXYZError, atomic_number, format_extxyz, parse_extxyz,
                                 parse_extxyz_text, write_extxyz)
from tensornet.model import HEADS, ModelConfig, init_params, predict
from tensornet.training import TrainConfig

# -- extended XYZ ----------------------------------------------------------------------


def test_single_atom_frame():
    (s,) = parse_extxyz_text("1\nenergy=0.0\nH 0 0 0\n")
    assert len(s) == 1 and s.atomic_numbers.tolist() == [1] and s.energy == 0.0
    assert s.forces is None


def test_element_table():
    assert len(ELEMENTS) == 118 and ELEMENTS[0] == "H" and ELEMENTS[-1] == "Og"
    assert atomic_number("C") == 6 and atomic_number("CL") == 17 and atomic_number("Br") == 35


def test_plain_columns_and_quoted_values():
    text = ('2\n comment  Energy=-1.5  dipole="0.1  0.2 0.3" \n'
            "O 0.0 0.0 0.0 1.0 2.0 3.0\nH 0.96 0 0 -1 -2 -3\n")
    (s,) = parse_extxyz_text(text)
    assert s.energy == -1.5
    np.testing.assert_array_equal(s.dipole, [0.1, 0.2, 0.3])
    np.testing.assert_array_equal(s.forces, [[1, 2, 3], [-1, -2, -3]])


def _labelled(seed, labels):
    rng = np.random.default_rng(seed)
    n = 3
    kw = {}
    if "energy" in labels:
        kw["energy"] = rng.standard_normal()
    if "forces" in labels:
        kw["forces"] = rng.standard_normal((n, 3))
    if "dipole" in labels:
        kw["dipole"] = rng.standard_normal(3)
    if "polarizability" in labels:
        p = rng.standard_normal((3, 3))
        kw["polarizability"] = p + p.T
    if "shielding" in labels:
        kw["shielding"] = rng.standard_normal((n, 3, 3))
    return AtomicSystem([6, 1, 8], rng.standard_normal((n, 3)) * 2, **kw)


LABELS = ("energy", "forces", "dipole", "polarizability", "shielding")


@pytest.mark.parametrize("labels", [c for r in range(6) for c in itertools.combinations(LABELS, r)])
def test_round_trip_all_label_combinations(labels, tmp_path):
    systems = [_labelled(k, labels) for k in range(3)]
    write_extxyz(tmp_path / "d.xyz", systems)
    back = parse_extxyz(tmp_path / "d.xyz")
    assert len(back) == 3
    for a, b in zip(systems, back):
        np.testing.assert_array_equal(a.atomic_numbers, b.atomic_numbers)
        np.testing.assert_array_equal(a.positions, b.positions)
        for lab in LABELS:
            va, vb = getattr(a, lab), getattr(b, lab)
            assert (va is None) == (vb is None)
            if va is not None:
                np.testing.assert_array_equal(va, vb)
    assert format_extxyz(back.systems) == format_extxyz(systems)


def test_short_frame_reports_line():
    text = "1\nenergy=1\nH 0 0 0\n3\nenergy=2\nH 0 0 0\nH 1 0 0\n"
    with pytest.raises(ExtXYZError, match=r"line 8: frame starting at line 4 declares 3 atoms"):
        parse_extxyz_text(text)


def test_unknown_symbol_and_bad_float():
    with pytest.raises(ExtXYZError, match=r"line 4: unknown element symbol 'Xx'"):
        parse_extxyz_text("2\n\nH 0 0 0\nXx 1 0 0\n")
    with pytest.raises(ExtXYZError, match=r"line 3: malformed float"):
        parse_extxyz_text("1\n\nH 0 0 zero\n")
    with pytest.raises(ExtXYZError, match=r"line 2: malformed float in energy"):
        parse_extxyz_text("1\nenergy=abc\nH 0 0 0\n")
    with pytest.raises(ExtXYZError, match=r"line 1: expected an atom count"):
        parse_extxyz_text("two\n\nH 0 0 0\n")


# -- config ------------------------------------------------------------------------------


CONFIG = """
# model
n_channels = 16
n_layers = 1
heads = e, mu
group = SO3
element_shifts = 1:-0.5, 6:-38.0
# training
batch_size = 4
weight_energy = 1.0
weight_dipole = 0.25
standardize = false
max_steps = none
"""


def test_config_parse(tmp_path):
    (tmp_path / "c.cfg").write_text(CONFIG)
    m, t = parse_config(tmp_path / "c.cfg")
    assert m.n_channels == 16 and m.n_layers == 1 and m.group == "SO3"
    assert m.heads == ("energy_forces", "dipole")
    assert m.element_shifts == {1: -0.5, 6: -38.0}
    assert t.batch_size == 4 and t.standardize is False and t.max_steps is None
    assert t.loss_weights == {"energy": 1.0, "dipole": 0.25}


@pytest.mark.parametrize("text, message", [
    ("n_chanels = 4", "line 1: unknown key 'n_chanels'"),
    ("batch_size = 4\nbatch_size = 8", "line 2: duplicate key"),
    ("\nlr_init = fast", "line 2: bad value for 'lr_init'"),
    ("heads", "line 1: expected 'key = value'"),
    ("heads = charge", "unknown head"),
])
def test_config_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config_text(text)


def test_canonical_text_round_trip():
    m, t = parse_config_text(CONFIG)
    text = canonical_text(m, t, {"best_val_loss": 0.125})
    m2, t2, metrics = parse_canonical_text(text)
    assert m2 == m and t2 == t and metrics == {"best_val_loss": 0.125}
    assert canonical_text(m2, t2, metrics) == text


# -- checkpoints ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ckpt():
    cfg = ModelConfig(n_channels=4, n_rbf=4, cutoff=3.0, n_layers=1, heads=HEADS)
    params = init_params(cfg, seed=2)
    extra = {"opt.step": np.array(7, dtype=np.int64), "state.f32": np.arange(3, dtype=np.float32)}
    return Checkpoint(cfg, TrainConfig(), dict(params.items()), extra, {"best_val_loss": 0.5})


def test_save_load_save_is_byte_identical(ckpt, tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.model_cfg == ckpt.model_cfg and loaded.train_cfg == ckpt.train_cfg
    for k, v in ckpt.params.items():
        np.testing.assert_array_equal(loaded.params[k], v)
        assert loaded.params[k].dtype == v.dtype
    assert loaded.extra["state.f32"].dtype == np.float32
    assert loaded.extra["opt.step"].shape == ()


def test_layout_header(ckpt):
    data = encode_checkpoint(ckpt)
    assert data[:8] == MAGIC
    version, n_text = struct.unpack("<II", data[8:16])
    assert version == 1
    text = data[16:16 + n_text].decode()
    assert "model.n_channels = 4" in text
    (count,) = struct.unpack("<I", data[16 + n_text:20 + n_text])
    assert count == len(ckpt.arrays())


def test_empty_parameter_set():
    data = encode_checkpoint(Checkpoint(None))
    assert data == MAGIC + struct.pack("<III", 1, 0, 0)
    assert decode_checkpoint(data).params == {}


def test_corrupt_files_rejected(ckpt):
    data = encode_checkpoint(ckpt)
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_checkpoint(b"X" + data[1:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(data[:-5])
    with pytest.raises(CheckpointError, match="unsupported version 2"):
        decode_checkpoint(MAGIC + struct.pack("<I", 2) + data[12:])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(data + b"\0")


def test_predictions_survive_round_trip(ckpt, tmp_path):
    from tensornet.synthetic import random_system

    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    systems = [random_system(6, seed=k, box=3.0) for k in range(2)]
    heads = ("energy", "forces", "dipole", "polarizability", "shielding")
    before = predict(systems, ckpt.param_store(), ckpt.model_cfg, heads=heads)
    after = predict(systems, loaded.param_store(), loaded.model_cfg, heads=heads)
    for a, b in zip(before, after):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
