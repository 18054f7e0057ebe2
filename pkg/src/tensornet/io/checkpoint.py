"""TNETCKPT binary checkpoints.

Layout (little-endian throughout)::

    magic      8 bytes  b"TNETCKPT"
    version    u32
    config     u32 length + UTF-8 canonical ``key = value`` text
    count      u32 number of arrays
    per array: u16 name length, name bytes, u8 dtype code (0=f32, 1=f64,
               2=i64), u8 rank, rank x u64 dims, raw values (C order)

Parameters are stored as ``param.<name>``; optimizer moments as
``opt.m.<name>`` / ``opt.v.<name>`` and trainer/scheduler counters under
``state.`` so a run can resume exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from tensornet.io.config import canonical_text, parse_canonical_text
from tensornet.model import ModelConfig
from tensornet.nn import ParamStore
from tensornet.training import OptimState, Trainer, TrainConfig

__all__ = ["MAGIC", "VERSION", "CheckpointError", "Checkpoint", "save_checkpoint",
           "load_checkpoint", "encode_checkpoint", "decode_checkpoint", "trainer_checkpoint",
           "restore_trainer"]

MAGIC = b"TNETCKPT"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    """Unreadable checkpoint; the message gives the reason."""


@dataclass
class Checkpoint:
    model_cfg: ModelConfig | None
    train_cfg: TrainConfig | None = None
    params: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # optimizer and trainer state arrays
    metrics: dict = field(default_factory=dict)
    version: int = VERSION

    def param_store(self, seed: int = 0) -> ParamStore:
        store = ParamStore(seed)
        for k, v in self.params.items():
            store.add(k, v)
        return store

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v for k, v in self.params.items()}
        out.update(self.extra)
        return out


def _as_storable(name: str, a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        a = a.astype("<f4" if a.dtype.itemsize == 4 else "<f8", copy=False)
    elif a.dtype.kind in "iub":
        a = a.astype("<i8", copy=False)
    else:
        raise CheckpointError(f"array {name!r} has unsupported dtype {a.dtype}")
    if a.ndim > 255:
        raise CheckpointError(f"array {name!r} has rank {a.ndim} > 255")
    # np.ascontiguousarray would promote 0-d arrays to shape (1,)
    return a if a.flags.c_contiguous else a.copy(order="C")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    text = canonical_text(ckpt.model_cfg, ckpt.train_cfg, ckpt.metrics).encode("utf-8")
    arrays = ckpt.arrays()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
             struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        a = _as_storable(name, a)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"array name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[a.dtype], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.at = 0

    def take(self, n: int, what: str) -> bytes:
        if self.at + n > len(self.data):
            raise CheckpointError(f"truncated file while reading {what} at byte {self.at}")
        out = self.data[self.at:self.at + n]
        self.at += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (this build reads {VERSION})")
    (n_text,) = r.unpack("<I", "config length")
    model_cfg, train_cfg, metrics = parse_canonical_text(r.take(n_text, "config").decode("utf-8"))
    (count,) = r.unpack("<I", "array count")
    params, extra = {}, {}
    for k in range(count):
        (n_name,) = r.unpack("<H", f"name length of array {k}")
        name = r.take(n_name, f"name of array {k}").decode("utf-8")
        code, rank = r.unpack("<BB", f"header of {name!r}")
        if code not in _DTYPES:
            raise CheckpointError(f"array {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        a = np.frombuffer(r.take(nbytes, f"values of {name!r}"), dtype=dtype).reshape(shape).copy()
        if name.startswith("param."):
            params[name[len("param."):]] = a
        else:
            extra[name] = a
    if r.at != len(data):
        raise CheckpointError(f"{len(data) - r.at} trailing bytes after the last array")
    return Checkpoint(model_cfg, train_cfg, params, extra, metrics, version)


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def trainer_checkpoint(trainer: Trainer, metrics: Mapping[str, float] | None = None) -> Checkpoint:
    """Parameters, Adam moments and every counter needed to resume."""
    extra: dict[str, np.ndarray] = {}
    for k in trainer.params.names:
        extra[f"opt.m.{k}"] = trainer.opt.m[k]
    for k in trainer.params.names:
        extra[f"opt.v.{k}"] = trainer.opt.v[k]
    extra["opt.step"] = np.array(trainer.opt.step, dtype=np.int64)
    st = trainer.state()
    sched = st["scheduler"]
    extra["state.epoch"] = np.array(st["epoch"], dtype=np.int64)
    extra["state.batch_pos"] = np.array(st["batch_pos"], dtype=np.int64)
    extra["state.step"] = np.array(st["step"], dtype=np.int64)
    extra["state.epoch_losses"] = np.array(st["epoch_losses"], dtype=np.float64)
    for key in ("lr", "best", "ema_energy"):
        extra[f"state.scheduler.{key}"] = np.array(sched[key], dtype=np.float64)
    for key in ("bad", "since_best"):
        extra[f"state.scheduler.{key}"] = np.array(sched[key], dtype=np.int64)
    extra["state.scheduler.history"] = np.array(sched["history"], dtype=np.float64)
    if metrics is None and trainer.scheduler.history:
        metrics = {"best_val_loss": trainer.scheduler.best,
                   "last_val_loss": trainer.scheduler.history[-1]}
    return Checkpoint(trainer.model_cfg, trainer.train_cfg,
                      {k: v.copy() for k, v in trainer.params.items()}, extra, dict(metrics or {}))


def restore_trainer(ckpt: Checkpoint, dataset, train_cfg: TrainConfig | None = None) -> Trainer:
    """A Trainer positioned exactly where ``ckpt`` was taken.

    ``train_cfg`` replaces the stored training config, e.g. to extend
    ``max_steps``; the optimizer and scheduler state carry over unchanged.
    """
    if ckpt.model_cfg is None or ckpt.train_cfg is None:
        raise CheckpointError("checkpoint lacks model or training config")
    train_cfg = train_cfg or ckpt.train_cfg
    params = ckpt.param_store(train_cfg.seed)
    trainer = Trainer(dataset, ckpt.model_cfg, train_cfg, params=params)
    x = ckpt.extra
    if "opt.step" not in x:
        return trainer
    opt = OptimState({k: x[f"opt.m.{k}"].copy() for k in params.names},
                     {k: x[f"opt.v.{k}"].copy() for k in params.names}, int(x["opt.step"]))
    trainer.load_state({
        "epoch": int(x["state.epoch"]), "batch_pos": int(x["state.batch_pos"]),
        "step": int(x["state.step"]), "epoch_losses": x["state.epoch_losses"].tolist(),
        "scheduler": {"lr": float(x["state.scheduler.lr"]), "best": float(x["state.scheduler.best"]),
                      "bad": int(x["state.scheduler.bad"]),
                      "since_best": int(x["state.scheduler.since_best"]),
                      "ema_energy": float(x["state.scheduler.ema_energy"]),
                      "history": x["state.scheduler.history"].tolist()},
    }, opt)
    return trainer
