"""Losses, Adam, warm-up/plateau scheduling and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from tensornet import autodiff as ad
from tensornet.autodiff import Tensor
from tensornet.geometry import AtomicSystem
from tensornet.model import Graph, ModelConfig, forward, init_params
from tensornet.nn import ParamStore

__all__ = [
    "LOSS_TERMS",
    "TrainConfig",
    "OptimState",
    "loss",
    "adam_step",
    "clip_gradients",
    "ema_series",
    "plateau_lr",
    "lr_schedule",
    "PlateauScheduler",
    "Trainer",
    "train_loop",
    "fit_element_references",
    "collect_labels",
]

log = logging.getLogger(__name__)

LOSS_TERMS = ("energy", "forces", "dipole", "polarizability", "shielding")
_HEAD_OF_TERM = {"energy": "energy_forces", "forces": "energy_forces", "dipole": "dipole",
                 "polarizability": "polarizability", "shielding": "shielding"}


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_init: float = 1e-3
    warmup_steps: int = 500
    plateau_patience: int = 25
    plateau_factor: float = 0.8
    lr_min: float = 1e-8
    loss_weights: dict = field(default_factory=lambda: {"energy": 0.5, "forces": 0.5})
    ema_weight: float = 0.0
    grad_clip_norm: float = 40.0
    max_epochs: int = 1000
    max_steps: int | None = None
    early_stop_patience: int = 300
    seed: int = 0
    val_fraction: float = 0.05
    standardize: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_init <= 0 or self.lr_min <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if not 0.0 <= self.ema_weight < 1.0:
            raise ValueError("ema_weight must lie in [0, 1)")
        if self.warmup_steps < 0 or self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("warmup_steps >= 0 and patiences >= 1 required")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        unknown = set(self.loss_weights) - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        self.loss_weights = {k: float(v) for k, v in self.loss_weights.items()}

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class OptimState:
    """Adam moments; defaults beta=(0.9, 0.999), eps=1e-8, no weight decay."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ParamStore) -> "OptimState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


# -- loss ---------------------------------------------------------------------


def _mse(pred, target):
    diff = pred - np.asarray(target, dtype=ad.value_of(pred).dtype)
    return (diff * diff).mean()


def loss(predictions: Mapping, labels: Mapping, weights: Mapping[str, float]):
    """Weighted sum of per-term mean squared errors.

    Each MSE averages over every entry of its term (atoms and components for
    forces, all nine entries for rank-2 heads).  Returns ``(total, terms)``
    where ``terms`` holds the unweighted MSE of every weighted term as a float.
    """
    total = 0.0
    terms = {}
    for term, w in weights.items():
        if w == 0.0:
            continue
        if labels.get(term) is None:
            raise ValueError(f"loss term {term!r} has weight {w} but no labels")
        if predictions.get(term) is None:
            raise ValueError(f"loss term {term!r} has weight {w} but no prediction")
        mse = _mse(predictions[term], labels[term])
        terms[term] = float(ad.value_of(mse))
        total = total + mse * w
    return total, terms


# -- optimizer ----------------------------------------------------------------


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float):
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm)."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], opt: OptimState, lr: float):
    """One in-place Adam update with bias correction."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for name, g in grads.items():
        m = opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        params.values[name] = params.values[name] - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params, opt


# -- learning-rate schedule -------------------------------------------------------


def ema_series(values: Sequence[float], weight: float) -> list[float]:
    """ema_t = w ema_{t-1} + (1 - w) v_t, seeded with the first value."""
    out = []
    for v in values:
        out.append(v if not out else weight * out[-1] + (1.0 - weight) * v)
    return out


def plateau_lr(history: Sequence[float], cfg: TrainConfig) -> float:
    """Learning rate after replaying a per-epoch validation history.

    The rate is multiplied by ``plateau_factor`` whenever ``plateau_patience``
    consecutive epochs fail to strictly beat the best value so far, and never
    drops below ``lr_min``.
    """
    lr, best, bad = cfg.lr_init, math.inf, 0
    for v in history:
        if v < best:
            best, bad = v, 0
        else:
            bad += 1
            if bad >= cfg.plateau_patience:
                lr, bad = max(lr * cfg.plateau_factor, cfg.lr_min), 0
    return lr


def warmup_factor(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps == 0:
        return 1.0
    return min(1.0, step / cfg.warmup_steps)


def lr_schedule(step: int, history: Sequence[float], cfg: TrainConfig) -> float:
    """Linear warm-up from 0 over ``warmup_steps``, times the plateau rate."""
    return warmup_factor(step, cfg) * plateau_lr(history, cfg)


class PlateauScheduler:
    """Incremental form of :func:`plateau_lr` plus the stopping rules."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.lr_init
        self.best = math.inf
        self.bad = 0
        self.since_best = 0
        self.ema_energy: float | None = None
        self.history: list[float] = []

    def metric(self, terms: Mapping[str, float]) -> float:
        """Total weighted validation loss, EMA-smoothed on the energy term."""
        w = self.cfg.loss_weights
        total = 0.0
        for term, mse in terms.items():
            if term == "energy" and self.cfg.ema_weight > 0:
                ew = self.cfg.ema_weight
                self.ema_energy = mse if self.ema_energy is None else ew * self.ema_energy + (1 - ew) * mse
                mse = self.ema_energy
            total += w.get(term, 0.0) * mse
        return total

    def update(self, value: float) -> bool:
        """Record an epoch's metric; returns True when training should stop."""
        self.history.append(value)
        if value < self.best:
            self.best, self.bad, self.since_best = value, 0, 0
        else:
            self.bad += 1
            self.since_best += 1
            if self.bad >= self.cfg.plateau_patience:
                self.lr, self.bad = max(self.lr * self.cfg.plateau_factor, self.cfg.lr_min), 0
        return self.lr <= self.cfg.lr_min or self.since_best >= self.cfg.early_stop_patience

    def lr_at(self, step: int) -> float:
        return warmup_factor(step, self.cfg) * self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad": self.bad, "since_best": self.since_best,
                "ema_energy": math.nan if self.ema_energy is None else self.ema_energy,
                "history": list(self.history)}

    def load_state(self, state: Mapping):
        self.lr = float(state["lr"])
        self.best = float(state["best"])
        self.bad = int(state["bad"])
        self.since_best = int(state["since_best"])
        ema = float(state["ema_energy"])
        self.ema_energy = None if math.isnan(ema) else ema
        self.history = [float(v) for v in state["history"]]


# -- data helpers -----------------------------------------------------------------


def collect_labels(systems: Sequence[AtomicSystem]) -> dict:
    """Stack per-system labels; a term is None unless every system has it."""
    def stack(attr):
        vals = [getattr(s, attr) for s in systems]
        if any(v is None for v in vals):
            return None
        if attr in ("forces", "shielding"):
            return np.concatenate(vals)
        return np.stack([np.asarray(v, dtype=float) for v in vals])

    return {"energy": stack("energy"), "forces": stack("forces"), "dipole": stack("dipole"),
            "polarizability": stack("polarizability"), "shielding": stack("shielding")}


def fit_element_references(systems: Sequence[AtomicSystem]) -> dict[int, float]:
    """Least-squares per-element energy offsets from composition counts."""
    elements = sorted({int(z) for s in systems for z in s.atomic_numbers})
    counts = np.array([[np.sum(s.atomic_numbers == z) for z in elements] for s in systems], float)
    energies = np.array([s.energy for s in systems], float)
    coef, *_ = np.linalg.lstsq(counts, energies, rcond=None)
    return {z: float(c) for z, c in zip(elements, coef)}


def _standardized(cfg: ModelConfig, systems: Sequence[AtomicSystem]) -> ModelConfig:
    energies = np.array([s.energy for s in systems if s.energy is not None], float)
    if len(energies) == 0:
        return cfg
    natoms = np.array([len(s) for s in systems if s.energy is not None], float)
    std = float(np.std(energies))
    return replace(cfg, energy_scale=std if std > 0 else 1.0,
                   energy_shift=float(np.mean(energies / natoms)))


# -- training ---------------------------------------------------------------------


def _evaluate_graph(graph, params, cfg, labels, weights, create_graph, dtype):
    """Forward (and force backward) on ``graph``; returns predictions and loss."""
    need_forces = weights.get("forces", 0.0) != 0.0 or labels is None
    heads = tuple(h for h in cfg.heads)
    with ad.taping() as tape:
        tensors = {k: Tensor(v.astype(dtype), requires_grad=create_graph) for k, v in params.items()}
        pos = Tensor(graph.positions.astype(dtype), requires_grad=need_forces)
        out = forward(graph, tensors, cfg, pos=pos, heads=heads)
        preds = {"energy": out.get("energy")}
        if need_forces and "energy" in out:
            total_u = out["energy"].sum()
            if total_u.node is None:
                preds["forces"] = Tensor(np.zeros_like(pos.value))
            else:
                (g,) = ad.backward(tape, total_u, [pos], create_graph=create_graph)
                preds["forces"] = -g
        for h in ("dipole", "polarizability", "shielding"):
            preds[h] = out.get(h)
        if labels is None:
            return preds, None, None, None
        total, terms = loss(preds, labels, weights)
        grads = None
        if create_graph:
            names = list(tensors)
            if isinstance(total, Tensor) and total.node is not None:
                gl = ad.backward(tape, total, [tensors[k] for k in names])
                grads = {k: g.value.astype(np.float64) for k, g in zip(names, gl)}
            else:
                grads = {k: np.zeros_like(v) for k, v in params.items()}
    return preds, total, terms, grads


class Trainer:
    """Stateful minibatch trainer; every step is reproducible from its state."""

    def __init__(self, dataset: Sequence[AtomicSystem], model_cfg: ModelConfig,
                 train_cfg: TrainConfig, params: ParamStore | None = None,
                 standardize: bool | None = None):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        self.train_cfg = train_cfg
        self.dataset = list(dataset)
        order = np.random.default_rng(train_cfg.seed).permutation(len(self.dataset))
        n_val = int(round(train_cfg.val_fraction * len(self.dataset)))
        if n_val >= len(self.dataset):
            raise ValueError("validation split leaves no training data")
        self.val_idx = np.sort(order[:n_val])
        self.train_idx = np.sort(order[n_val:])
        do_std = train_cfg.standardize if standardize is None else standardize
        if do_std and params is None:
            model_cfg = _standardized(model_cfg, self.train_set)
        self.model_cfg = model_cfg
        self.params = init_params(model_cfg, train_cfg.seed) if params is None else params
        self.opt = OptimState.zeros(self.params)
        self.scheduler = PlateauScheduler(train_cfg)
        self.epoch = 0
        self.batch_pos = 0
        self.step_count = 0
        self.epoch_losses: list[float] = []
        self.log_lines: list[str] = []
        self.last_improved = False
        for term, w in train_cfg.loss_weights.items():
            if w != 0.0 and _HEAD_OF_TERM[term] not in model_cfg.heads:
                raise ValueError(f"loss term {term!r} needs head {_HEAD_OF_TERM[term]!r}")

    @property
    def train_set(self) -> list[AtomicSystem]:
        return [self.dataset[i] for i in self.train_idx]

    @property
    def val_set(self) -> list[AtomicSystem]:
        # with no held-out split, validation runs on the training systems
        if len(self.val_idx) == 0:
            return self.train_set
        return [self.dataset[i] for i in self.val_idx]

    def _epoch_order(self) -> np.ndarray:
        rng = np.random.default_rng([self.train_cfg.seed, self.epoch])
        return self.train_idx[rng.permutation(len(self.train_idx))]

    def next_batch(self) -> list[AtomicSystem]:
        order = self._epoch_order()
        sel = order[self.batch_pos:self.batch_pos + self.train_cfg.batch_size]
        return [self.dataset[i] for i in sel]

    def step(self) -> dict:
        """One optimizer step on the next minibatch."""
        cfg = self.train_cfg
        batch = self.next_batch()
        graph = Graph.from_systems(batch, self.model_cfg.cutoff)
        labels = collect_labels(batch)
        dtype = np.dtype(self.model_cfg.dtype)
        _, total, terms, grads = _evaluate_graph(graph, self.params, self.model_cfg, labels,
                                                 cfg.loss_weights, True, dtype)
        value = float(ad.value_of(total))
        if not math.isfinite(value):
            raise FloatingPointError(
                f"non-finite loss at epoch {self.epoch} step {self.step_count}: {terms}")
        grads, gnorm = clip_gradients(grads, cfg.grad_clip_norm)
        lr = self.scheduler.lr_at(self.step_count + 1)
        adam_step(self.params, grads, self.opt, lr)
        self.params.set_grads(grads)
        self.step_count += 1
        self.epoch_losses.append(value)
        self.batch_pos += cfg.batch_size
        record = {"step": self.step_count, "lr": lr, "loss": value, "grad_norm": gnorm, **terms}
        if self.batch_pos >= len(self.train_idx):
            record["epoch_end"] = self.end_epoch()
        return record

    def end_epoch(self) -> bool:
        """Validate, log, advance the scheduler; returns the stop flag."""
        val = self.evaluate(self.val_set)
        metric = self.scheduler.metric({k: val[k] for k in self.train_cfg.loss_weights
                                        if self.train_cfg.loss_weights[k] != 0.0})
        improved = metric < self.scheduler.best
        stop = self.scheduler.update(metric)
        train_loss = float(np.mean(self.epoch_losses)) if self.epoch_losses else math.nan
        extras = " ".join(f"{k}={val[k]:.10g}" for k in LOSS_TERMS if k in val)
        line = (f"epoch {self.epoch} step {self.step_count} lr {self.scheduler.lr_at(self.step_count):.10g} "
                f"train_loss {train_loss:.10g} val_loss {metric:.10g}" + (f" {extras}" if extras else ""))
        self.log_lines.append(line)
        log.info(line)
        self.last_improved = improved
        self.epoch += 1
        self.batch_pos = 0
        self.epoch_losses = []
        return stop

    def evaluate(self, systems: Sequence[AtomicSystem], batch_size: int = 64) -> dict:
        """Unweighted MSE per labelled term plus energy/force MAEs."""
        sq: dict[str, list] = {}
        ab: dict[str, list] = {}
        dtype = np.dtype(self.model_cfg.dtype)
        want = {t: 1.0 for t in LOSS_TERMS if _HEAD_OF_TERM[t] in self.model_cfg.heads}
        for k in range(0, len(systems), batch_size):
            chunk = systems[k:k + batch_size]
            graph = Graph.from_systems(chunk, self.model_cfg.cutoff)
            labels = collect_labels(chunk)
            preds, *_ = _evaluate_graph(graph, self.params, self.model_cfg, None, want, False, dtype)
            for term in LOSS_TERMS:
                if labels.get(term) is None or preds.get(term) is None:
                    continue
                diff = ad.value_of(preds[term]) - labels[term]
                sq.setdefault(term, []).append(diff.ravel() ** 2)
                ab.setdefault(term, []).append(np.abs(diff.ravel()))
        out = {t: float(np.mean(np.concatenate(v))) for t, v in sq.items()}
        out.update({f"{t}_mae": float(np.mean(np.concatenate(v))) for t, v in ab.items()})
        return out

    def should_continue(self) -> bool:
        cfg = self.train_cfg
        if cfg.max_steps is not None and self.step_count >= cfg.max_steps:
            return False
        return self.epoch < cfg.max_epochs

    def state(self) -> dict:
        return {"epoch": self.epoch, "batch_pos": self.batch_pos, "step": self.step_count,
                "epoch_losses": list(self.epoch_losses), "scheduler": self.scheduler.state()}

    def load_state(self, state: Mapping, opt: OptimState | None = None):
        self.epoch = int(state["epoch"])
        self.batch_pos = int(state["batch_pos"])
        self.step_count = int(state["step"])
        self.epoch_losses = [float(v) for v in state.get("epoch_losses", [])]
        self.scheduler.load_state(state["scheduler"])
        if opt is not None:
            self.opt = opt


def train_loop(dataset: Sequence[AtomicSystem], model_cfg: ModelConfig, train_cfg: TrainConfig,
               out_dir: str | Path | None = None, trainer: Trainer | None = None) -> Trainer:
    """Train until a stopping rule fires.

    With ``out_dir`` the best-by-validation checkpoint is written to
    ``best.ckpt``, the final state to ``last.ckpt`` and the per-epoch
    records to ``metrics.log``.
    """
    from tensornet.io.checkpoint import save_checkpoint, trainer_checkpoint

    trainer = trainer or Trainer(dataset, model_cfg, train_cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    stop = False
    while not stop and trainer.should_continue():
        rec = trainer.step()
        if "epoch_end" in rec:
            stop = rec["epoch_end"]
            if out is not None:
                with open(out / "metrics.log", "a") as fh:
                    fh.write(trainer.log_lines[-1] + "\n")
                if trainer.last_improved:
                    save_checkpoint(out / "best.ckpt", trainer_checkpoint(trainer))
    if out is not None:
        save_checkpoint(out / "last.ckpt", trainer_checkpoint(trainer))
        if not (out / "best.ckpt").exists():
            save_checkpoint(out / "best.ckpt", trainer_checkpoint(trainer))
    return trainer
