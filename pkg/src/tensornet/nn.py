"""Parameter storage and the small set of differentiable layers the model uses."""

from __future__ import annotations

from typing import Iterator, Mapping, Sequence

import numpy as np

from tensornet import autodiff as ad
from tensornet.autodiff import Tensor

__all__ = [
    "ParamStore",
    "linear",
    "silu",
    "layer_norm",
    "mlp",
    "channel_mix",
    "init_linear",
    "init_mlp",
    "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-5


class ParamStore:
    """Named parameter arrays with matching gradient slots.

    Insertion order is kept and defines the canonical parameter order used
    by the optimizer and by checkpoints.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(self.seed)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def items(self):
        return self.values.items()

    @property
    def names(self) -> list[str]:
        return list(self.values)

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(self.seed)
        for k, v in self.values.items():
            out.values[k] = v.astype(dtype)
            out.grads[k] = np.zeros_like(out.values[k])
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        for k, v in self.values.items():
            out.values[k] = v.copy()
            out.grads[k] = self.grads[k].copy()
        return out

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward pass."""
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.values.items()}

    def zero_grad(self):
        for k in self.grads:
            self.grads[k] = np.zeros_like(self.values[k])

    def set_grads(self, grads: Mapping[str, np.ndarray]):
        for k, g in grads.items():
            g = np.asarray(g)
            if g.shape != self.values[k].shape:
                raise ValueError(f"gradient for {k!r} has shape {g.shape}, expected {self.values[k].shape}")
            self.grads[k] = g


def linear(x, weight, bias=None):
    """x W^T (+ b) over the last axis; ``weight`` has shape (n_out, n_in)."""
    w_shape = ad.value_of(weight).shape
    if ad.value_of(x).shape[-1] != w_shape[-1]:
        raise ValueError(f"linear: input width {ad.value_of(x).shape[-1]} != weight fan-in {w_shape[-1]}")
    y = ad.matmul(x, ad.swapaxes(weight, -1, -2))
    return y if bias is None else y + bias


def channel_mix(weight, x):
    """Apply an (n_out, n_in) matrix along the channel axis of (..., C, k) data."""
    return ad.matmul(weight, x)


silu = ad.silu


def layer_norm(x, gamma=None, beta_shift=None, eps: float = LAYER_NORM_EPS):
    """Normalize over the last axis with the biased variance."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    y = centered / ad.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta_shift is not None:
        y = y + beta_shift
    return y


def mlp(x, layers: Sequence[tuple], activation=ad.silu):
    """Linear layers with ``activation`` between them and none after the last."""
    for k, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if k < len(layers) - 1:
            x = activation(x)
    return x


def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int,
                bias: bool = True, scheme: str = "default"):
    """Register ``name.weight`` (and ``name.bias``).

    ``default``: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    ``xavier``: U(-a, a), a = sqrt(6 / (fan_in + fan_out)), zero bias.
    """
    rng = store.rng
    if scheme == "default":
        bound = 1.0 / np.sqrt(fan_in)
        store.add(f"{name}.weight", rng.uniform(-bound, bound, (fan_out, fan_in)))
        if bias:
            store.add(f"{name}.bias", rng.uniform(-bound, bound, fan_out))
    elif scheme == "xavier":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{name}.weight", rng.uniform(-bound, bound, (fan_out, fan_in)))
        if bias:
            store.add(f"{name}.bias", np.zeros(fan_out))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")


def init_mlp(store: ParamStore, name: str, widths: Sequence[int], xavier_last: int = 0):
    """Register an MLP; the final ``xavier_last`` layers use the xavier scheme."""
    n = len(widths) - 1
    for k in range(n):
        scheme = "xavier" if k >= n - xavier_last else "default"
        init_linear(store, f"{name}.{k}", widths[k], widths[k + 1], scheme=scheme)


def mlp_layers(params: Mapping, name: str) -> list[tuple]:
    """Collect (weight, bias) pairs registered by :func:`init_mlp`."""
    layers = []
    k = 0
    while f"{name}.{k}.weight" in params:
        layers.append((params[f"{name}.{k}.weight"], params.get(f"{name}.{k}.bias")))
        k += 1
    if not layers:
        raise KeyError(f"no MLP registered under {name!r}")
    return layers
