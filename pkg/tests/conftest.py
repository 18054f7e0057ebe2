import numpy as np
import pytest

from tensornet.model import ModelConfig, init_params
from tensornet.synthetic import random_system


def central_fd(fn, x, h=1e-6):
    """Central differences of scalar ``fn`` at every entry of ``x``."""
    x = np.array(x, dtype=float)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = fn(x)
        flat[k] = old - h
        down = fn(x)
        flat[k] = old
        g[k] = (up - down) / (2 * h)
    return out


def rel_err(a, b):
    """max |a - b| / max |b|, with 0/0 read as 0."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    num = np.max(np.abs(a - b), initial=0.0)
    den = np.max(np.abs(b), initial=0.0)
    if den == 0.0:
        return num
    return num / den


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(n_channels=8, n_rbf=8, cutoff=3.0, n_layers=2)


@pytest.fixture(scope="session")
def small_params(small_cfg):
    return init_params(small_cfg, seed=3)


@pytest.fixture(scope="session")
def system20():
    return random_system(20, seed=11)
