"""Equivariant message passing with rank-2 Cartesian tensor features.

The package is organised as

* :mod:`tensornet.autodiff`: reverse-mode tape over numpy arrays
* :mod:`tensornet.tensor_algebra`: irreducible decomposition and products
* :mod:`tensornet.geometry`: systems, neighbor lists, radial features
* :mod:`tensornet.model`: embedding, interaction layers and output heads
* :mod:`tensornet.training`: losses, Adam and scheduling
* :mod:`tensornet.verification`: symmetry and gradient checks
* :mod:`tensornet.io`: extended XYZ, configs and checkpoints
"""

from tensornet.geometry import AtomicSystem
from tensornet.model import ModelConfig, energy, forces, init_params, predict
from tensornet.training import TrainConfig, Trainer, train_loop

__all__ = ["AtomicSystem", "ModelConfig", "TrainConfig", "Trainer", "energy", "forces",
           "init_params", "predict", "train_loop"]
__version__ = "0.1.0"
