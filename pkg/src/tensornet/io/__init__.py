"""File formats: extended XYZ, key = value configs and TNETCKPT checkpoints."""

from tensornet.io.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from tensornet.io.config import ConfigError, parse_config
from tensornet.io.extxyz import Dataset, ExtXYZError, parse_extxyz, write_extxyz

__all__ = ["Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint", "ConfigError",
           "parse_config", "Dataset", "ExtXYZError", "parse_extxyz", "write_extxyz"]
