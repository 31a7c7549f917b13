"""Continuous low-rank factorization for hyperspectral/multispectral image fusion."""

from .cube import FormatError, HsiCube, make_grid, read_cube, write_cube
from .fuse import ClorfModel, TrainConfig, infer, init_model, load_model, save_model, train

__all__ = ["FormatError", "HsiCube", "make_grid", "read_cube", "write_cube", "ClorfModel", "TrainConfig",
           "infer", "init_model", "load_model", "save_model", "train"]
__version__ = "0.1.0"
