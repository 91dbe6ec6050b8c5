"""Minimal reverse-mode autodiff, layers, optimizer, and checkpoint IO."""
from .checkpoint import load_params, read_blocks, save_params, write_blocks
from .layers import (TimeEmbedding, cross_attention, dense, dense_forward,
                     init_attention, init_dense, sinusoidal_embed, transpose)
from .optim import ParamStore, adam_step
from .tape import Tape, Var

__all__ = [
    "Tape", "Var", "ParamStore", "adam_step",
    "TimeEmbedding", "sinusoidal_embed",
    "dense", "dense_forward", "cross_attention", "transpose",
    "init_dense", "init_attention",
    "write_blocks", "read_blocks", "save_params", "load_params",
]
