"""Network building blocks: dense layers, cross-attention, time features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from .optim import ParamStore
from .tape import Tape, Var

_ACTIVATIONS = ("identity", "gelu")


def init_dense(store: ParamStore, rng: np.random.Generator, name: str,
               fan_in: int, fan_out: int, zero: bool = False) -> None:
    """Add ``name.w`` (fan_in, fan_out) and ``name.b`` (1, fan_out) blocks.

    Kaiming-uniform fan-in scaling unless ``zero``; biases start at zero.
    """
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    store.add(name + ".w", w)
    store.add(name + ".b", np.zeros((1, fan_out)))


def dense_forward(tape: Tape, x: Var, w: Var, b: Var,
                  activation: str = "identity") -> Var:
    """Affine map plus optional exact-erf GELU: act(x @ w + b)."""
    if activation not in _ACTIVATIONS:
        raise ConfigError("unknown activation %r (choose from %s)"
                          % (activation, _ACTIVATIONS))
    out = tape.add(tape.mm(x, w), b)
    if activation == "gelu":
        out = tape.gelu(out)
    return out


def dense(tape: Tape, x: Var, store: ParamStore, name: str,
          activation: str = "identity") -> Var:
    return dense_forward(tape, x, tape.param(store, name + ".w"),
                         tape.param(store, name + ".b"), activation)


def init_attention(store: ParamStore, rng: np.random.Generator,
                   prefix: str, dim: int) -> None:
    """Q/K/V/O projection blocks for one single-head attention unit.

    The output projection starts at zero so a fresh unit is the identity
    (residual only); that keeps early training stable and makes the
    untrained velocity field exactly zero downstream.
    """
    init_dense(store, rng, prefix + ".q", dim, dim)
    init_dense(store, rng, prefix + ".k", dim, dim)
    init_dense(store, rng, prefix + ".v", dim, dim)
    init_dense(store, rng, prefix + ".o", dim, dim, zero=True)


def cross_attention(tape: Tape, query: Var, kv: Var, store: ParamStore,
                    prefix: str) -> tuple[Var, Var]:
    """Single-head scaled dot-product attention with a residual connection.

    ``query``: (n, d) rows attend over ``kv``: (m, d) rows.  Returns the
    residual-added output (n, d) and the attention weights (n, m), whose
    rows sum to one.
    """
    if query.value.shape[1] != kv.value.shape[1]:
        raise ShapeError("attention dims differ: query %s vs kv %s"
                         % (query.value.shape, kv.value.shape))
    dim = query.value.shape[1]
    q = dense(tape, query, store, prefix + ".q")
    k = dense(tape, kv, store, prefix + ".k")
    v = dense(tape, kv, store, prefix + ".v")
    logits = tape.scale(tape.mm(q, transpose(tape, k)), 1.0 / np.sqrt(dim))
    weights = tape.softmax_rows(logits)
    mixed = tape.mm(weights, v)
    out = dense(tape, mixed, store, prefix + ".o")
    return tape.add(query, out), weights


def transpose(tape: Tape, a: Var) -> Var:
    def vjp(g):
        if a.requires_grad:
            a._accum(g.T)
    return tape.custom(a.value.T.copy(), (a,), vjp)


@dataclass(frozen=True)
class TimeEmbedding:
    """Sinusoidal time-feature layout: ``dim`` must be even."""
    dim: int = 64
    base: float = 10000.0

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ConfigError("time embedding dim must be even and positive,"
                              " got %d" % self.dim)


def sinusoidal_embed(t: float, emb: TimeEmbedding) -> np.ndarray:
    """Interleaved sin/cos features of a scalar time, shape (1, dim).

    Component pair i uses frequency base**(-2i/dim); entries stay in
    [-1, 1] for any finite t.
    """
    half = emb.dim // 2
    freqs = emb.base ** (-2.0 * np.arange(half) / emb.dim)
    ang = float(t) * freqs
    out = np.empty((1, emb.dim))
    out[0, 0::2] = np.sin(ang)
    out[0, 1::2] = np.cos(ang)
    return out
