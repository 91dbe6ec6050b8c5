"""Tape-based reverse-mode autodiff over 2D float64 arrays.

Scope is deliberately narrow: every node value is a rank-2 numpy array of
float64 and graphs are built once per forward pass.  That covers the
velocity network, its training losses, and energy gradients with respect
to inputs, without pulling in a framework dependency.

A :class:`Tape` is single-use: build a graph, call :meth:`Tape.backward`
once, then discard it.  Parameter gradients accumulate into the owning
:class:`~cfmplan.diffcore.optim.ParamStore`, so several tapes may run
backward before one optimizer step (mini-batch accumulation).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from ..errors import ShapeError, StateError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("expected a 2D array, got shape %s" % (arr.shape,))
    return arr


class Var:
    """A node in the graph: a value plus an accumulated gradient slot."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool = False):
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


class Tape:
    """Records operations for one forward pass and replays their VJPs.

    With ``record=False`` the same op surface computes values only; no
    closures are kept and ``backward`` is unavailable.  Use that mode for
    inference-time sampling where gradients are not needed.

    With ``train=False`` parameters enter as constants: backward then
    reaches data leaves only (e.g. an energy gradient with respect to
    the state) without accumulating anything into parameter stores.
    """

    def __init__(self, record: bool = True, train: bool = True):
        self.record = record
        self.train = train
        self._steps: list[tuple[Var, Callable[[np.ndarray], None]]] = []
        self._param_vars: list[tuple[object, str, Var]] = []
        self._param_cache: dict[tuple[int, str], Var] = {}
        self._spent = False

    # ---- node creation -------------------------------------------------

    def leaf(self, value, requires_grad: bool = False) -> Var:
        return Var(_as_matrix(value), requires_grad=requires_grad and self.record)

    def param(self, store, name: str) -> Var:
        """Fetch a parameter block as a graph leaf (cached per tape)."""
        key = (id(store), name)
        var = self._param_cache.get(key)
        if var is None:
            trainable = self.record and self.train
            var = Var(store.blocks[name], requires_grad=trainable)
            self._param_cache[key] = var
            if trainable:
                self._param_vars.append((store, name, var))
        return var

    def _emit(self, value: np.ndarray, parents: Sequence[Var],
              vjp: Callable[[np.ndarray], None]) -> Var:
        needs = self.record and any(p.requires_grad for p in parents)
        out = Var(value, requires_grad=needs)
        if needs:
            self._steps.append((out, vjp))
        return out

    # ---- primitive ops -------------------------------------------------

    def mm(self, a: Var, b: Var) -> Var:
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeError("matmul shapes %s and %s are incompatible"
                             % (a.value.shape, b.value.shape))
        av, bv = a.value, b.value

        def vjp(g):
            if a.requires_grad:
                a._accum(g @ bv.T)
            if b.requires_grad:
                b._accum(av.T @ g)
        return self._emit(av @ bv, (a, b), vjp)

    @staticmethod
    def _bcast_check(sa, sb, opname):
        ok = sa == sb or (sb[0] == 1 and sb[1] == sa[1]) \
            or (sb[1] == 1 and sb[0] == sa[0])
        if not ok:
            raise ShapeError("%s shapes %s and %s are incompatible"
                             % (opname, sa, sb))

    @staticmethod
    def _unbcast(g: np.ndarray, shape) -> np.ndarray:
        if g.shape == shape:
            return g
        if shape[0] == 1:
            return g.sum(axis=0, keepdims=True)
        return g.sum(axis=1, keepdims=True)

    def add(self, a: Var, b: Var) -> Var:
        self._bcast_check(a.value.shape, b.value.shape, "add")

        def vjp(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(self._unbcast(g, b.value.shape))
        return self._emit(a.value + b.value, (a, b), vjp)

    def sub(self, a: Var, b: Var) -> Var:
        self._bcast_check(a.value.shape, b.value.shape, "sub")

        def vjp(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(-self._unbcast(g, b.value.shape))
        return self._emit(a.value - b.value, (a, b), vjp)

    def mul(self, a: Var, b: Var) -> Var:
        self._bcast_check(a.value.shape, b.value.shape, "mul")
        av, bv = a.value, b.value

        def vjp(g):
            if a.requires_grad:
                a._accum(g * bv)
            if b.requires_grad:
                b._accum(self._unbcast(g * av, bv.shape))
        return self._emit(av * bv, (a, b), vjp)

    def scale(self, a: Var, s: float) -> Var:
        s = float(s)

        def vjp(g):
            if a.requires_grad:
                a._accum(g * s)
        return self._emit(a.value * s, (a,), vjp)

    def shift(self, a: Var, c: float) -> Var:
        c = float(c)

        def vjp(g):
            if a.requires_grad:
                a._accum(g)
        return self._emit(a.value + c, (a,), vjp)

    def gelu(self, a: Var) -> Var:
        x = a.value
        phi_cdf = ndtr(x)

        def vjp(g):
            if a.requires_grad:
                pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
                a._accum(g * (phi_cdf + x * pdf))
        return self._emit(x * phi_cdf, (a,), vjp)

    def softmax_rows(self, a: Var) -> Var:
        x = a.value
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)

        def vjp(g):
            if a.requires_grad:
                dot = (g * y).sum(axis=1, keepdims=True)
                a._accum(y * (g - dot))
        return self._emit(y, (a,), vjp)

    def row_sum(self, a: Var) -> Var:
        def vjp(g):
            if a.requires_grad:
                a._accum(np.broadcast_to(g, a.value.shape).copy())
        return self._emit(a.value.sum(axis=1, keepdims=True), (a,), vjp)

    def sum_all(self, a: Var) -> Var:
        def vjp(g):
            if a.requires_grad:
                a._accum(np.full(a.value.shape, g[0, 0]))
        return self._emit(a.value.sum().reshape(1, 1), (a,), vjp)

    def mean_all(self, a: Var) -> Var:
        n = a.value.size

        def vjp(g):
            if a.requires_grad:
                a._accum(np.full(a.value.shape, g[0, 0] / n))
        return self._emit(a.value.mean().reshape(1, 1), (a,), vjp)

    def square(self, a: Var) -> Var:
        av = a.value

        def vjp(g):
            if a.requires_grad:
                a._accum(g * (2.0 * av))
        return self._emit(av * av, (a,), vjp)

    def reshape(self, a: Var, rows: int, cols: int) -> Var:
        if a.value.size != rows * cols:
            raise ShapeError("cannot reshape %s to (%d, %d)"
                             % (a.value.shape, rows, cols))
        src_shape = a.value.shape

        def vjp(g):
            if a.requires_grad:
                a._accum(g.reshape(src_shape))
        return self._emit(a.value.reshape(rows, cols), (a,), vjp)

    def concat_rows(self, parts: Sequence[Var]) -> Var:
        sizes = [p.value.shape[0] for p in parts]
        width = parts[0].value.shape[1]
        for p in parts:
            if p.value.shape[1] != width:
                raise ShapeError("row concat needs equal widths, got %s"
                                 % ([q.value.shape for q in parts],))

        def vjp(g):
            at = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    p._accum(g[at:at + n])
                at += n
        return self._emit(np.concatenate([p.value for p in parts], axis=0),
                          tuple(parts), vjp)

    def custom(self, value, parents: Sequence[Var],
               vjp: Callable[[np.ndarray], None]) -> Var:
        """Insert an externally-differentiated primitive into the graph.

        ``vjp(g)`` must accumulate into each parent via ``Var._accum``.
        """
        return self._emit(_as_matrix(value), tuple(parents), vjp)

    # ---- reverse pass ----------------------------------------------------

    def backward(self, loss: Var) -> None:
        """Propagate d(loss)/d(node) to every leaf; flush parameter grads.

        ``loss`` must be a (1, 1) node on this tape.  A tape can run
        backward exactly once; later calls raise :class:`StateError`.
        """
        if not self.record:
            raise StateError("backward on a non-recording tape")
        if self._spent:
            raise StateError(
                "backward already ran on this tape; build a fresh graph")
        if loss.value.shape != (1, 1):
            raise ShapeError("loss must have shape (1, 1), got %s"
                             % (loss.value.shape,))
        self._spent = True
        loss._accum(np.ones((1, 1)))
        for out, vjp in reversed(self._steps):
            if out.grad is not None:
                vjp(out.grad)
        for store, name, var in self._param_vars:
            if var.grad is not None:
                store.accumulate_grad(name, var.grad)
