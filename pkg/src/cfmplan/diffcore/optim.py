"""Parameter storage and the Adam update rule."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError, StateError


class ParamStore:
    """Named 2D float64 parameter blocks plus gradient and Adam slots.

    Blocks keep insertion order; every iteration below is over sorted
    names so updates are independent of construction order.
    """

    def __init__(self):
        self.blocks: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0
        self._has_grads = False

    def add(self, name: str, value) -> np.ndarray:
        if name in self.blocks:
            raise StateError("parameter block %r already exists" % name)
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError("parameter %r must be 2D, got shape %s"
                             % (name, arr.shape))
        arr = arr.copy()
        self.blocks[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        return arr

    def names(self) -> list[str]:
        return sorted(self.blocks)

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        if g.shape != self.blocks[name].shape:
            raise ShapeError("gradient shape %s does not match block %r %s"
                             % (g.shape, name, self.blocks[name].shape))
        self.grads[name] += g
        self._has_grads = True

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[:] = 0.0
        self._has_grads = False

    @property
    def has_grads(self) -> bool:
        return self._has_grads

    def n_params(self) -> int:
        return sum(b.size for b in self.blocks.values())

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            out.add(name, self.blocks[name])
            out._m[name][:] = self._m[name]
            out._v[name][:] = self._v[name]
        out.step = self.step
        return out


def adam_step(store: ParamStore, lr: float,
              betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """Apply one bias-corrected Adam update and clear the gradients.

    Raises :class:`StateError` when no backward pass has populated
    gradients since the last step; a silent no-op there would hide a
    broken training loop.
    """
    if not store._has_grads:
        raise StateError("adam_step called with no accumulated gradients")
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name in store.names():
        g = store.grads[name]
        m = store._m[name]
        v = store._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        store.blocks[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        g[:] = 0.0
    store._has_grads = False
