"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


@dataclass
class CoordCheck:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric))
        return abs(self.analytic - self.numeric) / denom if denom else 0.0


def analytic_gradients(loss_fn: Callable[[dict[str, Tensor]], Tensor], store: ParamStore,
                       names=None) -> dict[str, np.ndarray]:
    with T.GradientTape() as tape:
        p = tape.watch(store, names)
        if names is not None:
            p.update({k: Tensor(store[k], _check=False) for k in store if k not in p})
        loss = loss_fn(p)
    return T.backward(loss, tape)


def numeric_gradient(loss_fn, store: ParamStore, name: str, index, h: float = 1e-5) -> float:
    def at(delta):
        p = {k: Tensor(v, _check=False) for k, v in store.items()}
        arr = store[name].copy()
        arr[index] += delta
        p[name] = Tensor(arr, _check=False)
        return loss_fn(p).item()

    return (at(h) - at(-h)) / (2.0 * h)


def check_gradients(loss_fn, store: ParamStore, names=None, n_coords: int = 20, seed: int = 0,
                    h: float = 1e-5, min_grad: float = 1e-7) -> list[CoordCheck]:
    """Compare tape and finite-difference gradients at ``n_coords`` random coordinates.

    Coordinates are drawn uniformly from those whose analytic gradient exceeds
    ``min_grad`` in magnitude; a relative error is meaningless at exact zeros.
    """
    grads = analytic_gradients(loss_fn, store, names)
    cands = [(n, idx) for n in sorted(grads) for idx in zip(*np.nonzero(np.abs(grads[n]) > min_grad))]
    if not cands:
        raise ValueError("no coordinate has a nonzero gradient")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(cands), size=min(n_coords, len(cands)), replace=False)
    out = []
    for k in sorted(picks):
        name, idx = cands[k]
        idx = tuple(int(i) for i in idx)
        out.append(CoordCheck(name, idx, float(grads[name][idx]), numeric_gradient(loss_fn, store, name, idx, h)))
    return out
