"""Subnet-restricted AdamW applied from inside the backward hook.

Moments live only on the active subnet block.  The factorized gradient path
needs nothing but the input columns in ``X_S`` and the upstream gradient
columns in ``Y_S``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import outer_sum
from .errors import DimensionError, NumericError
from .localization import Subnet


@dataclass
class SubnetAdamWState:
    layer: str
    subnet: Subnet
    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, layer, subnet: Subnet, dtype=np.float64, **hyper):
        shape = subnet.shape
        return cls(layer, subnet, np.zeros(shape, dtype), np.zeros(shape, dtype),
                   np.zeros(shape, np.int64), **hyper)

    def hyper(self):
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                    weight_decay=self.weight_decay)


def _adamw(weight_block, m, v, steps, g, lr, b1, b2, eps, wd):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    steps += 1
    mhat = m / (1.0 - b1 ** steps)
    vhat = v / (1.0 - b2 ** steps)
    return weight_block * (1.0 - lr * wd) - lr * (mhat / (np.sqrt(vhat) + eps))


def fused_step(state: SubnetAdamWState, weight: np.ndarray, grad_block: np.ndarray,
               lr_mult=1.0, lr=None, step=None) -> SubnetAdamWState:
    """Update ``weight`` on the subnet block in place; all other entries are untouched.

    ``lr`` overrides the state's base rate (the trainer passes the scheduled
    value); the applied rate is ``lr_mult * lr``.  Bias correction uses each
    entry's own step count so migrated and fresh entries stay consistent.
    """
    if grad_block.shape != state.m.shape:
        raise DimensionError(f"gradient block {grad_block.shape} != subnet {state.m.shape}")
    if not np.all(np.isfinite(grad_block)):
        raise NumericError(f"non-finite gradient for layer {state.layer!r}", step)
    rate = (state.lr if lr is None else lr) * lr_mult
    idx = state.subnet.index()
    weight[idx] = _adamw(weight[idx], state.m, state.v, state.steps, grad_block, rate,
                         state.beta1, state.beta2, state.eps, state.weight_decay)
    return state


def migrate_state(old: SubnetAdamWState, new_subnet: Subnet, reset=False) -> SubnetAdamWState:
    """Carry moments of entries kept by ``new_subnet``; new entries start from zero."""
    new = SubnetAdamWState.fresh(old.layer, new_subnet, old.m.dtype, **old.hyper())
    if reset:
        return new
    ro = {r: i for i, r in enumerate(old.subnet.x_s)}
    co = {c: j for j, c in enumerate(old.subnet.y_s)}
    nr = [(i, ro[r]) for i, r in enumerate(new_subnet.x_s) if r in ro]
    nc = [(j, co[c]) for j, c in enumerate(new_subnet.y_s) if c in co]
    if nr and nc:
        dst = np.ix_([a for a, _ in nr], [a for a, _ in nc])
        src = np.ix_([b for _, b in nr], [b for _, b in nc])
        new.m[dst] = old.m[src]
        new.v[dst] = old.v[src]
        new.steps[dst] = old.steps[src]
    return new


def losia_pro_grad(x_sliced: np.ndarray, dy: np.ndarray, subnet: Subnet) -> np.ndarray:
    """Subnet gradient block from the sliced activation and upstream gradient.

    ``dy`` may carry all ``m`` output columns or only the ``Y_S`` columns.
    """
    kx, ky = subnet.shape
    if x_sliced.ndim != 2 or x_sliced.shape[1] != kx:
        raise DimensionError(f"sliced activation {x_sliced.shape} does not match |X_S|={kx}")
    if dy.ndim != 2 or dy.shape[0] != x_sliced.shape[0]:
        raise DimensionError(f"upstream gradient {dy.shape} does not match batch {x_sliced.shape[0]}")
    if dy.shape[1] != ky:
        if dy.shape[1] <= max(subnet.y_s):
            raise DimensionError(f"upstream gradient has {dy.shape[1]} columns, subnet needs {max(subnet.y_s) + 1}")
        dy = dy[:, subnet.cols]
    return outer_sum(x_sliced, dy)


def full_grad_path(x_full: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return outer_sum(x_full, dy)


def grad_macs(batch_rows, rows, cols):
    """Multiply-adds of one weight-gradient product."""
    return int(batch_rows) * int(rows) * int(cols)


class DenseAdamW:
    """Plain AdamW over whole arrays (norm gains, biases, embeddings)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state: dict[str, tuple] = {}

    def step(self, params: dict, grads: dict, lr=None, step=None):
        rate = self.lr if lr is None else lr
        for name in sorted(grads):
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name!r}", step)
            if name not in self.state:
                p = params[name]
                self.state[name] = (np.zeros_like(p), np.zeros_like(p), np.zeros(p.shape, np.int64))
            m, v, n = self.state[name]
            params[name][...] = _adamw(params[name], m, v, n, g, rate, self.beta1, self.beta2,
                                       self.eps, self.weight_decay)
