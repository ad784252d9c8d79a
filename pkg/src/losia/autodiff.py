"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Every primitive records a closure on the :class:`Tape` that owns its inputs.
:meth:`Tape.backward` replays the closures in exact reverse recording order.

Linear layers are special: their weight gradient is never accumulated when a
hook is registered for the layer name.  Instead the hook receives the stored
input activation (possibly only a column slice of it) and the upstream
gradient, and is expected to consume them immediately.
"""
from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError, NumericOverflowError

LayerGradHook = Callable[[np.ndarray, np.ndarray], None]


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "tape", "requires_grad", "name", "uid")

    def __init__(self, data, tape=None, requires_grad=False, name=None):
        self.data = data
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name
        self.uid = tape._next_uid() if tape is not None else -1

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive operations.

    ``hooks`` maps linear-layer names to :data:`LayerGradHook` callbacks.
    """

    def __init__(self, hooks: Mapping[str, LayerGradHook] | None = None, dtype=np.float64):
        self.ops: list[tuple[Tensor, tuple, Callable]] = []
        self.hooks = dict(hooks or {})
        self.dtype = np.dtype(dtype)
        self.hook_calls: dict[str, int] = {}
        self._uid = 0
        self._leaves: dict[int, Tensor] = {}

    def _next_uid(self):
        self._uid += 1
        return self._uid

    def param(self, array, name):
        """Wrap a parameter array as a differentiable leaf."""
        t = Tensor(np.asarray(array, dtype=self.dtype), self, True, name)
        self._leaves[t.uid] = t
        return t

    def constant(self, array, dtype=None):
        return Tensor(np.asarray(array, dtype=dtype or self.dtype), self, False)

    def record(self, out: Tensor, inputs: tuple, backward: Callable):
        self.ops.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Run the reverse sweep from scalar ``loss``.

        Returns gradients of named leaves that were not consumed by a hook.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.ops):
            g = grads.pop(out.uid, None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or t is None or not t.requires_grad:
                    continue
                if t.uid in grads:
                    grads[t.uid] = grads[t.uid] + gi
                else:
                    grads[t.uid] = gi
        return {leaf.name: grads[uid] for uid, leaf in self._leaves.items() if uid in grads}


def _tape_of(*tensors):
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            return t.tape
    raise ValueError("no input tensor is attached to a tape")


def _make(tape, data, inputs, backward):
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, tape, needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(a):
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# Deterministic weight-gradient kernel


def outer_sum(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Return ``x.T @ dy`` accumulated sample by sample.

    Entry ``(i, j)`` is ``(((x[0,i] dy[0,j]) + x[1,i] dy[1,j]) + ...)`` in row
    order no matter which columns of ``x`` and ``dy`` are passed in, so the
    gradient of a sub-block equals the same sub-block of the full gradient bit
    for bit.  (A BLAS product or a numpy axis reduction may reorder the sum
    depending on the operand shapes.)
    """
    if x.ndim != 2 or dy.ndim != 2 or x.shape[0] != dy.shape[0]:
        raise DimensionError(f"outer_sum shapes {x.shape} and {dy.shape} do not align")
    b, n = x.shape
    out = np.zeros((n, dy.shape[1]), dtype=np.result_type(x, dy))
    tmp = np.empty_like(out)
    for r in range(b):
        np.multiply.outer(x[r], dy[r], out=tmp)
        out += tmp
    return out


# ---------------------------------------------------------------------------
# Primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    tape = _tape_of(a, b)
    A, B = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ _swap(B), A.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap(A) @ g, B.shape) if b.requires_grad else None
        return ga, gb

    return _make(tape, A @ B, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    sa, sb = a.data.shape, b.data.shape
    return _make(tape, a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    A, B = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * B, A.shape) if a.requires_grad else None
        gb = _unbroadcast(g * A, B.shape) if b.requires_grad else None
        return ga, gb

    return _make(tape, A * B, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.tape, a.data * c, (a,), lambda g: (g * c,))


def add_constant(a: Tensor, c: np.ndarray) -> Tensor:
    """``a + c`` where ``c`` is a non-differentiable array (e.g. a causal mask)."""
    return _make(a.tape, a.data + c, (a,), lambda g: (_unbroadcast(g, a.data.shape),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _make(a.tape, np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.tape, a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.tape, np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.tape, np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * du),)

    return _make(a.tape, out, (a,), backward)


def softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(a.tape, s, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps=1e-5) -> Tensor:
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.data.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.data.shape) if bias.requires_grad else None
        return gx, gg, gb

    return _make(_tape_of(x, gain, bias), out, (x, gain, bias), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is nonzero."""
    Z = logits.data
    if Z.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {Z.shape}")
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != Z.shape[0]:
        raise DimensionError(f"{targets.shape[0]} targets for {Z.shape[0]} rows of logits")
    w = np.ones(Z.shape[0]) if mask is None else np.asarray(mask, dtype=Z.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("loss mask selects no positions")
    shifted = Z - Z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(Z.shape[0])
    nll = -logp[rows, targets]
    loss = np.asarray((nll * w).sum() / total)

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (w / total)[:, None] * g,)

    return _make(logits.tape, loss, (logits,), backward)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over samples of the per-sample mean squared error."""
    diff = pred.data - target
    n = diff.size

    return _make(pred.tape, np.asarray((diff ** 2).sum() / n), (pred,),
                 lambda g: (g * 2.0 * diff / n,))


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    W = table.data

    def backward(g):
        gw = np.zeros_like(W)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, W.shape[1]))
        return (gw,)

    return _make(table.tape, W[ids], (table,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, *, name: str | None = None,
           keep_cols: np.ndarray | None = None) -> Tensor:
    """``y = x @ weight (+ bias)`` with ``weight`` of shape (in, out).

    When the tape has a hook for ``name`` it is called during the reverse
    sweep as ``hook(x_saved, dy)``, and the weight gradient is never stored.
    ``keep_cols`` restricts the saved activation to those input columns; only
    hooked layers may use it.
    """
    X, W = x.data, weight.data
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0]:
        raise DimensionError(f"linear shape mismatch: {X.shape} x {W.shape}")
    tape = _tape_of(x, weight)
    hook = tape.hooks.get(name) if name is not None else None
    if keep_cols is not None and hook is None:
        raise ValueError(f"keep_cols for layer {name!r} requires a registered hook")
    saved = X if keep_cols is None else np.ascontiguousarray(X[:, keep_cols])
    out = X @ W
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ W.T if x.requires_grad else None
        gw = None
        if hook is not None:
            tape.hook_calls[name] = tape.hook_calls.get(name, 0) + 1
            hook(saved, g)
        elif weight.requires_grad:
            gw = outer_sum(saved, g)
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    # A hooked weight must still trigger the closure even if frozen otherwise.
    needs = x.requires_grad or weight.requires_grad or hook is not None or (
        bias is not None and bias.requires_grad)
    res = Tensor(out, tape, needs)
    if needs:
        tape.record(res, inputs, backward)
    return res


# ---------------------------------------------------------------------------
# Model-level drivers


def forward_backward(model, batch, hooks: Mapping[str, LayerGradHook] | None = None, *,
                     keep_cols: Mapping[str, np.ndarray] | None = None, step=None,
                     trainable=None) -> float:
    """Mean loss of ``model`` on ``batch`` with a full reverse sweep.

    Hooked linear layers receive ``(x, dy)`` as the sweep reaches them.  The
    gradients of every other trainable parameter are left in ``model.grads``.
    """
    tape = Tape(hooks, dtype=model.dtype)
    loss = model.loss(tape, batch, keep_cols=keep_cols or {}, trainable=trainable)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericOverflowError("non-finite loss", step)
    model.grads = tape.backward(loss)
    for k, calls in tape.hook_calls.items():
        if calls != 1:
            raise RuntimeError(f"hook for {k!r} fired {calls} times")
    return value


def loss_value(model, batch) -> float:
    tape = Tape(dtype=model.dtype)
    return float(model.loss(tape, batch, trainable=()).data)


def finite_diff_grad(model, batch, param_coord, h=1e-5) -> float:
    """Central difference ``(L(w+h) - L(w-h)) / 2h`` at one coordinate.

    ``param_coord`` is ``(param_name, index)`` with ``index`` a tuple into the
    parameter array.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    name, index = param_coord
    if name not in model.params:
        raise IndexError(f"unknown parameter {name!r}")
    arr = model.params[name]
    index = tuple(np.atleast_1d(index))
    if len(index) != arr.ndim or any(not 0 <= i < s for i, s in zip(index, arr.shape)):
        raise IndexError(f"coordinate {index} out of range for {name} {arr.shape}")
    orig = arr[index]
    try:
        arr[index] = orig + h
        plus = loss_value(model, batch)
        arr[index] = orig - h
        minus = loss_value(model, batch)
    finally:
        arr[index] = orig
    return (plus - minus) / (2 * h)


def finite_diff_scalar(f: Callable[[np.ndarray], float], x: np.ndarray, h=1e-5) -> np.ndarray:
    """Central-difference gradient of scalar function ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


__all__ = [
    "Tensor", "Tape", "LayerGradHook", "outer_sum", "matmul", "add", "mul", "scale",
    "add_constant", "sum_all", "reshape", "transpose", "relu", "gelu", "softmax",
    "layer_norm", "softmax_cross_entropy", "mse_loss", "embedding", "linear",
    "forward_backward", "loss_value", "finite_diff_grad", "finite_diff_scalar",
    "relative_error",
]
