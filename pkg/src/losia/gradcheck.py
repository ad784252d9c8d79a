"""Seeded finite-difference checks for every differentiable primitive.

Each case draws small random inputs, reduces the primitive's output to a
scalar through a fixed random projection ``sum(out * R)`` and compares the
tape gradient of every input against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class CheckResult:
    primitive: str
    seed: int
    rel_err: float


def _shape(rng, lo=2, hi=5, ndim=2):
    return tuple(int(s) for s in rng.integers(lo, hi, size=ndim))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _case(name, rng):
    """Return ``(inputs, fn)`` where ``fn(tape, tensors) -> Tensor``."""
    if name == "matmul":
        n, k, m = _shape(rng, ndim=3)
        if rng.random() < 0.5:
            return {"a": rng.standard_normal((n, k)), "b": rng.standard_normal((k, m))}, \
                lambda t, v: ad.matmul(v["a"], v["b"])
        B = int(rng.integers(1, 3))
        return {"a": rng.standard_normal((B, n, k)), "b": rng.standard_normal((B, k, m))}, \
            lambda t, v: ad.matmul(v["a"], v["b"])
    if name == "add":
        s = _shape(rng)
        b_shape = s if rng.random() < 0.5 else (s[1],)
        return {"a": rng.standard_normal(s), "b": rng.standard_normal(b_shape)}, \
            lambda t, v: ad.add(v["a"], v["b"])
    if name == "mul":
        s = _shape(rng)
        b_shape = s if rng.random() < 0.5 else (1, s[1])
        return {"a": rng.standard_normal(s), "b": rng.standard_normal(b_shape)}, \
            lambda t, v: ad.mul(v["a"], v["b"])
    if name == "scale":
        c = float(rng.standard_normal())
        return {"a": rng.standard_normal(_shape(rng))}, lambda t, v: ad.scale(v["a"], c)
    if name == "add_constant":
        s = _shape(rng)
        c = rng.standard_normal(s)
        return {"a": rng.standard_normal(s)}, lambda t, v: ad.add_constant(v["a"], c)
    if name == "sum_all":
        return {"a": rng.standard_normal(_shape(rng))}, lambda t, v: ad.sum_all(v["a"])
    if name == "reshape":
        n, m = _shape(rng)
        return {"a": rng.standard_normal((n, m))}, lambda t, v: ad.reshape(v["a"], (m, n))
    if name == "transpose":
        s = _shape(rng, ndim=3)
        axes = tuple(int(i) for i in rng.permutation(3))
        return {"a": rng.standard_normal(s)}, lambda t, v: ad.transpose(v["a"], axes)
    if name == "relu":
        return {"a": _away_from_zero(rng, _shape(rng))}, lambda t, v: ad.relu(v["a"])
    if name == "gelu":
        return {"a": 2 * rng.standard_normal(_shape(rng))}, lambda t, v: ad.gelu(v["a"])
    if name == "softmax":
        return {"a": 2 * rng.standard_normal(_shape(rng))}, lambda t, v: ad.softmax(v["a"])
    if name == "layer_norm":
        n, m = _shape(rng, 2, 6)
        return {"x": rng.standard_normal((n, m)), "g": 1 + 0.3 * rng.standard_normal(m),
                "b": rng.standard_normal(m)}, lambda t, v: ad.layer_norm(v["x"], v["g"], v["b"])
    if name == "softmax_cross_entropy":
        n, m = _shape(rng, 2, 7)
        targets = rng.integers(0, m, size=n)
        mask = (rng.random(n) < 0.7).astype(float)
        mask[0] = 1.0
        return {"z": 2 * rng.standard_normal((n, m))}, \
            lambda t, v: ad.softmax_cross_entropy(v["z"], targets, mask)
    if name == "mse_loss":
        s = _shape(rng)
        target = rng.standard_normal(s)
        return {"a": rng.standard_normal(s)}, lambda t, v: ad.mse_loss(v["a"], target)
    if name == "embedding":
        V, d = _shape(rng, 3, 7)
        ids = rng.integers(0, V, size=(2, 3))
        return {"w": rng.standard_normal((V, d))}, lambda t, v: ad.embedding(ids, v["w"])
    if name == "linear":
        n, k, m = _shape(rng, ndim=3)
        return {"x": rng.standard_normal((n, k)), "w": rng.standard_normal((k, m)),
                "b": rng.standard_normal(m)}, lambda t, v: ad.linear(v["x"], v["w"], v["b"], name="lin")
    raise KeyError(name)


PRIMITIVES = ("matmul", "add", "mul", "scale", "add_constant", "sum_all", "reshape", "transpose",
              "relu", "gelu", "softmax", "layer_norm", "softmax_cross_entropy", "mse_loss",
              "embedding", "linear")


def check_primitive(name, seed, h=1e-5) -> CheckResult:
    rng = np.random.default_rng([seed, PRIMITIVES.index(name)])
    inputs, fn = _case(name, rng)
    proj = {}

    def objective(values):
        tape = ad.Tape()
        leaves = {k: tape.param(v, k) for k, v in values.items()}
        out = fn(tape, leaves)
        if "R" not in proj:
            proj["R"] = np.random.default_rng(seed).standard_normal(out.data.shape)
        return tape, ad.sum_all(ad.mul(out, tape.constant(proj["R"])))

    tape, loss = objective(inputs)
    grads = tape.backward(loss)
    worst = 0.0
    for key, x in inputs.items():
        def f(xv, key=key):
            return float(objective({**inputs, key: xv})[1].data)

        fd = ad.finite_diff_scalar(f, x, h)
        worst = max(worst, ad.relative_error(grads[key], fd))
    return CheckResult(name, seed, worst)


def check_all(instances=100, primitives=PRIMITIVES):
    """Worst relative error per primitive over ``instances`` seeds."""
    return {p: max(check_primitive(p, s).rel_err for s in range(instances)) for p in primitives}
