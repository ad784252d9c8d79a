"""Diagnostics: gradient heatmaps, singular-vector drift, masking robustness,
memory accounting, continual-learning metrics and the subnet-SGD error bound.

Every routine reads model snapshots only; mutating work happens on copies.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import forward_backward, outer_sum
from .errors import ConfigError, DimensionError, UndefinedMetricError
from .importance import grad_score, raw_importance
from .localization import Subnet, select_best
from .tasks import evaluate


def _csv_text(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --- gradient heatmap -------------------------------------------------------

@dataclass
class Heatmap:
    layer: str
    values: np.ndarray  # |dL/dW|
    row_sums: np.ndarray
    col_sums: np.ndarray

    def to_csv(self):
        """Wide layout: one line per input neuron ending with its row sum,
        then a ``col_sum`` line holding the column margins."""
        n, m = self.values.shape
        header = ["row"] + [f"c{j}" for j in range(m)] + ["row_sum"]
        rows = [[i, *map(repr, self.values[i]), repr(self.row_sums[i])] for i in range(n)]
        rows.append(["col_sum", *map(repr, self.col_sums), repr(self.row_sums.sum())])
        return _csv_text(rows, header)


def layer_gradients(model, batch):
    """Full gradients of every parameter on ``batch`` (model weights unchanged)."""
    work = model.copy()
    forward_backward(work, batch)
    return work.grads


def grad_heatmap(model, batch, layer, out=None) -> Heatmap:
    if layer not in model.params:
        raise KeyError(f"unknown layer {layer!r}")
    g = np.abs(layer_gradients(model, batch)[layer])
    hm = Heatmap(layer, g, g.sum(axis=1), g.sum(axis=0))
    if out is not None:
        with open(out, "w") as f:
            f.write(hm.to_csv())
    return hm


def top_row_share(hm: Heatmap, p):
    """Fraction of total mass in the top ``floor(n p)`` rows, and the uniform share."""
    n = len(hm.row_sums)
    k = max(1, math.floor(n * p))
    total = hm.row_sums.sum()
    share = np.sort(hm.row_sums)[::-1][:k].sum() / total if total > 0 else 0.0
    return float(share), k / n


# --- spectral drift ---------------------------------------------------------

def top_left_singular(W, k, tol=1e-10, max_iter=20000, seed=0):
    """Top-``k`` left singular vectors by orthogonal iteration on ``W W^T``.

    Each sweep multiplies the block, re-orthonormalizes it with QR and rotates
    it onto Ritz vectors.  Stops once the Ritz residual
    ``||A q - lambda q||`` of every wanted vector is below ``tol * ||A||``.
    Columns are sign-normalized so their largest-magnitude entry is positive.
    Returns ``(U, singular_values)``.
    """
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    A = W @ W.T
    scale = max(np.abs(A).max(), np.finfo(float).tiny)
    block = min(n, max(2 * k, k + 8))
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, block)))
    for _ in range(max_iter):
        Q, _ = np.linalg.qr(A @ Q)
        lam, V = np.linalg.eigh(Q.T @ A @ Q)
        order = np.argsort(lam)[::-1]
        lam, Q = lam[order], Q @ V[:, order]
        resid = np.linalg.norm(A @ Q[:, :k] - Q[:, :k] * lam[:k], axis=0)
        if np.all(resid <= tol * scale):
            break
    U = Q[:, :k].copy()
    pivots = np.argmax(np.abs(U), axis=0)
    U *= np.sign(U[pivots, np.arange(k)])
    return U, np.sqrt(np.clip(lam[:k], 0.0, None))


def spectral_drift(W_before, W_after, k, tol=1e-10) -> np.ndarray:
    """For each top-``k`` left singular vector of ``W_after``, its best
    absolute cosine against the top-``k`` of ``W_before`` (values in [0, 1])."""
    W_before, W_after = np.asarray(W_before), np.asarray(W_after)
    if W_before.shape != W_after.shape:
        raise DimensionError(f"shape mismatch {W_before.shape} vs {W_after.shape}")
    if not 1 <= k <= min(W_before.shape):
        raise ConfigError(f"k={k} must lie in [1, {min(W_before.shape)}]")
    Ub, _ = top_left_singular(W_before, k, tol)
    Ua, _ = top_left_singular(W_after, k, tol)
    return np.clip(np.abs(Ua.T @ Ub).max(axis=1), 0.0, 1.0)


# --- masking robustness -----------------------------------------------------

def middle_layers(n_layers):
    """Decoder layers kept for masking: the central span, dropping a quarter each side
    (all layers when there are fewer than four)."""
    cut = n_layers // 4
    return list(range(cut, n_layers - cut))


def mask_and_eval(model, score_source, mask_pct, eval_set, layers=None, score_batch=None):
    """Zero everything outside a selected subnet keeping ``1 - mask_pct`` of each
    targeted matrix, then return eval accuracy (model itself is untouched).

    The subnet is ``select_best`` with ``p = sqrt(1 - mask_pct)`` on the
    chosen score (``|grad|`` or sensitivity ``|g W - (g W)^2/2|``), floored at
    one row and one column.  ``layers`` are decoder layer indices, by default
    :func:`middle_layers`.
    """
    if score_source not in ("gradient", "sensitivity"):
        raise ConfigError(f"score_source must be gradient or sensitivity, got {score_source!r}")
    if not 0 <= mask_pct < 1:
        raise ConfigError(f"mask_pct must lie in [0, 1), got {mask_pct}")
    work = model.copy()
    if mask_pct > 0:
        grads = layer_gradients(model, score_batch if score_batch is not None else eval_set)
        groups = sorted({i.group for i in model.linear_layers})[:-1]
        layers = middle_layers(len(groups)) if layers is None else list(layers)
        p = math.sqrt(1.0 - mask_pct)
        for info in model.linear_layers:
            if info.group not in layers or info.name == model.linear_layers[-1].name:
                continue
            W, g = model.params[info.name], grads[info.name]
            q = grad_score(g) if score_source == "gradient" else raw_importance(g, W)
            n, m = W.shape
            sub = select_best(q, max(p, 1.0 / n, 1.0 / m), info.name)
            keep = np.zeros(W.shape, bool)
            keep[sub.index()] = True
            work.params[info.name][~keep] = 0.0
    return evaluate(work, eval_set)[1]


def masking_curve(model, eval_set, pcts, sources=("gradient", "sensitivity"), layers=None,
                  score_batch=None):
    """Rows ``(mask_pct, source, accuracy)`` plus the CSV text."""
    rows = [(pct, src, mask_and_eval(model, src, pct, eval_set, layers, score_batch))
            for pct in pcts for src in sources]
    return rows, _csv_text([(repr(a), b, repr(c)) for a, b, c in rows],
                           ["mask_pct", "score_source", "accuracy"])


# --- memory model -----------------------------------------------------------

@dataclass(frozen=True)
class MemoryModelInput:
    """Symbols of the memory table.  ``shapes`` lists the K per-layer
    ``(d_in, d_out)`` pairs; the closed forms assume ``d x d`` instead."""

    L: int
    K: int
    d: int
    V: int
    b: int = 2
    r: int = 64
    R: int = 512
    p: float = 0.125
    p_o: float = 0.125
    shapes: tuple = ()

    def __post_init__(self):
        for k in ("L", "K", "d", "V", "b", "r", "R", "p", "p_o"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        if self.shapes and len(self.shapes) != self.K:
            raise ConfigError(f"shapes lists {len(self.shapes)} matrices, K={self.K}")

    def layer_shapes(self):
        return tuple(self.shapes) or ((self.d, self.d),) * self.K


LLAMA2_7B = MemoryModelInput(L=32, K=7, d=4096, V=32000, b=2, shapes=(
    (4096, 4096), (4096, 4096), (4096, 4096), (4096, 4096),
    (4096, 11008), (4096, 11008), (11008, 4096)))

ROWS = ("trainable", "optimizer", "gradient", "auxiliary")


@dataclass
class MemoryRecord:
    """Parameter counts (multiply by ``b`` for bytes)."""

    method: str
    closed_form: dict
    exact: dict
    b: int = 2

    def total(self, which="exact"):
        """Optimizer + gradient + auxiliary; trainable weights are not added on
        top, which is how the published totals (e.g. 8LKrdb for LoRA) add up."""
        rec = getattr(self, which)
        return rec["optimizer"] + rec["gradient"] + rec["auxiliary"]

    def bytes(self, which="exact"):
        return {k: v * self.b for k, v in getattr(self, which).items()}

    def to_json(self):
        return {"method": self.method, "b": self.b, "closed_form": self.closed_form,
                "exact": self.exact, "total_closed_form": self.total("closed_form"),
                "total_exact": self.total("exact")}


def _floor(x, p):
    return math.floor(x * p + 1e-9)


def memory_model(inp: MemoryModelInput, method) -> MemoryRecord:
    L, K, d, V, r, R, p, p_o = inp.L, inp.K, inp.d, inp.V, inp.r, inp.R, inp.p, inp.p_o
    shapes = inp.layer_shapes()
    biggest = max(max(a * c for a, c in shapes), V * d)
    if method == "lora":
        cf = dict(trainable=2 * L * K * r * d, optimizer=4 * L * K * r * d,
                  gradient=2 * L * K * r * d, auxiliary=2 * L * K * r * d)
        t = L * sum(r * (a + c) for a, c in shapes)
        ex = dict(trainable=t, optimizer=2 * t, gradient=t, auxiliary=t)
    elif method == "galore":
        cf = dict(trainable=L * K * R * R + V * d, optimizer=2 * (L * K * R * R + V * d),
                  gradient=max(d * d, V * d), auxiliary=2 * L * K * R * d)
        t = L * sum(min(R, a) * min(R, c) for a, c in shapes) + V * d
        ex = dict(trainable=t, optimizer=2 * t, gradient=biggest,
                  auxiliary=2 * L * sum(R * max(a, c) for a, c in shapes))
    elif method == "losia":
        out = V * d * p_o
        cf = dict(trainable=L * K * d * d * p * p + out, optimizer=2 * (L * K * d * d * p * p + out),
                  gradient=max(d * d, V * d), auxiliary=2 * K * d * d)
        t = L * sum(_floor(a, p) * _floor(c, p) for a, c in shapes) + d * _floor(V, p_o)
        ex = dict(trainable=t, optimizer=2 * t, gradient=biggest,
                  auxiliary=2 * sum(a * c for a, c in shapes))
    else:
        raise ConfigError(f"unknown method {method!r}; expected lora, galore or losia")
    return MemoryRecord(method, cf, ex, inp.b)


def decoder_memory_input(spec, p=0.125, p_o=0.125, r=8, R=16, b=8):
    """:class:`MemoryModelInput` for a tiny decoder (its ``lm_head`` is the ``V x d`` term)."""
    shapes = tuple(s for n, g, s in spec.linear_shapes() if g < spec.L)[:spec.K]
    return MemoryModelInput(spec.L, spec.K, spec.d, spec.V, b, r, R, p, p_o, shapes)


def enumerated_param_count(spec):
    """Full parameter count from the memory-model enumeration (``p = p_o = 1``) plus
    the non-linear tensors: embeddings, positions and norm gains/biases."""
    rec = memory_model(decoder_memory_input(spec, 1.0, 1.0), "losia")
    return rec.exact["trainable"] + spec.V * spec.d + spec.max_seq * spec.d + (4 * spec.L + 2) * spec.d


# --- continual learning -----------------------------------------------------

def _cl_matrix(P):
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1] + 1 or P.shape[1] < 1:
        raise DimensionError(f"CL matrix must be (N+1) x N, got {P.shape}")
    if np.any((P < 0) | (P > 100)):
        raise ConfigError("CL matrix entries must lie in [0, 100]")
    return P


def cl_ap(P):
    P = _cl_matrix(P)
    return float(P[-1].mean())


def cl_fwt(P):
    P = _cl_matrix(P)
    N = P.shape[1]
    return float(np.mean([P[i, i - 1] - P[0, i - 1] for i in range(1, N + 1)]))


def cl_bwt(P):
    P = _cl_matrix(P)
    N = P.shape[1]
    if N < 2:
        raise UndefinedMetricError("BWT needs at least two tasks")
    return float(np.mean([P[N, i - 1] - P[i, i - 1] for i in range(1, N)]))


def cl_metrics(P):
    """``(AP, FWT, BWT)``; row 0 of ``P`` is the single-task reference and
    ``P[i, j]`` the accuracy on task ``j`` after training stage ``i``."""
    return cl_ap(P), cl_fwt(P), cl_bwt(P)


def cl_matrix_from_stage_columns(stages, single_task):
    """Build ``P`` from a table whose rows are tasks and whose columns are
    training stages (the usual published layout) plus the single-task column."""
    stages = np.asarray(stages, dtype=np.float64)
    return np.vstack([np.asarray(single_task, dtype=np.float64), stages.T])


# Published five-task commonsense sequence (HellaSwag, PIQA, BoolQ, SIQA, WinoGrande):
# rows are tasks, columns are training stages; ST is single-task training.
SEQ_LORA_STAGES = [[59.86, 55.64, 59.10, 57.86, 54.36],
                   [76.01, 80.52, 77.86, 78.73, 77.64],
                   [77.80, 73.27, 86.30, 80.12, 75.93],
                   [45.80, 47.80, 45.85, 59.52, 46.11],
                   [64.25, 68.35, 68.82, 69.93, 79.08]]
SEQ_LORA_ST = [59.86, 79.33, 88.07, 56.86, 73.88]
SEQ_LOSIA_STAGES = [[63.72, 61.89, 61.11, 60.37, 56.43],
                    [78.29, 79.49, 79.82, 79.38, 77.75],
                    [77.52, 70.76, 83.24, 82.54, 81.99],
                    [47.80, 48.26, 48.26, 59.93, 56.04],
                    [68.51, 67.88, 68.51, 71.82, 80.19]]
SEQ_LOSIA_ST = [63.72, 81.50, 84.13, 61.05, 77.19]


# --- subnet SGD error bound ---------------------------------------------------

@dataclass
class BoundResult:
    per_layer: dict = field(default_factory=dict)  # name -> (mse, bound, holds)

    @property
    def holds(self):
        return all(h for _, _, h in self.per_layer.values())

    @property
    def mse(self):
        return max((v[0] for v in self.per_layer.values()), default=0.0)

    @property
    def bound(self):
        return max((v[1] for v in self.per_layer.values()), default=0.0)


def _assignment_mask(shape, sel):
    if isinstance(sel, Subnet):
        mask = np.zeros(shape, bool)
        mask[sel.index()] = True
        return mask
    mask = np.asarray(sel, bool)
    if mask.shape != shape:
        raise DimensionError(f"mask {mask.shape} does not match weight {shape}")
    return mask


def mse_bound_check(model, batch, subnet_assignment, eta, slack=1e-12) -> BoundResult:
    """Compare one SGD step on all weights with one restricted to the subnet.

    For every linear layer named in ``subnet_assignment`` (a :class:`Subnet`
    or a boolean mask), with ``x`` the layer's input on ``batch`` (``M`` rows)
    and ``G`` its gradient, both branches are stepped and applied to ``x``::

        mse   = ||x W_full - x W_sub||_F^2 / M
        bound = eta^2 ||1_{not in P} G||_F^2 ||x||_F^2 / M
    """
    captured = {}

    def make(name):
        def hook(x, dy):
            captured[name] = (x.copy(), outer_sum(x, dy))
        return hook

    work = model.copy()
    forward_backward(work, batch, {n: make(n) for n in subnet_assignment})
    res = BoundResult()
    for name, sel in subnet_assignment.items():
        x, G = captured[name]
        W = model.params[name]
        mask = _assignment_mask(W.shape, sel)
        w_full = W - eta * G
        w_sub = W - eta * np.where(mask, G, 0.0)
        M = x.shape[0]
        mse = float(np.sum((x @ w_full - x @ w_sub) ** 2) / M)
        bound = float(eta ** 2 * np.sum(np.where(mask, 0.0, G) ** 2) * np.sum(x * x) / M)
        res.per_layer[name] = (mse, bound, mse <= bound + slack)
    return res


# --- AdamW monotonicity -----------------------------------------------------

def adam_direction_sq(G, M_prev, V_prev, beta1=0.9, beta2=0.999):
    """``(M_t / sqrt(V_t))^2`` after folding gradient ``G`` into the moments."""
    M = beta1 * M_prev + (1 - beta1) * G
    V = beta2 * V_prev + (1 - beta2) * G * G
    return M * M / V


def adam_monotone_threshold(M, V, beta1=0.9, beta2=0.999):
    """Gradient value below which the squared Adam direction grows with ``G``
    (assuming ``M > 0``): ``(1 - beta1) V / ((1 - beta2) M)``."""
    return (1 - beta1) * V / ((1 - beta2) * M)
