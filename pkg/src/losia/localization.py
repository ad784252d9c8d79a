"""Core-subnet selection: greedy row/column strategies and an exhaustive oracle.

A subnet of an ``n x m`` weight is a set of input neurons (rows) and output
neurons (columns); its score is the sum of the importance matrix over the
cross product.  Maximising that score under the size budget is NP-hard, so the
trainer uses the greedy strategies and keeps the exhaustive search for tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConfigError, DimensionError, SizeError

BRUTE_FORCE_LIMIT = 10 ** 7


@dataclass(frozen=True)
class Subnet:
    x_s: tuple
    y_s: tuple
    layer: str = ""
    strategy: str = ""

    def __post_init__(self):
        object.__setattr__(self, "x_s", tuple(int(i) for i in self.x_s))
        object.__setattr__(self, "y_s", tuple(int(j) for j in self.y_s))

    @property
    def rows(self):
        return np.asarray(self.x_s, dtype=np.intp)

    @property
    def cols(self):
        return np.asarray(self.y_s, dtype=np.intp)

    @property
    def shape(self):
        return len(self.x_s), len(self.y_s)

    def index(self):
        """Open-mesh index selecting the subnet block of a weight matrix."""
        return np.ix_(self.rows, self.cols)

    def to_json(self):
        return {"layer": self.layer, "x_s": list(self.x_s), "y_s": list(self.y_s),
                "strategy": self.strategy}

    @classmethod
    def full(cls, n, m, layer=""):
        return cls(range(n), range(m), layer, "full")


def budget(size, p, what="p"):
    """``floor(size * p)``, rejecting an empty selection."""
    k = math.floor(size * p + 1e-9)
    if not 0 < p <= 1 or k < 1:
        raise ConfigError(f"{what}={p} selects {k} of {size} neurons; need at least one")
    return min(k, size)


def _sizes(q, p):
    n, m = q.shape
    try:
        return budget(n, p), budget(m, p)
    except ConfigError:
        raise ConfigError(f"rank factor p={p} is infeasible for a {n}x{m} layer (n={n}, m={m})") from None


def topk(values, k):
    """Indices of the ``k`` largest values, ties to the lower index, sorted ascending."""
    order = np.argsort(-np.asarray(values), kind="stable")
    return np.sort(order[:k])


def _check_scores(q):
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2:
        raise DimensionError(f"score matrix must be 2-D, got shape {q.shape}")
    return q


def row2column(q, p, layer="") -> Subnet:
    """Rows by total score first, then the best columns given those rows."""
    q = _check_scores(q)
    kx, ky = _sizes(q, p)
    rows = topk(q.sum(axis=1), kx)
    cols = topk(q[rows, :].sum(axis=0), ky)
    return Subnet(rows, cols, layer, "row2column")


def column2row(q, p, layer="") -> Subnet:
    q = _check_scores(q)
    kx, ky = _sizes(q, p)
    cols = topk(q.sum(axis=0), ky)
    rows = topk(q[:, cols].sum(axis=1), kx)
    return Subnet(rows, cols, layer, "column2row")


def subnet_score(q, s: Subnet) -> float:
    q = _check_scores(q)
    n, m = q.shape
    if any(not 0 <= i < n for i in s.x_s) or any(not 0 <= j < m for j in s.y_s):
        raise IndexError(f"subnet indices out of range for a {n}x{m} score matrix")
    return float(q[s.index()].sum())


def select_best(q, p, layer="") -> Subnet:
    """The higher-scoring of the two greedy strategies; exact ties go to row2column."""
    a = row2column(q, p, layer)
    b = column2row(q, p, layer)
    return b if subnet_score(q, b) > subnet_score(q, a) else a


def brute_force_subnet(q, p, layer="") -> Subnet:
    """Exact maximiser by exhaustive enumeration; ties to the lexicographically smallest sets."""
    q = _check_scores(q)
    n, m = q.shape
    kx, ky = _sizes(q, p)
    total = math.comb(n, kx) * math.comb(m, ky)
    if total > BRUTE_FORCE_LIMIT:
        raise SizeError(f"{total} candidate subnets exceed the limit of {BRUTE_FORCE_LIMIT}")
    col_sets = np.array(list(combinations(range(m), ky)))
    col_mask = np.zeros((len(col_sets), m))
    col_mask[np.arange(len(col_sets))[:, None], col_sets] = 1.0
    best, best_rows, best_cols = -np.inf, None, None
    row_iter = combinations(range(n), kx)
    chunk = max(1, 2_000_000 // len(col_sets))
    while True:
        rows = [r for _, r in zip(range(chunk), row_iter)]
        if not rows:
            break
        rows = np.array(rows)
        row_mask = np.zeros((len(rows), n))
        row_mask[np.arange(len(rows))[:, None], rows] = 1.0
        scores = row_mask @ q @ col_mask.T
        flat = int(np.argmax(scores))
        r, c = divmod(flat, scores.shape[1])
        if scores[r, c] > best:
            best, best_rows, best_cols = scores[r, c], rows[r], col_sets[c]
    return Subnet(best_rows, best_cols, layer, "brute_force")


def output_layer_subnet(q, p_o, layer="") -> Subnet:
    """All input neurons; the top ``floor(m * p_o)`` output neurons by column sum."""
    q = _check_scores(q)
    n, m = q.shape
    try:
        ky = budget(m, p_o, "p_o")
    except ConfigError:
        raise ConfigError(f"dimension reduction factor p_o={p_o} is infeasible for m={m}") from None
    return Subnet(range(n), topk(q.sum(axis=0), ky), layer, "output")


def random_subnet(n, m, p, rng, layer="", output=False) -> Subnet:
    """Uniformly random feasible subnet; ``output`` keeps every input neuron."""
    kx = n if output else budget(n, p)
    ky = budget(m, p, "p_o" if output else "p")
    rows = np.arange(n) if output else np.sort(rng.choice(n, kx, replace=False))
    return Subnet(rows, np.sort(rng.choice(m, ky, replace=False)), layer, "random")


def is_feasible(s: Subnet, n, m, p, output=False) -> bool:
    xs, ys = s.x_s, s.y_s
    ok_idx = all(a < b for a, b in zip(xs, xs[1:])) and all(a < b for a, b in zip(ys, ys[1:]))
    ok_range = all(0 <= i < n for i in xs) and all(0 <= j < m for j in ys)
    if output:
        return ok_idx and ok_range and len(xs) == n and len(ys) == budget(m, p, "p_o")
    sized = len(xs) == budget(n, p) and len(ys) == budget(m, p)
    return ok_idx and ok_range and sized and max(len(xs) / n, len(ys) / m) <= p + 1e-12
