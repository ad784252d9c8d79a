"""Desk-scale models: a LLaMA-shaped causal decoder and a plain MLP.

Both expose the same small surface used by the trainer and the analysis
tools: ``params`` (name -> array), ``linear_layers`` (stable registry of
subnet-capable weights), ``loss(tape, batch, ...)`` and ``logits(batch)``.
Weights are stored input-major, shape ``(in, out)``, so rows are input
neurons and columns output neurons.
"""
from __future__ import annotations

import copy as _copy
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

DECODER_LINEARS = ("q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "gate_proj", "down_proj")


@dataclass(frozen=True)
class DecoderSpec:
    L: int = 2
    d: int = 32
    heads: int = 2
    d_ff: int = 88
    V: int = 64
    max_seq: int = 32

    @property
    def K(self):
        return len(DECODER_LINEARS)

    def validate(self):
        dims = {"L": self.L, "d": self.d, "heads": self.heads, "d_ff": self.d_ff,
                "V": self.V, "max_seq": self.max_seq}
        for k, v in dims.items():
            if int(v) != v or v < 1:
                raise ConfigError(f"{k} must be a positive integer, got {v}")
        for k in ("d", "d_ff", "V"):
            if dims[k] < 2:
                raise ConfigError(f"{k} must be at least 2, got {dims[k]}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        return self

    def linear_shapes(self):
        """(name, group, (in, out)) for every linear layer, output layer last."""
        shapes = {"q_proj": (self.d, self.d), "k_proj": (self.d, self.d),
                  "v_proj": (self.d, self.d), "o_proj": (self.d, self.d),
                  "up_proj": (self.d, self.d_ff), "gate_proj": (self.d, self.d_ff),
                  "down_proj": (self.d_ff, self.d)}
        out = [(f"layers.{l}.{k}", l, shapes[k]) for l in range(self.L) for k in DECODER_LINEARS]
        out.append(("lm_head", self.L, (self.d, self.V)))
        return out

    def param_count(self):
        """Closed-form parameter count of :func:`build_tiny_decoder`."""
        d, f = self.d, self.d_ff
        per_layer = 4 * d * d + 3 * d * f + 4 * d
        return self.V * d + self.max_seq * d + self.L * per_layer + 2 * d + d * self.V


@dataclass(frozen=True)
class LinearInfo:
    name: str
    group: int
    shape: tuple


@dataclass
class Batch:
    """Either a token batch (``ids``, ``targets``, ``mask``) or a feature batch (``x``, ``y``)."""

    ids: np.ndarray | None = None
    targets: np.ndarray | None = None
    mask: np.ndarray | None = None
    x: np.ndarray | None = None
    y: np.ndarray | None = None

    def __len__(self):
        return len(self.ids) if self.ids is not None else len(self.x)

    def subset(self, rows):
        pick = lambda a: None if a is None else a[rows]
        return Batch(pick(self.ids), pick(self.targets), pick(self.mask), pick(self.x), pick(self.y))


class _Model:
    dtype = np.float64

    def _wrap(self, tape, name, trainable):
        arr = self.params[name]
        if trainable is None or name in trainable:
            return tape.param(arr, name)
        return tape.constant(arr)

    def linear_names(self):
        return [info.name for info in self.linear_layers]

    def num_params(self):
        return int(sum(a.size for a in self.params.values()))

    def copy(self):
        new = _copy.copy(self)
        new.params = {k: v.copy() for k, v in self.params.items()}
        new.grads = {}
        return new

    def state_arrays(self):
        return self.params


class TinyDecoder(_Model):
    """Pre-norm causal decoder with q/k/v/o attention and a gated MLP."""

    def __init__(self, spec: DecoderSpec, params: dict, dtype=np.float64):
        self.spec = spec
        self.params = params
        self.dtype = np.dtype(dtype)
        self.grads: dict = {}
        self.linear_layers = [LinearInfo(n, g, s) for n, g, s in spec.linear_shapes()]

    def _hidden(self, tape, ids, keep_cols, trainable):
        spec = self.spec
        B, S = ids.shape
        if S > spec.max_seq:
            raise ConfigError(f"sequence length {S} exceeds max_seq={spec.max_seq}")
        w = lambda n: self._wrap(tape, n, trainable)
        lin = lambda x, n: ad.linear(x, w(n), name=n, keep_cols=keep_cols.get(n))
        h = ad.add(ad.embedding(ids, w("embed")), ad.embedding(np.arange(S), w("pos")))
        h = ad.reshape(h, (B * S, spec.d))
        H, dh = spec.heads, spec.d // spec.heads
        causal = np.triu(np.full((S, S), -1e9), k=1)
        for l in range(spec.L):
            p = f"layers.{l}."
            a = ad.layer_norm(h, w(p + "ln1.g"), w(p + "ln1.b"))
            heads = []
            for k in ("q_proj", "k_proj", "v_proj"):
                t = ad.reshape(lin(a, p + k), (B, S, H, dh))
                heads.append(ad.transpose(t, (0, 2, 1, 3)))
            q, kk, v = heads
            scores = ad.scale(ad.matmul(q, ad.transpose(kk, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = ad.softmax(ad.add_constant(scores, causal), axis=-1)
            ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B * S, spec.d))
            h = ad.add(h, lin(ctx, p + "o_proj"))
            m = ad.layer_norm(h, w(p + "ln2.g"), w(p + "ln2.b"))
            z = ad.mul(lin(m, p + "up_proj"), ad.gelu(lin(m, p + "gate_proj")))
            h = ad.add(h, lin(z, p + "down_proj"))
        h = ad.layer_norm(h, w("ln_f.g"), w("ln_f.b"))
        return lin(h, "lm_head")

    def loss(self, tape, batch: Batch, keep_cols=None, trainable=None):
        logits = self._hidden(tape, batch.ids, keep_cols or {}, trainable)
        return ad.softmax_cross_entropy(logits, batch.targets.reshape(-1),
                                        None if batch.mask is None else batch.mask.reshape(-1))

    def logits(self, batch: Batch) -> np.ndarray:
        """(B, S, V) logits without recording gradients."""
        tape = ad.Tape(dtype=self.dtype)
        out = self._hidden(tape, batch.ids, {}, ())
        B, S = batch.ids.shape
        return out.data.reshape(B, S, -1)


def build_tiny_decoder(spec: DecoderSpec, seed=0, dtype=np.float64) -> TinyDecoder:
    spec.validate()
    rng = np.random.default_rng(seed)
    d = spec.d

    def normal(shape, fan_in):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(dtype)

    params = {"embed": normal((spec.V, d), 1), "pos": normal((spec.max_seq, d), 1) * 0.1}
    for name, group, (n, m) in spec.linear_shapes():
        if name == "lm_head":
            continue
        params[name] = normal((n, m), n)
        if name.endswith("down_proj"):
            p = f"layers.{group}."
            for ln in ("ln1", "ln2"):
                params[p + ln + ".g"] = np.ones(d, dtype=dtype)
                params[p + ln + ".b"] = np.zeros(d, dtype=dtype)
    params["ln_f.g"] = np.ones(d, dtype=dtype)
    params["ln_f.b"] = np.zeros(d, dtype=dtype)
    params["lm_head"] = normal((d, spec.V), d)
    return TinyDecoder(spec, params, dtype)


class MLP(_Model):
    """Fully connected network ``fc0 -> act -> fc1 -> ...`` with squared-error loss."""

    def __init__(self, sizes, params, activation="relu", bias=True, dtype=np.float64):
        self.sizes = tuple(sizes)
        self.params = params
        self.activation = activation
        self.bias = bias
        self.dtype = np.dtype(dtype)
        self.grads: dict = {}
        self.linear_layers = [LinearInfo(f"fc{i}", i, (a, b))
                              for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:]))]

    def _forward(self, tape, x, keep_cols, trainable):
        act = {"relu": ad.relu, "gelu": ad.gelu}[self.activation]
        h = tape.constant(x)
        last = len(self.linear_layers) - 1
        for i, info in enumerate(self.linear_layers):
            b = self._wrap(tape, info.name + ".bias", trainable) if self.bias else None
            h = ad.linear(h, self._wrap(tape, info.name, trainable), b, name=info.name,
                          keep_cols=keep_cols.get(info.name))
            if i < last:
                h = act(h)
        return h

    def loss(self, tape, batch: Batch, keep_cols=None, trainable=None):
        return ad.mse_loss(self._forward(tape, batch.x, keep_cols or {}, trainable), batch.y)

    def logits(self, batch: Batch) -> np.ndarray:
        return self._forward(ad.Tape(dtype=self.dtype), batch.x, {}, ()).data


def build_mlp(sizes, seed=0, activation="relu", bias=True, dtype=np.float64, zero=False) -> MLP:
    rng = np.random.default_rng(seed)
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"fc{i}"] = (np.zeros((a, b)) if zero else rng.normal(0, 1 / np.sqrt(a), (a, b))).astype(dtype)
        if bias:
            params[f"fc{i}.bias"] = (np.zeros(b) if zero else rng.normal(0, 0.1, b)).astype(dtype)
    return MLP(sizes, params, activation, bias, dtype)
