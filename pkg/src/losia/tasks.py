"""Synthetic tasks standing in for instruction-tuning corpora.

Every batch is a pure function of ``(task seed, step)`` so runs can be
replayed or resumed from any step without carrying iterator state.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .models import Batch

TASKS = ("copy", "modular_add", "char_lm")

_EVAL_TAG = 1_000_003


def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


@dataclass
class Task:
    """Dataset handle.  ``vocab`` is the number of token ids the task emits."""

    name: str
    seed: int
    vocab: int
    seq_len: int
    eval_size: int = 256
    holdout: float = 0.0
    text: bytes = b""
    _pairs: np.ndarray | None = field(default=None, repr=False)
    _eval_pairs: np.ndarray | None = field(default=None, repr=False)

    # --- construction helpers -------------------------------------------
    def __post_init__(self):
        if self.name == "modular_add":
            p = self.vocab
            allp = np.array([(a, b) for a in range(p) for b in range(p)])
            order = _rng(self.seed, 7).permutation(len(allp))
            n_hold = int(round(self.holdout * len(allp)))
            self._eval_pairs = allp[order[:n_hold]] if n_hold else allp
            self._pairs = allp[order[n_hold:]] if n_hold else allp

    # --- batches ------------------------------------------------------------
    def train_batch(self, step, batch_size) -> Batch:
        return self._sample(_rng(self.seed, step), batch_size, train=True)

    def eval_batch(self) -> Batch:
        return self._sample(_rng(self.seed, _EVAL_TAG), self.eval_size, train=False)

    def _sample(self, rng, n, train):
        if self.name == "copy":
            k = self.seq_len
            x = rng.integers(1, self.vocab, size=(n, k))
            seq = np.concatenate([x, np.zeros((n, 1), dtype=x.dtype), x], axis=1)
            mask = np.zeros((n, 2 * k))
            mask[:, k:] = 1.0
            return Batch(ids=seq[:, :-1], targets=seq[:, 1:], mask=mask)
        if self.name == "modular_add":
            pool = self._pairs if train else self._eval_pairs
            ab = pool[rng.integers(0, len(pool), size=n)]
            c = (ab[:, 0] + ab[:, 1]) % self.vocab
            targets = np.stack([np.zeros_like(c), c], axis=1)
            mask = np.tile([0.0, 1.0], (n, 1))
            return Batch(ids=ab, targets=targets, mask=mask)
        data = np.frombuffer(self.text, dtype=np.uint8).astype(np.int64)
        cut = int(len(data) * 0.9)
        src = data[:cut] if train else data[cut:]
        span = self.seq_len + 1
        if len(src) <= span:
            raise ConfigError("char_lm corpus too short for the requested seq_len")
        starts = rng.integers(0, len(src) - span, size=n)
        win = np.stack([src[s:s + span] for s in starts])
        return Batch(ids=win[:, :-1], targets=win[:, 1:], mask=np.ones((n, self.seq_len)))

    @property
    def input_len(self):
        return {"copy": 2 * self.seq_len, "modular_add": 2}.get(self.name, self.seq_len)


def make_task(name, seed=0, vocab=None, seq_len=None, holdout=0.0, eval_size=256,
              text_path=None) -> Task:
    """Build one of ``copy``, ``modular_add`` or ``char_lm``.

    ``char_lm`` is byte-level (vocabulary fixed at 256) and reads
    ``text_path`` when given, otherwise a bundled public-domain snippet.
    """
    if name not in TASKS:
        raise ConfigError(f"unknown task {name!r}; expected one of {TASKS}")
    if name == "char_lm":
        if vocab not in (None, 256):
            raise ConfigError("char_lm uses a fixed byte vocabulary of 256")
        if text_path:
            text = Path(text_path).read_bytes()
        else:
            text = resources.files("losia").joinpath("data/corpus.txt").read_bytes()
        return Task(name, seed, 256, seq_len or 16, eval_size, 0.0, text)
    vocab = vocab or 16
    if vocab < 2:
        raise ConfigError("vocab must be at least 2")
    if not 0.0 <= holdout < 1.0:
        raise ConfigError("holdout must lie in [0, 1)")
    return Task(name, seed, vocab, seq_len or 4, eval_size, holdout if name == "modular_add" else 0.0)


def evaluate(model, batch: Batch):
    """(mean masked loss, masked token accuracy in [0, 1])."""
    logits = model.logits(batch)
    B, S, V = logits.shape
    z = logits.reshape(-1, V)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    t = batch.targets.reshape(-1)
    w = np.ones(len(t)) if batch.mask is None else batch.mask.reshape(-1)
    nll = -logp[np.arange(len(t)), t]
    loss = float((nll * w).sum() / w.sum())
    acc = float(((z.argmax(axis=1) == t) * w).sum() / w.sum())
    return loss, acc
