"""Run configuration and its flat ``key = value`` file format.

Blank lines and ``#`` comments are ignored.  Every key must be a field of
:class:`TrainConfig`; anything else is an error because a silently ignored
typo would corrupt an experiment.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .models import DecoderSpec

METHODS = ("fft", "losia", "losia_pro", "static_subnet", "random_subnet")
SUBNET_METHODS = METHODS[1:]


@dataclass
class TrainConfig:
    # model
    layers: int = 2
    d_model: int = 32
    heads: int = 2
    d_ff: int = 88
    vocab: int = 16
    max_seq: int = 16
    dtype: str = "float64"
    init_checkpoint: str = ""
    # task
    task: str = "modular_add"
    task_vocab: int = 0
    seq_len: int = 4
    holdout: float = 0.0
    eval_size: int = 256
    text_path: str = ""
    # method
    method: str = "losia"
    sl: bool = False
    gl: bool = False
    wds_off: bool = False
    ffto: bool = False
    reset_moments: bool = False
    periodic_output: bool = True
    post_update_delta: bool = False
    init_select: str = "importance"
    p: float = 0.125
    p_o: float = 0.125
    T: int = 100
    warmup_ratio: float = 0.1
    beta1: float = 0.85
    beta2: float = 0.85
    # optimizer
    lr: float = 5e-5
    decay: str = "constant"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # run
    steps: int = 300
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 0
    out_dir: str = ""

    @property
    def total_steps(self):
        return self.steps * self.epochs

    @property
    def warmup_steps(self):
        return int(round(self.warmup_ratio * self.total_steps))

    @property
    def eval_cadence(self):
        return self.eval_every or self.T

    def model_spec(self):
        return DecoderSpec(self.layers, self.d_model, self.heads, self.d_ff, self.vocab, self.max_seq)

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        flags = [f for f in ("sl", "gl", "wds_off", "ffto") if getattr(self, f)]
        if flags and self.method not in ("losia", "losia_pro"):
            raise ConfigError(f"ablation flags {flags} only apply to losia/losia_pro, not {self.method}")
        if not 0 < self.p <= 1:
            raise ConfigError(f"p must lie in (0, 1], got {self.p}")
        if not 0 < self.p_o <= 1:
            raise ConfigError(f"p_o must lie in (0, 1], got {self.p_o}")
        for b in (self.beta1, self.beta2):
            if not 0 < b < 1:
                raise ConfigError(f"importance EMA factors must lie in (0, 1), got {b}")
        if self.T < 1 or self.steps < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("T, steps, epochs and batch_size must be positive")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype}")
        if self.init_select not in ("importance", "random"):
            raise ConfigError(f"init_select must be importance or random, got {self.init_select}")
        if self.decay not in ("constant", "cosine"):
            raise ConfigError(f"decay must be constant or cosine, got {self.decay}")
        self.model_spec().validate()
        if self.method != "fft":
            from .localization import budget
            for n in {self.d_model, self.d_ff}:
                try:
                    budget(n, self.p)
                except ConfigError:
                    raise ConfigError(f"p={self.p} leaves no neurons in a layer of width {n}") from None
            if not self.ffto:
                budget(self.vocab, self.p_o, "p_o")
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw).validate()

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key, raw):
    kind = type(_FIELDS[key].default)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            if "/" in raw:
                num, den = raw.split("/", 1)
                return float(num) / float(den)
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, **overrides) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown override {key!r}")
        values[key] = val
    return TrainConfig(**values).validate()


def load_config(path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(), **overrides)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
