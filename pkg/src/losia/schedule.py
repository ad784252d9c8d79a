"""Asynchronous periodic localization timeline and learning-rate rewarming.

Time is cut into slots of ``T`` steps.  Layer ``l`` accumulates importance in
slots ``s`` with ``s = l - 1 (mod L)``, is reselected at the following slot
boundary and then rewarms its learning rate linearly over the next slot.  All
queries are pure functions of the step counter ``t``.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, replace

from .errors import ConfigError


class LayerPhase(enum.Flag):
    IDLE = 0
    ACCUMULATE = enum.auto()
    RESELECT_NOW = enum.auto()
    REWARM = enum.auto()

    def label(self):
        if not self:
            return "IDLE"
        return "|".join(p.name for p in (LayerPhase.ACCUMULATE, LayerPhase.RESELECT_NOW,
                                          LayerPhase.REWARM) if p in self)


@dataclass(frozen=True)
class ScheduleState:
    """``L`` here is the cycle length: decoder layers plus an optional output slot."""

    T: int
    L: int
    T_w: int = 0
    t: int = 0
    lr: float = 1.0
    total_steps: int | None = None
    decay: str = "constant"
    synchronous: bool = False
    rewarm: bool = True

    def __post_init__(self):
        if self.T < 1 or self.L < 1 or self.T_w < 0:
            raise ConfigError(f"need T >= 1, L >= 1, T_w >= 0 (got T={self.T}, L={self.L}, T_w={self.T_w})")
        if self.decay not in ("constant", "cosine"):
            raise ConfigError(f"unknown decay {self.decay!r}")
        if self.decay == "cosine" and not self.total_steps:
            raise ConfigError("cosine decay needs total_steps")

    @property
    def slot(self):
        return self.t // self.T

    def at(self, t):
        return replace(self, t=t)


def _check(state, layer):
    if not 0 <= layer < state.L:
        raise IndexError(f"layer {layer} outside [0, {state.L})")


def accumulating(state: ScheduleState, layer: int) -> bool:
    _check(state, layer)
    return state.synchronous or state.slot % state.L == (layer - 1) % state.L


def reselect_now(state: ScheduleState, layer: int) -> bool:
    """True at ``t = (kL + layer) T`` when an accumulation window precedes it."""
    _check(state, layer)
    return state.t % state.T == 0 and in_rewarm_window(state, layer)


def in_rewarm_window(state: ScheduleState, layer: int) -> bool:
    _check(state, layer)
    s = state.slot
    return s >= 1 and (state.synchronous or s % state.L == layer % state.L)


def phase_of(state: ScheduleState, layer: int) -> LayerPhase:
    ph = LayerPhase.IDLE
    if accumulating(state, layer):
        ph |= LayerPhase.ACCUMULATE
    if reselect_now(state, layer):
        ph |= LayerPhase.RESELECT_NOW
    if in_rewarm_window(state, layer) and state.t > state.T_w:
        ph |= LayerPhase.REWARM
    return ph


def lr_multiplier(state: ScheduleState, layer: int) -> float:
    """Linear ramp ``(t - start) / T`` inside the rewarm slot once past warmup, else 1."""
    _check(state, layer)
    if not state.rewarm or not in_rewarm_window(state, layer) or state.t <= state.T_w:
        return 1.0
    return (state.t - state.slot * state.T) / state.T


def base_lr(state: ScheduleState) -> float:
    """Global schedule: linear warmup over ``T_w`` steps, then constant or cosine decay."""
    t = state.t
    if state.T_w and t < state.T_w:
        return state.lr * t / state.T_w
    if state.decay == "cosine":
        span = max(1, state.total_steps - state.T_w)
        frac = min(1.0, (t - state.T_w) / span)
        return state.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return state.lr


def effective_lr(state: ScheduleState, layer: int) -> float:
    return lr_multiplier(state, layer) * base_lr(state)


def advance(state: ScheduleState):
    """Step the clock; returns ``(new_state, layers whose phase changed)``."""
    new = state.at(state.t + 1)
    changed = {l for l in range(state.L) if phase_of(state, l) != phase_of(new, l)}
    return new, changed


def timeline(state: ScheduleState, steps):
    """Yield ``(step, layer, phase label, multiplier)`` rows from ``state.t`` on."""
    for t in range(state.t, state.t + steps):
        st = state.at(t)
        for l in range(state.L):
            yield t, l, phase_of(st, l).label(), lr_multiplier(st, l)


def dump_csv(state: ScheduleState, steps, out=None):
    """Write the phase timeline as CSV; returns the text when ``out`` is None."""
    buf = out if out is not None else io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "layer", "phase", "multiplier"])
    for row in timeline(state, steps):
        w.writerow([row[0], row[1], row[2], repr(row[3])])
    return buf.getvalue() if out is None else None
