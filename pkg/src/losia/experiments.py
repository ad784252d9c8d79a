"""Multi-run harnesses: seeded method comparisons, continual-learning sequences
and neuron selection-frequency reports."""
from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict

import numpy as np

from .config import TrainConfig
from .errors import ConfigError
from .models import build_tiny_decoder
from .tasks import evaluate, make_task
from .trainer import RunMetrics, Trainer

log = logging.getLogger(__name__)

SUITE_FIELDS = ("label", "method", "flags", "p", "p_o", "lr", "seeds", "loss_mean", "loss_std",
                "acc_mean", "acc_std", "trend")


def _write(rows, fields, out=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([repr(r[f]) if isinstance(r[f], float) else r[f] for f in fields])
    text = buf.getvalue()
    if out is not None:
        with open(out, "w") as f:
            f.write(text)
    return text


def config_label(cfg: TrainConfig):
    flags = [f for f in ("sl", "gl", "wds_off", "ffto") if getattr(cfg, f)]
    return "+".join([cfg.method, *flags])


def final_eval(cfg: TrainConfig):
    tr = Trainer(cfg)
    tr.run()
    ev = tr.metrics.evals[-1]
    return ev["eval_loss"], ev["accuracy"]


def run_baseline_suite(configs, seeds=range(5), out=None):
    """Run every config once per seed; one row per config with mean/std of the
    final eval loss and accuracy.  Returns ``(rows, csv_text)``.

    ``trend`` compares each row with the previous row of the same label,
    ``up``/``down``/``flat`` in accuracy, so parameter sweeps read at a glance.
    """
    configs = list(configs)
    seeds = list(seeds)
    if len(seeds) < 5:
        raise ConfigError(f"a suite needs at least 5 seeds, got {len(seeds)}")
    if len({c.task for c in configs}) > 1:
        raise ConfigError("all configs in a suite must share one task")
    rows, last = [], {}
    for cfg in configs:
        res = np.array([final_eval(cfg.replace(seed=s)) for s in seeds])
        label = config_label(cfg)
        acc = float(res[:, 1].mean())
        prev = last.get(label)
        trend = "" if prev is None else ("up" if acc > prev else "down" if acc < prev else "flat")
        last[label] = acc
        rows.append({"label": label, "method": cfg.method, "flags": label.partition("+")[2],
                     "p": cfg.p, "p_o": cfg.p_o, "lr": cfg.lr, "seeds": len(seeds),
                     "loss_mean": float(res[:, 0].mean()), "loss_std": float(res[:, 0].std()),
                     "acc_mean": acc, "acc_std": float(res[:, 1].std()), "trend": trend,
                     "losses": res[:, 0].tolist(), "accs": res[:, 1].tolist()})
        log.info("%s p=%s: loss %.4f +- %.4f", label, cfg.p, rows[-1]["loss_mean"], rows[-1]["loss_std"])
    return rows, _write(rows, SUITE_FIELDS, out)


def _task_of(cfg):
    return make_task(cfg.task, cfg.seed, cfg.task_vocab or cfg.vocab, cfg.seq_len, cfg.holdout,
                     cfg.eval_size, cfg.text_path or None)


def run_continual(config_list, out=None):
    """Train the tasks of ``config_list`` in order on one shared model.

    Returns the ``(N+1) x N`` accuracy matrix (percent): row 0 holds each task
    trained alone from the same initial weights, row ``i`` the accuracy on every
    task after stage ``i``.  Model hyperparameters come from the first config.
    """
    configs = [c.validate() for c in config_list]
    if not configs:
        raise ConfigError("need at least one stage")
    first = configs[0]
    if len({(c.layers, c.d_model, c.heads, c.d_ff, c.vocab, c.max_seq) for c in configs}) > 1:
        raise ConfigError("all stages must share one model shape")
    if len({(c.task, c.task_vocab, c.seq_len, c.holdout) for c in configs}) < len(configs):
        log.warning("continual sequence repeats a task")
    base = build_tiny_decoder(first.model_spec(), first.seed, np.dtype(first.dtype))
    tasks = [_task_of(c) for c in configs]
    evals = [t.eval_batch() for t in tasks]
    N = len(configs)
    P = np.zeros((N + 1, N))
    for j, cfg in enumerate(configs):
        tr = Trainer(cfg, base.copy(), tasks[j])
        tr.run()
        P[0, j] = 100.0 * evaluate(tr.model, evals[j])[1]
    model = base.copy()
    for i, cfg in enumerate(configs, 1):
        Trainer(cfg, model, tasks[i - 1]).run()
        P[i] = [100.0 * evaluate(model, e)[1] for e in evals]
    if out is not None:
        np.savetxt(out, P, delimiter=",", header="rows: reference, stage 1..N; columns: task 1..N")
    return P


def continual_tasks(method="losia", steps=600, seed=0, **kw):
    """A three-stage sequence on one 16-token model: copy, a+b mod 16, a+b mod 11."""
    common = dict(method=method, steps=steps, seed=seed, **kw)
    return [TrainConfig(task="copy", seq_len=4, **common),
            TrainConfig(task="modular_add", task_vocab=16, **common),
            TrainConfig(task="modular_add", task_vocab=11, **common)]


# --- selection frequency ---------------------------------------------------

def gini(values):
    """Gini coefficient of non-negative counts (0 = uniform)."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    n, s = len(x), x.sum()
    if n == 0 or s == 0:
        return 0.0
    return float((2 * np.arange(1, n + 1) - n - 1) @ x / (n * s))


def selection_counts(metrics: RunMetrics, shapes: dict):
    """Per layer, ``(input counts, output counts)`` over reselection events.

    Runs without any reselection (``random_subnet``) fall back to their
    initial subnets so every subnet run yields a report.
    """
    by_layer = defaultdict(list)
    for ev in metrics.events:
        by_layer[ev["layer"]].append(ev)
    if not by_layer:
        raise ConfigError("run has no subnet events")
    out = {}
    for name, evs in by_layer.items():
        chosen = [e for e in evs if not e["initial"]] or evs
        if all(e["strategy"] == "full" for e in chosen):
            continue
        n, m = shapes[name]
        rows, cols = np.zeros(n, np.int64), np.zeros(m, np.int64)
        for e in chosen:
            rows[e["x_s"]] += 1
            cols[e["y_s"]] += 1
        out[name] = (rows, cols)
    if not out:
        raise ConfigError("run used full fine-tuning; there are no subnets to count")
    return out


SELECTION_FIELDS = ("layer", "side", "neuron", "count")
CURVE_FIELDS = ("layer", "side", "rank", "count", "gini")


def selection_frequency_report(metrics: RunMetrics, shapes: dict, out_prefix=None):
    """Returns ``(counts_csv, curve_csv)``.

    ``side`` is ``in`` (rows, ``X_S``) or ``out`` (columns, ``Y_S``); the curve
    lists counts sorted in descending order with the per-side Gini index.
    """
    counts = selection_counts(metrics, shapes)
    rows, curve = [], []
    for name in sorted(counts):
        for side, c in zip(("in", "out"), counts[name]):
            rows += [{"layer": name, "side": side, "neuron": i, "count": int(v)} for i, v in enumerate(c)]
            g = gini(c)
            curve += [{"layer": name, "side": side, "rank": r, "count": int(v), "gini": g}
                      for r, v in enumerate(np.sort(c)[::-1])]
    a = _write(rows, SELECTION_FIELDS, None if out_prefix is None else f"{out_prefix}_counts.csv")
    b = _write(curve, CURVE_FIELDS, None if out_prefix is None else f"{out_prefix}_curve.csv")
    return a, b

