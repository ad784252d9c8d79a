"""End-to-end training loop with per-layer hooks driven by the slot schedule."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import forward_backward
from .config import TrainConfig
from .errors import NumericError
from .importance import GradientImportance, ImportanceState
from .localization import Subnet, output_layer_subnet, random_subnet, select_best, subnet_score
from .models import build_tiny_decoder
from .optim import (DenseAdamW, SubnetAdamWState, full_grad_path, fused_step, grad_macs,
                    losia_pro_grad, migrate_state)
from .schedule import (ScheduleState, accumulating, base_lr, lr_multiplier, phase_of,
                       reselect_now)
from .tasks import evaluate, make_task

log = logging.getLogger(__name__)

METRICS_SCHEMA = "losia-metrics/1"
STEP_FIELDS = ("step", "loss", "lr", "multipliers", "subnet_digest", "act_bytes",
               "dense_act_bytes", "grad_macs", "dense_grad_macs", "importance_layers")
EVAL_FIELDS = ("step", "eval_loss", "accuracy", "phases")


def subnet_digest(subnets: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(subnets):
        s = subnets[name]
        h.update(f"{name}:{s.x_s}:{s.y_s};".encode())
    return h.hexdigest()[:16]


@dataclass
class RunMetrics:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def digest(self) -> str:
        blob = json.dumps([self.steps, self.evals, self.events], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as f:
            f.write(f"# schema: {METRICS_SCHEMA}\n")
            w = csv.DictWriter(f, STEP_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.steps:
                w.writerow({**r, "multipliers": " ".join(repr(m) for m in r["multipliers"])})
        with open(out / "evals.csv", "w", newline="") as f:
            f.write(f"# schema: {METRICS_SCHEMA}\n")
            w = csv.DictWriter(f, EVAL_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.evals:
                w.writerow({**r, "phases": " ".join(r["phases"])})
        (out / "events.json").write_text(json.dumps(self.events, indent=1))
        return out

    def to_json(self):
        return {"steps": self.steps, "evals": self.evals, "events": self.events}

    @classmethod
    def from_json(cls, d):
        return cls(list(d["steps"]), list(d["evals"]), list(d["events"]))


class Trainer:
    """Owns one model, its task, the schedule and every optimizer/importance state.

    Linear layers are grouped by decoder layer; the output layer forms its own
    group.  With ``periodic_output`` the output group joins the reselection
    cycle as the last member.
    """

    def __init__(self, cfg: TrainConfig, model=None, task=None, _init_subnets=True):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        if model is None:
            model = build_tiny_decoder(cfg.model_spec(), cfg.seed, self.dtype)
            if cfg.init_checkpoint:
                arrays, _ = checkpoint.load(cfg.init_checkpoint)
                for k in model.params:
                    model.params[k][...] = arrays[f"params/{k}"]
        self.model = model
        self.task = task or make_task(cfg.task, cfg.seed, cfg.task_vocab or cfg.vocab, cfg.seq_len,
                                      cfg.holdout, cfg.eval_size, cfg.text_path or None)
        self.t = 0
        self.metrics = RunMetrics()
        self.infos = {i.name: i for i in model.linear_layers}
        self.out_name = model.linear_layers[-1].name
        self.L = max(i.group for i in model.linear_layers)
        m = cfg.method
        self.subnet_method = m != "fft"
        self.adaptive = m in ("losia", "losia_pro")
        self.pro = m == "losia_pro"
        # Layers whose subnet is chosen by importance (the output layer only when p_o < 1).
        self.governed = [n for n in self.infos
                         if self.subnet_method and (n != self.out_name or (cfg.p_o < 1 and not cfg.ffto))]
        self.output_in_cycle = (self.out_name in self.governed and self.adaptive
                                and cfg.periodic_output)
        cycle = self.L + (1 if self.output_in_cycle else 0)
        self.sched = ScheduleState(cfg.T, cycle, cfg.warmup_steps, 0, cfg.lr, cfg.total_steps,
                                   cfg.decay, cfg.sl, not cfg.wds_off)
        hyper = dict(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.eps,
                     weight_decay=cfg.weight_decay)
        self.hyper = hyper
        self.dense_opt = DenseAdamW(**hyper)
        if self.subnet_method:
            self.dense_names = tuple(k for k in model.params
                                     if model.params[k].ndim == 1 and k not in ("pos",))
        else:
            self.dense_names = tuple(k for k in model.params if k not in self.infos)
        self.importance: dict[str, ImportanceState] = {}
        self.subnets: dict[str, Subnet] = {}
        self.opt: dict[str, SubnetAdamWState] = {}
        self.max_live_importance = 0
        if _init_subnets:
            self._init_subnets(hyper)
        self.initial_params = {k: v.copy() for k, v in model.params.items()}

    def _init_subnets(self, hyper):
        """Subnets for step 0: importance-driven methods score one batch
        (``init_select = importance``), everything else starts random."""
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 1])
        scores = {}
        if cfg.init_select == "importance" and (self.adaptive or cfg.method == "static_subnet"):
            scores = self._one_batch_scores()
        for name, info in self.infos.items():
            n, mm = info.shape
            q = scores.get(name)
            out = name == self.out_name
            if name not in self.governed:
                sub = Subnet.full(n, mm, name)
            elif q is not None:
                sub = output_layer_subnet(q, cfg.p_o, name) if out else select_best(q, cfg.p, name)
            else:
                sub = random_subnet(n, mm, cfg.p_o if out else cfg.p, rng, name, output=out)
            self.subnets[name] = sub
            self.opt[name] = SubnetAdamWState.fresh(name, sub, self.dtype, **hyper)
            ev = self._event(name, sub, None if q is None else subnet_score(q, sub))
            self.metrics.events.append({**ev, "initial": True})

    def _one_batch_scores(self):
        cfg = self.cfg
        grads = {}

        def make(name):
            def hook(x, dy):
                grads[name] = full_grad_path(x, dy)
            return hook

        forward_backward(self.model, self.task.train_batch(0, cfg.batch_size),
                         {n: make(n) for n in self.governed}, trainable=())
        self.model.grads = {}
        scores = {}
        for name in self.governed:
            cls = GradientImportance if cfg.gl else ImportanceState
            st = cls.zeros(name, self.infos[name].shape, cfg.beta1, cfg.beta2,
                           cfg.post_update_delta, self.dtype)
            st.observe(grads[name], self.model.params[name])
            scores[name] = st.score()
        return scores

    # --- schedule mapping ----------------------------------------------------
    def cycle_index(self, name):
        return self.infos[name].group

    def _event(self, name, sub, score):
        return {"step": self.t, "layer": name, "x_s": list(sub.x_s), "y_s": list(sub.y_s),
                "strategy": sub.strategy, "score": score, "initial": False}

    def _is_accumulating(self, st, name):
        if name not in self.governed:
            return False
        m = self.cfg.method
        if m == "static_subnet":
            return st.t < self.cfg.T
        if not self.adaptive:
            return False
        if name == self.out_name and not self.output_in_cycle:
            return st.t < self.cfg.T
        return accumulating(st, self.cycle_index(name))

    def _is_reselecting(self, st, name):
        if name not in self.governed:
            return False
        m = self.cfg.method
        if m == "static_subnet" or (self.adaptive and name == self.out_name and not self.output_in_cycle):
            return st.t == self.cfg.T
        return self.adaptive and reselect_now(st, self.cycle_index(name))

    def _multiplier(self, st, name):
        if not self.adaptive or name not in self.governed:
            return 1.0
        if name == self.out_name and not self.output_in_cycle:
            return 1.0
        return lr_multiplier(st, self.cycle_index(name))

    # --- one step --------------------------------------------------------------
    def reselect(self, st):
        cfg = self.cfg
        for name in self.governed:
            if not self._is_reselecting(st, name):
                continue
            q = self.importance.pop(name).score()
            if name == self.out_name:
                new = output_layer_subnet(q, cfg.p_o, name)
            else:
                new = select_best(q, cfg.p, name)
            self.opt[name] = migrate_state(self.opt[name], new, reset=cfg.reset_moments)
            self.subnets[name] = new
            self.metrics.events.append(self._event(name, new, subnet_score(q, new)))

    def step(self):
        cfg, model = self.cfg, self.model
        t = self.t
        st = self.sched.at(t)
        self.reselect(st)
        acc = [n for n in self.governed if self._is_accumulating(st, n)]
        for name in acc:
            if name not in self.importance:
                cls = GradientImportance if cfg.gl else ImportanceState
                self.importance[name] = cls.zeros(name, self.infos[name].shape, cfg.beta1, cfg.beta2,
                                                  cfg.post_update_delta, self.dtype)
        live_groups = {self.infos[n].group for n in self.importance}
        self.max_live_importance = max(self.max_live_importance, len(live_groups))
        acc = set(acc)
        batch = self.task.train_batch(t, cfg.batch_size)
        rows = batch.ids.size
        itemsize = self.dtype.itemsize
        keep = {}
        counters = {"act": 0, "dense_act": 0, "macs": 0, "dense_macs": 0}
        for name, info in self.infos.items():
            n, m = info.shape
            counters["dense_act"] += rows * n * itemsize
            if self.pro and name not in acc and len(self.subnets[name].x_s) < n:
                keep[name] = self.subnets[name].rows
                counters["act"] += rows * len(keep[name]) * itemsize
            else:
                counters["act"] += rows * n * itemsize
        lr_t = base_lr(st)
        mults = {name: self._multiplier(st, name) for name in self.infos}

        def make_hook(name):
            sub = self.subnets[name]
            n, m = self.infos[name].shape

            def hook(x, dy):
                W = model.params[name]
                b = x.shape[0]
                counters["dense_macs"] += grad_macs(b, n, m)
                if self.pro and name not in acc:
                    block = losia_pro_grad(x, dy, sub)
                    counters["macs"] += grad_macs(b, *sub.shape)
                else:
                    G = full_grad_path(x, dy)
                    counters["macs"] += grad_macs(b, n, m)
                    if name in acc:
                        self.importance[name].observe(G, W)
                    block = G if sub.shape == (n, m) else G[sub.index()]
                fused_step(self.opt[name], W, block, mults[name], lr_t, step=t)
            return hook

        hooks = {name: make_hook(name) for name in self.infos}
        try:
            loss = forward_backward(model, batch, hooks, keep_cols=keep, step=t,
                                    trainable=self.dense_names)
        except NumericError:
            self._abort()
            raise
        self.dense_opt.step(model.params, model.grads, lr=lr_t, step=t)
        model.grads = {}
        cyc = self.sched.L
        group_mult = [lr_multiplier(st, c) if self.adaptive else 1.0 for c in range(cyc)]
        self.metrics.steps.append({
            "step": t, "loss": loss, "lr": lr_t, "multipliers": group_mult,
            "subnet_digest": subnet_digest(self.subnets), "act_bytes": counters["act"],
            "dense_act_bytes": counters["dense_act"], "grad_macs": counters["macs"],
            "dense_grad_macs": counters["dense_macs"], "importance_layers": len(live_groups)})
        self.t += 1
        if self.t % cfg.eval_cadence == 0 or self.t == cfg.total_steps:
            self.evaluate()
        return loss

    def evaluate(self):
        loss, acc = evaluate(self.model, self.task.eval_batch())
        st = self.sched.at(self.t)
        phases = [phase_of(st, c).label() for c in range(self.sched.L)] if self.adaptive else []
        rec = {"step": self.t, "eval_loss": loss, "accuracy": acc, "phases": phases}
        self.metrics.evals.append(rec)
        return rec

    def run(self, until=None):
        until = self.cfg.total_steps if until is None else until
        while self.t < until:
            self.step()
        return self.metrics

    def _abort(self):
        if self.cfg.out_dir:
            path = Path(self.cfg.out_dir) / "abort_checkpoint"
            self.save(path)
            log.error("non-finite loss at step %d; saved last good state to %s", self.t, path)

    # --- audit ---------------------------------------------------------------
    def touched_masks(self):
        """Per linear layer, the union of every subnet it has trained on."""
        masks = {n: np.zeros(i.shape, bool) for n, i in self.infos.items()}
        for ev in self.metrics.events:
            masks[ev["layer"]][np.ix_(ev["x_s"], ev["y_s"])] = True
        return masks

    def frozen_audit(self):
        """Names of parameters changed outside what the method may train (empty = pass)."""
        bad = []
        masks = self.touched_masks()
        for k, now in self.model.params.items():
            changed = now != self.initial_params[k]
            if k in masks:
                if np.any(changed & ~masks[k]):
                    bad.append(k)
            elif k not in self.dense_names and np.any(changed):
                bad.append(k)
        return bad

    # --- persistence -----------------------------------------------------------
    def save(self, path):
        arrays = {f"params/{k}": v for k, v in self.model.params.items()}
        arrays.update({f"initial/{k}": v for k, v in self.initial_params.items()})
        for name, s in self.opt.items():
            arrays[f"opt/{name}/m"] = s.m
            arrays[f"opt/{name}/v"] = s.v
            arrays[f"opt/{name}/steps"] = s.steps
        for name, (m, v, n) in self.dense_opt.state.items():
            arrays[f"dense/{name}/m"] = m
            arrays[f"dense/{name}/v"] = v
            arrays[f"dense/{name}/steps"] = n
        imp_meta = {}
        for name, s in self.importance.items():
            arrays[f"imp/{name}/sens"] = s.sens
            arrays[f"imp/{name}/unc"] = s.unc
            imp_meta[name] = {"steps": s.steps, "kind": type(s).__name__}
        meta = {"config": self.cfg.to_dict(), "t": self.t,
                "subnets": {k: s.to_json() for k, s in self.subnets.items()},
                "importance": imp_meta, "metrics": self.metrics.to_json(),
                "max_live_importance": self.max_live_importance}
        return checkpoint.save(path, arrays, meta)

    @classmethod
    def load(cls, path, **overrides):
        arrays, meta = checkpoint.load(path)
        cfg = TrainConfig(**{**meta["config"], **overrides}).validate()
        tr = cls(cfg, _init_subnets=False)
        for k in tr.model.params:
            tr.model.params[k][...] = arrays[f"params/{k}"]
            tr.initial_params[k] = arrays[f"initial/{k}"].copy()
        tr.t = meta["t"]
        for name, sj in meta["subnets"].items():
            sub = Subnet(sj["x_s"], sj["y_s"], sj["layer"], sj["strategy"])
            tr.subnets[name] = sub
            tr.opt[name] = SubnetAdamWState(name, sub, arrays[f"opt/{name}/m"].copy(),
                                            arrays[f"opt/{name}/v"].copy(),
                                            arrays[f"opt/{name}/steps"].copy(), **tr.hyper)
        for key in arrays:
            if key.startswith("dense/") and key.endswith("/m"):
                name = key[len("dense/"):-2]
                tr.dense_opt.state[name] = (arrays[key].copy(), arrays[f"dense/{name}/v"].copy(),
                                            arrays[f"dense/{name}/steps"].copy())
        for name, im in meta["importance"].items():
            klass = GradientImportance if im["kind"] == "GradientImportance" else ImportanceState
            tr.importance[name] = klass(name, arrays[f"imp/{name}/sens"].copy(),
                                        arrays[f"imp/{name}/unc"].copy(), cfg.beta1, cfg.beta2,
                                        im["steps"], cfg.post_update_delta)
        tr.metrics = RunMetrics.from_json(meta["metrics"])
        tr.max_live_importance = meta["max_live_importance"]
        return tr


def run_training(cfg: TrainConfig, model=None, task=None):
    """Train to ``cfg.total_steps``; returns ``(metrics, trainer)``.

    When ``cfg.out_dir`` is set, metrics CSVs and a final checkpoint are written there.
    """
    tr = Trainer(cfg, model, task)
    tr.run()
    if cfg.out_dir:
        tr.metrics.write(cfg.out_dir)
        tr.save(Path(cfg.out_dir) / "checkpoint")
    return tr.metrics, tr
