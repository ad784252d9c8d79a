"""``losia-lab`` command line.

Outputs land under ``$LOSIA_OUT`` (default ``./runs``) unless ``--out`` is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, experiments, localization
from .config import TrainConfig, _coerce, _FIELDS, dump_config, load_config
from .errors import LosiaError
from .schedule import ScheduleState, dump_csv
from .trainer import Trainer, run_training

OUT_ENV = "LOSIA_OUT"


def out_root():
    return Path(os.environ.get(OUT_ENV, "runs"))


def _out(args, *default):
    path = Path(args.out) if args.out else out_root().joinpath(*default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _overrides(pairs):
    values = {}
    for item in pairs or ():
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or key not in _FIELDS:
            raise LosiaError(f"bad --set {item!r}; expected key=value with a TrainConfig key")
        values[key] = _coerce(key, raw)
    return values


def _config(path, sets, **extra):
    values = {**_overrides(sets), **{k: v for k, v in extra.items() if v is not None}}
    if path:
        return load_config(path, **values)
    return TrainConfig(**values).validate()


def _print(obj):
    print(json.dumps(obj, indent=1, default=float))


# --- subcommands -------------------------------------------------------------

def cmd_train(args):
    cfg = _config(args.config, args.set, seed=args.seed)
    out = _out(args, "train", f"{cfg.method}-{cfg.task}-s{cfg.seed}")
    cfg = cfg.replace(out_dir=str(out))
    (out / "config.cfg").write_text(dump_config(cfg))
    if args.resume:
        tr = Trainer.load(args.resume, out_dir=str(out))
        tr.run(cfg.total_steps)
        tr.metrics.write(out)
        tr.save(out / "checkpoint")
        metrics = tr.metrics
    else:
        metrics, tr = run_training(cfg)
    last = metrics.evals[-1] if metrics.evals else {}
    _print({"out": str(out), "steps": tr.t, "final_eval_loss": last.get("eval_loss"),
            "final_accuracy": last.get("accuracy"), "digest": metrics.digest(),
            "frozen_audit": tr.frozen_audit() or "pass"})


def cmd_suite(args):
    configs = [_config(p, args.set) for p in args.configs]
    out = _out(args, "suite")
    rows, text = experiments.run_baseline_suite(configs, range(args.seeds), out / "suite.csv")
    sys.stdout.write(text)


def cmd_continual(args):
    if args.configs:
        configs = [_config(p, args.set) for p in args.configs]
    else:
        configs = experiments.continual_tasks(args.method, args.steps, args.seed, **_overrides(args.set))
    out = _out(args, "continual", configs[0].method)
    P = experiments.run_continual(configs, out / "cl_matrix.csv")
    res = {"P": P.tolist(), "AP": analysis.cl_ap(P), "FWT": analysis.cl_fwt(P)}
    if P.shape[1] > 1:
        res["BWT"] = analysis.cl_bwt(P)
    (out / "cl_metrics.json").write_text(json.dumps(res, indent=1))
    _print(res)


def cmd_heatmap(args):
    tr = Trainer.load(args.checkpoint)
    out = _out(args, "analyze")
    hm = analysis.grad_heatmap(tr.model, tr.task.eval_batch(), args.layer,
                               out / f"heatmap_{args.layer}.csv")
    share, uniform = analysis.top_row_share(hm, args.p)
    _print({"csv": str(out / f"heatmap_{args.layer}.csv"), "top_row_share": share,
            "uniform_share": uniform})


def cmd_drift(args):
    arrays, _ = _ckpt_arrays(args.checkpoint)
    after = arrays[f"params/{args.layer}"]
    before = (_ckpt_arrays(args.before)[0][f"params/{args.layer}"] if args.before
              else arrays[f"initial/{args.layer}"])
    sims = analysis.spectral_drift(before, after, args.k)
    out = _out(args, "analyze")
    path = out / f"drift_{args.layer}.csv"
    path.write_text("rank,similarity\n" + "".join(f"{i},{s!r}\n" for i, s in enumerate(sims)))
    _print({"csv": str(path), "similarities": sims.tolist()})


def _ckpt_arrays(path):
    from . import checkpoint
    return checkpoint.load(path)


def cmd_mask(args):
    tr = Trainer.load(args.checkpoint)
    pcts = [float(x) for x in args.pcts.split(",")]
    rows, text = analysis.masking_curve(tr.model, tr.task.eval_batch(), pcts,
                                        score_batch=tr.task.train_batch(0, 64))
    out = _out(args, "analyze")
    (out / "mask_curve.csv").write_text(text)
    sys.stdout.write(text)


def cmd_memory(args):
    if args.preset == "llama2-7b":
        base = analysis.LLAMA2_7B
    else:
        cfg = _config(args.config, args.set)
        base = analysis.decoder_memory_input(cfg.model_spec())
    import dataclasses
    kw = {k: v for k, v in dict(r=args.r, R=args.R, p=args.p, p_o=args.p_o, b=args.b).items()
          if v is not None}
    inp = dataclasses.replace(base, **kw)
    recs = [analysis.memory_model(inp, m).to_json() for m in args.methods.split(",")]
    out = _out(args, "analyze")
    (out / "memory.json").write_text(json.dumps(recs, indent=1))
    _print(recs)


def cmd_cl(args):
    if args.preset:
        stages, st = {"seq-lora": (analysis.SEQ_LORA_STAGES, analysis.SEQ_LORA_ST),
                      "seq-losia": (analysis.SEQ_LOSIA_STAGES, analysis.SEQ_LOSIA_ST)}[args.preset]
        P = analysis.cl_matrix_from_stage_columns(stages, st)
    else:
        P = np.loadtxt(args.matrix, delimiter=",", ndmin=2)
    res = {"AP": analysis.cl_ap(P), "FWT": analysis.cl_fwt(P)}
    res["BWT"] = analysis.cl_bwt(P) if P.shape[1] > 1 else None
    _print(res)


def cmd_select(args):
    q = np.loadtxt(args.scores, delimiter=",", ndmin=2)
    fn = {"best": localization.select_best, "row2column": localization.row2column,
          "column2row": localization.column2row, "exhaustive": localization.brute_force_subnet,
          "output": localization.output_layer_subnet}[args.strategy]
    sub = fn(q, args.p)
    _print({**sub.to_json(), "score": localization.subnet_score(q, sub)})


def cmd_schedule(args):
    st = ScheduleState(args.T, args.L, args.warmup, args.start, 1.0, None, "constant",
                       args.sl, not args.wds_off)
    if args.out:
        with open(args.out, "w") as f:
            dump_csv(st, args.steps, f)
    else:
        sys.stdout.write(dump_csv(st, args.steps))


# --- parser --------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="losia-lab", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key (repeatable)")
        p.add_argument("--out", help=f"output directory (default under ${OUT_ENV})")

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("suite", help="compare configs over seeds")
    p.add_argument("configs", nargs="+")
    p.add_argument("--seeds", type=int, default=5)
    common(p)
    p.set_defaults(fn=cmd_suite)

    p = sub.add_parser("continual", help="sequential multi-task run and its accuracy matrix")
    p.add_argument("configs", nargs="*", help="one config per stage (default: built-in sequence)")
    p.add_argument("--method", default="losia")
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(fn=cmd_continual)

    an = sub.add_parser("analyze", help="diagnostics").add_subparsers(dest="what", required=True)
    p = an.add_parser("heatmap", help="|grad W| with row/column margins")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--p", type=float, default=0.125)
    common(p, False)
    p.set_defaults(fn=cmd_heatmap)
    p = an.add_parser("drift", help="top-k singular vector similarity")
    p.add_argument("--checkpoint", required=True, help="weights after training")
    p.add_argument("--before", help="checkpoint before (default: the run's initial weights)")
    p.add_argument("--layer", required=True)
    p.add_argument("--k", type=int, default=8)
    common(p, False)
    p.set_defaults(fn=cmd_drift)
    p = an.add_parser("mask", help="accuracy when masking outside selected subnets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pcts", default="0,0.25,0.5,0.75,0.9")
    common(p, False)
    p.set_defaults(fn=cmd_mask)
    p = an.add_parser("memory", help="trainable/optimizer/gradient/auxiliary counts")
    p.add_argument("--preset", choices=("llama2-7b", "config"), default="llama2-7b")
    p.add_argument("--config")
    p.add_argument("--methods", default="lora,galore,losia")
    for k, t in (("r", int), ("R", int), ("p", float), ("p_o", float), ("b", int)):
        p.add_argument(f"--{k}", type=t)
    common(p)
    p.set_defaults(fn=cmd_memory)
    p = an.add_parser("cl", help="AP/FWT/BWT from an (N+1) x N accuracy matrix")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--matrix", help="CSV file, row 0 = single-task references")
    g.add_argument("--preset", choices=("seq-lora", "seq-losia"))
    p.set_defaults(fn=cmd_cl)

    p = sub.add_parser("select", help="pick a subnet from a CSV score matrix")
    p.add_argument("scores")
    p.add_argument("--p", type=float, default=0.125)
    p.add_argument("--strategy", default="best",
                   choices=("best", "row2column", "column2row", "exhaustive", "output"))
    p.set_defaults(fn=cmd_select)

    sc = sub.add_parser("schedule", help="scheduler utilities").add_subparsers(dest="what", required=True)
    p = sc.add_parser("dump", help="phase timeline as CSV")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--sl", action="store_true")
    p.add_argument("--wds-off", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_schedule)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (LosiaError, ValueError, KeyError, OSError) as e:
        print(f"losia-lab: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
