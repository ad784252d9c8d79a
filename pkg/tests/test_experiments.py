import logging

import numpy as np
import pytest

from losia.analysis import cl_bwt, cl_fwt
from losia.config import TrainConfig
from losia.errors import ConfigError, UndefinedMetricError
from losia.experiments import (config_label, continual_tasks, gini, run_baseline_suite,
                               run_continual, selection_counts, selection_frequency_report)
from losia.trainer import run_training

TINY = dict(layers=1, d_model=16, d_ff=44, steps=12, T=3, batch_size=8, eval_size=32, lr=1e-2)


def test_suite_contract(tmp_path):
    cfgs = [TrainConfig(method="fft", **TINY), TrainConfig(method="losia", wds_off=True, **TINY)]
    rows, text = run_baseline_suite(cfgs, range(5), tmp_path / "s.csv")
    assert [r["label"] for r in rows] == ["fft", "losia+wds_off"]
    assert all(r["seeds"] == 5 and len(r["losses"]) == 5 for r in rows)
    assert rows[0]["loss_mean"] == pytest.approx(np.mean(rows[0]["losses"]))
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("label,method,flags") and len(lines) == 3
    assert text == (tmp_path / "s.csv").read_text()


def test_identical_configs_give_identical_rows_and_flat_trend():
    cfg = TrainConfig(method="random_subnet", **TINY)
    rows, _ = run_baseline_suite([cfg, cfg], range(5))
    a, b = rows
    assert a["losses"] == b["losses"] and b["trend"] == "flat" and a["trend"] == ""


def test_suite_rejects_few_seeds_and_mixed_tasks():
    with pytest.raises(ConfigError):
        run_baseline_suite([TrainConfig(**TINY)], range(3))
    with pytest.raises(ConfigError):
        run_baseline_suite([TrainConfig(**TINY), TrainConfig(task="copy", **TINY)], range(5))


def test_config_label():
    assert config_label(TrainConfig(method="losia", sl=True, gl=True)) == "losia+sl+gl"


def test_continual_single_task_matrix(tmp_path):
    P = run_continual([TrainConfig(method="losia", **TINY)], tmp_path / "p.csv")
    assert P.shape == (2, 1)
    # The lone stage is the reference run repeated from the same weights.
    assert P[0, 0] == P[1, 0] and cl_fwt(P) == 0.0
    with pytest.raises(UndefinedMetricError):
        cl_bwt(P)
    assert np.array_equal(np.loadtxt(tmp_path / "p.csv", delimiter=",", ndmin=2), P)


def test_continual_sequence_and_repeat_warning(caplog):
    cfgs = continual_tasks("losia", **{k: v for k, v in TINY.items() if k != "steps"}, steps=6)
    assert [c.task for c in cfgs] == ["copy", "modular_add", "modular_add"]
    P = run_continual(cfgs)
    assert P.shape == (4, 3) and np.all((0 <= P) & (P <= 100))
    with caplog.at_level(logging.WARNING):
        run_continual([cfgs[1], cfgs[1]])
    assert "repeats a task" in caplog.text


def test_continual_rejects_mixed_shapes():
    with pytest.raises(ConfigError):
        run_continual([TrainConfig(**TINY), TrainConfig(**{**TINY, "d_model": 32})])


def test_gini():
    assert gini([3, 3, 3]) == 0.0
    assert gini([0, 0, 0, 8]) == pytest.approx(0.75)
    assert gini([]) == 0.0 and gini([0, 0]) == 0.0


def _shapes(tr):
    return {n: i.shape for n, i in tr.infos.items()}


def test_selection_counts_static_run_counts_once():
    met, tr = run_training(TrainConfig(method="static_subnet", **{**TINY, "steps": 9}))
    counts = selection_counts(met, _shapes(tr))
    for name, (rows, cols) in counts.items():
        assert rows.sum() == len(tr.subnets[name].x_s) and rows.max() == 1
        assert cols.sum() == len(tr.subnets[name].y_s)


def test_selection_counts_cardinality_over_reselections(tmp_path):
    met, tr = run_training(TrainConfig(method="losia", **{**TINY, "steps": 30}))
    counts = selection_counts(met, _shapes(tr))
    for name, (rows, cols) in counts.items():
        events = [e for e in met.events if e["layer"] == name and not e["initial"]]
        assert rows.sum() == sum(len(e["x_s"]) for e in events)
        assert cols.sum() == sum(len(e["y_s"]) for e in events)
    a, b = selection_frequency_report(met, _shapes(tr), str(tmp_path / "sel"))
    assert a.startswith("layer,side,neuron,count") and b.startswith("layer,side,rank,count,gini")
    assert (tmp_path / "sel_counts.csv").exists() and (tmp_path / "sel_curve.csv").exists()


def test_selection_counts_refuses_fft():
    met, tr = run_training(TrainConfig(method="fft", **{**TINY, "steps": 3}))
    with pytest.raises(ConfigError):
        selection_counts(met, _shapes(tr))
