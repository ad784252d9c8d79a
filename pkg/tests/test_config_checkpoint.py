import json

import numpy as np
import pytest

from losia import checkpoint
from losia.config import TrainConfig, dump_config, load_config, parse_config
from losia.errors import ConfigError


def test_parse_basic_file_with_comments_and_fractions():
    cfg = parse_config("""
        # a comment
        method = losia_pro
        p = 1/4        # trailing comment
        T = 25
        sl = yes
        lr = 6e-5
    """)
    assert cfg.method == "losia_pro" and cfg.p == 0.25 and cfg.T == 25 and cfg.sl is True
    assert cfg.lr == 6e-5


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="unknown key 'learning_rate'"):
        parse_config("learning_rate = 0.1")


def test_bad_value_and_bad_line():
    with pytest.raises(ConfigError):
        parse_config("T = ten")
    with pytest.raises(ConfigError):
        parse_config("sl = maybe")
    with pytest.raises(ConfigError):
        parse_config("just some words")


@pytest.mark.parametrize("text", [
    "method = fft\nsl = true",          # ablation flags need losia
    "method = static_subnet\ngl = 1",
    "p = 0",
    "p = 0.01",                          # no neuron left at d=32
    "beta1 = 1.0",
    "method = dora",
    "heads = 3",                         # 32 % 3 != 0
    "decay = linear",
])
def test_invalid_combinations(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_round_trip_through_dump(tmp_path):
    cfg = TrainConfig(method="losia", p=0.25, wds_off=True, seed=3)
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert load_config(path, seed=9).seed == 9


def test_derived_quantities():
    cfg = TrainConfig(steps=200, epochs=2, warmup_ratio=0.1, T=50)
    assert cfg.total_steps == 400 and cfg.warmup_steps == 40 and cfg.eval_cadence == 50


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((3, 4)), "steps": np.arange(6, dtype=np.int64).reshape(2, 3),
              "scalar": np.float64(np.pi)}
    checkpoint.save(tmp_path / "ck", arrays, {"t": 5, "note": "x"})
    got, meta = checkpoint.load(tmp_path / "ck")
    assert meta == {"t": 5, "note": "x"}
    assert np.array_equal(got["a"], arrays["a"])
    assert got["steps"].dtype == np.int64 and np.array_equal(got["steps"], arrays["steps"])
    assert got["scalar"].shape == () and float(got["scalar"]) == np.pi


def test_checkpoint_files_are_raw_little_endian(tmp_path):
    checkpoint.save(tmp_path / "ck", {"w": np.array([1.5, -2.0])}, {})
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    raw = (tmp_path / "ck" / manifest["tensors"]["w"]["file"]).read_bytes()
    assert raw == np.array([1.5, -2.0], dtype="<f8").tobytes()


def test_checkpoint_rejects_foreign_directories(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        checkpoint.load(tmp_path)


def test_shipped_configs_parse():
    from pathlib import Path
    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.cfg"))
    assert paths
    for p in paths:
        load_config(p)
