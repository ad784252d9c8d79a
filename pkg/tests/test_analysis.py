import numpy as np
import pytest

from losia.analysis import (LLAMA2_7B, MemoryModelInput, SEQ_LORA_ST, SEQ_LORA_STAGES,
                            SEQ_LOSIA_ST, SEQ_LOSIA_STAGES, adam_direction_sq,
                            adam_monotone_threshold, cl_ap, cl_bwt, cl_fwt, cl_matrix_from_stage_columns,
                            cl_metrics, decoder_memory_input, enumerated_param_count, grad_heatmap,
                            mask_and_eval, masking_curve, memory_model, middle_layers,
                            mse_bound_check, spectral_drift, top_left_singular, top_row_share)
from losia.errors import ConfigError, DimensionError, UndefinedMetricError
from losia.localization import Subnet, random_subnet
from losia.models import Batch, DecoderSpec, build_mlp, build_tiny_decoder
from losia.tasks import evaluate, make_task

SPEC = DecoderSpec(L=2, d=16, heads=2, d_ff=44, V=16, max_seq=8)


@pytest.fixture(scope="module")
def model():
    return build_tiny_decoder(SPEC, seed=0)


@pytest.fixture(scope="module")
def batch():
    return make_task("modular_add", seed=0, vocab=16).train_batch(0, 32)


# --- heatmap -----------------------------------------------------------------

def test_heatmap_margins_and_csv(model, batch, tmp_path):
    hm = grad_heatmap(model, batch, "layers.0.up_proj", tmp_path / "h.csv")
    assert hm.values.shape == (16, 44) and np.all(hm.values >= 0)
    np.testing.assert_allclose(hm.row_sums, hm.values.sum(1))
    np.testing.assert_allclose(hm.col_sums, hm.values.sum(0))
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0].startswith("row,c0") and lines[-1].startswith("col_sum")
    assert len(lines) == 1 + 16 + 1
    share, uniform = top_row_share(hm, 0.25)
    assert uniform == 0.25 and uniform <= share <= 1.0


def test_heatmap_zero_gradient_and_unknown_layer(batch):
    m = build_tiny_decoder(SPEC, seed=0)
    m.params["lm_head"][...] = 0.0  # every upstream weight gradient vanishes
    hm = grad_heatmap(m, batch, "layers.0.q_proj")
    assert not hm.values.any()
    assert top_row_share(hm, 0.5)[0] == 0.0
    with pytest.raises(KeyError):
        grad_heatmap(m, batch, "nope")


# --- spectral drift ----------------------------------------------------------

def test_top_left_singular_matches_svd():
    W = np.random.default_rng(0).standard_normal((20, 12))
    U, s = top_left_singular(W, 4)
    Ur, sr, _ = np.linalg.svd(W)
    np.testing.assert_allclose(s, sr[:4], rtol=1e-9)
    np.testing.assert_allclose(np.abs(U.T @ Ur[:, :4]), np.eye(4), atol=1e-8)


def test_drift_identity_and_sign_flip():
    W = np.random.default_rng(1).standard_normal((10, 10))
    np.testing.assert_allclose(spectral_drift(W, W, 3), 1.0, atol=1e-9)
    np.testing.assert_allclose(spectral_drift(W, -W, 3), 1.0, atol=1e-9)


def test_drift_rank_one_surgery_moves_top_direction():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((12, 12))
    U, _ = top_left_singular(W, 1)
    e = np.zeros(12)
    e[np.argmin(np.abs(U[:, 0]))] = 1.0
    W2 = W + 100 * np.outer(e, rng.standard_normal(12))  # dominant new direction e
    drift = spectral_drift(W, W2, 1)
    assert drift[0] < 0.5
    U2, _ = top_left_singular(W2, 1)
    assert abs(U2[:, 0] @ e) > 0.99


def test_drift_errors():
    with pytest.raises(DimensionError):
        spectral_drift(np.ones((3, 3)), np.ones((3, 4)), 1)
    with pytest.raises(ConfigError):
        spectral_drift(np.ones((3, 3)), np.ones((3, 3)), 4)


# --- masking -------------------------------------------------------------------

def test_middle_layers():
    assert middle_layers(2) == [0, 1]
    assert middle_layers(8) == [2, 3, 4, 5]
    assert middle_layers(32) == list(range(8, 24))


def test_mask_zero_is_exact_and_high_mask_near_chance():
    spec = DecoderSpec(L=2, d=16, heads=2, d_ff=44, V=16, max_seq=8)
    m = build_tiny_decoder(spec, seed=5)
    task = make_task("modular_add", seed=0, vocab=16, eval_size=256)
    ev = task.eval_batch()
    assert mask_and_eval(m, "gradient", 0.0, ev) == evaluate(m, ev)[1]
    acc = mask_and_eval(m, "sensitivity", 0.99, ev)
    assert abs(acc - 1 / 16) < 0.1
    rows, text = masking_curve(m, ev, [0.0, 0.5])
    assert len(rows) == 4 and text.startswith("mask_pct,score_source,accuracy")
    with pytest.raises(ConfigError):
        mask_and_eval(m, "random", 0.5, ev)
    with pytest.raises(ConfigError):
        mask_and_eval(m, "gradient", 1.0, ev)


def test_mask_does_not_touch_the_model(model, batch):
    before = {k: v.copy() for k, v in model.params.items()}
    mask_and_eval(model, "gradient", 0.75, batch)
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


# --- memory model ----------------------------------------------------------------

def test_lora_exact_count_on_llama_shapes():
    rec = memory_model(LLAMA2_7B, "lora")
    hand = 32 * 64 * (4 * (4096 + 4096) + 3 * (4096 + 11008))
    assert rec.exact["trainable"] == hand == 159_907_840
    assert rec.closed_form["trainable"] == 2 * 32 * 7 * 64 * 4096
    assert rec.total() == 4 * hand and rec.bytes()["trainable"] == 2 * hand


def test_losia_counts_on_llama_shapes():
    rec = memory_model(LLAMA2_7B, "losia")
    hand = 32 * (4 * 512 * 512 + 3 * 512 * 1376) + 4096 * 4000
    assert rec.exact["trainable"] == hand
    assert abs(rec.exact["trainable"] - 122.1e6) / 122.1e6 <= 0.10
    g = memory_model(LLAMA2_7B, "galore")
    assert g.exact["gradient"] == 32000 * 4096


def test_full_budget_reproduces_decoder_param_count():
    assert enumerated_param_count(SPEC) == SPEC.param_count()
    assert enumerated_param_count(DecoderSpec(L=2, d=16, heads=2, d_ff=44, V=64, max_seq=8)) == 8608
    rec = memory_model(decoder_memory_input(SPEC, 1.0, 1.0), "losia")
    assert rec.exact["trainable"] == sum(a * c for _, _, (a, c) in SPEC.linear_shapes())


def test_memory_errors():
    with pytest.raises(ConfigError):
        memory_model(LLAMA2_7B, "dora")
    with pytest.raises(ConfigError):
        MemoryModelInput(L=0, K=7, d=8, V=8)
    with pytest.raises(ConfigError):
        MemoryModelInput(L=1, K=2, d=8, V=8, shapes=((8, 8),))


# --- continual learning metrics ----------------------------------------------------

def test_cl_metrics_against_hand_loops():
    P = np.random.default_rng(3).uniform(0, 100, (5, 4))
    N = 4
    ap = sum(P[N, j] for j in range(N)) / N
    fwt = sum(P[i, i - 1] - P[0, i - 1] for i in range(1, N + 1)) / N
    bwt = sum(P[N, i - 1] - P[i, i - 1] for i in range(1, N)) / (N - 1)
    assert cl_metrics(P) == pytest.approx((ap, fwt, bwt), abs=1e-12)


def test_cl_constant_rows_have_no_transfer():
    P = np.full((4, 3), 50.0)
    assert cl_metrics(P) == (50.0, 0.0, 0.0)


def test_cl_single_task_has_no_bwt():
    P = np.array([[40.0], [60.0]])
    assert cl_ap(P) == 60.0 and cl_fwt(P) == 20.0
    with pytest.raises(UndefinedMetricError):
        cl_bwt(P)


def test_cl_bad_shapes():
    with pytest.raises(DimensionError):
        cl_ap(np.ones((3, 3)))
    with pytest.raises(ConfigError):
        cl_ap(np.full((2, 1), 101.0))


def test_published_tables():
    ap, _, bwt = cl_metrics(cl_matrix_from_stage_columns(SEQ_LOSIA_STAGES, SEQ_LOSIA_ST))
    assert ap == pytest.approx(70.48, abs=0.01) and bwt == pytest.approx(-3.54, abs=0.01)
    _, _, bwt = cl_metrics(cl_matrix_from_stage_columns(SEQ_LORA_STAGES, SEQ_LORA_ST))
    assert bwt == pytest.approx(-8.04, abs=0.01)


# --- subnet SGD bound ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_mse_bound_on_mlp(seed):
    rng = np.random.default_rng(seed)
    m = build_mlp([6, 8, 5], seed=seed)
    batch = Batch(x=rng.standard_normal((12, 6)), y=rng.standard_normal((12, 5)))
    assign = {"fc0": random_subnet(6, 8, 0.5, rng), "fc1": rng.random((8, 5)) < 0.3}
    res = mse_bound_check(m, batch, assign, eta=0.1)
    assert res.holds and 0 <= res.mse <= res.bound + 1e-12


def test_mse_bound_full_subnet_is_zero(model, batch):
    res = mse_bound_check(model, batch, {"layers.0.q_proj": Subnet.full(16, 16)}, eta=0.5)
    assert res.mse == 0.0 and res.bound == 0.0 and res.holds


# --- Adam direction monotonicity ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_adam_direction_grows_below_threshold(seed):
    rng = np.random.default_rng(seed)
    m0, v0 = rng.uniform(0.1, 1.0), rng.uniform(0.5, 2.0)
    for G in np.linspace(0.01, 5.0, 60):
        M = 0.9 * m0 + 0.1 * G
        V = 0.999 * v0 + 0.001 * G * G
        h = 1e-6
        slope = (adam_direction_sq(G + h, m0, v0) - adam_direction_sq(G - h, m0, v0)) / (2 * h)
        if G < 0.99 * adam_monotone_threshold(M, V):
            assert slope > 0
        elif G > 1.01 * adam_monotone_threshold(M, V):
            assert slope < 0
