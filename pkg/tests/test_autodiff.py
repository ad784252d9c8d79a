import numpy as np
import pytest

from losia import autodiff as ad
from losia.errors import DimensionError, NumericOverflowError
from losia.gradcheck import PRIMITIVES, check_primitive
from losia.models import Batch, DecoderSpec, build_mlp, build_tiny_decoder


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_matches_central_differences(name):
    worst = max(check_primitive(name, seed).rel_err for seed in range(12))
    assert worst <= 1e-5


def test_outer_sum_matches_matmul():
    rng = np.random.default_rng(0)
    x, dy = rng.standard_normal((7, 5)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(ad.outer_sum(x, dy), x.T @ dy, rtol=1e-12, atol=1e-12)


def test_outer_sum_sub_block_is_bitwise_slice():
    rng = np.random.default_rng(1)
    x, dy = rng.standard_normal((33, 20)), rng.standard_normal((33, 17))
    rows, cols = np.array([1, 4, 9, 19]), np.array([0, 5, 16])
    full = ad.outer_sum(x, dy)
    block = ad.outer_sum(x[:, rows], dy[:, cols])
    assert np.array_equal(block, full[np.ix_(rows, cols)])


def test_outer_sum_row_order_is_sequential():
    # 1e16 + 1 - 1e16 loses the 1 when added left to right; any reordering keeps it.
    x = np.array([[1e16], [1.0], [-1e16]])
    assert ad.outer_sum(x, np.ones((3, 1)))[0, 0] == 0.0


def test_outer_sum_shape_errors():
    with pytest.raises(DimensionError):
        ad.outer_sum(np.zeros((3, 2)), np.zeros((4, 2)))


def test_matmul_shape_mismatch():
    tape = ad.Tape()
    with pytest.raises(DimensionError):
        ad.matmul(tape.param(np.zeros((2, 3)), "a"), tape.param(np.zeros((2, 3)), "b"))


def test_backward_needs_scalar():
    tape = ad.Tape()
    a = tape.param(np.ones((2, 2)), "a")
    with pytest.raises(DimensionError):
        tape.backward(ad.scale(a, 2.0))


def test_linear_hook_receives_saved_activation_and_no_weight_grad():
    rng = np.random.default_rng(3)
    X, W = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    seen = {}

    def hook(x, dy):
        seen["x"], seen["dy"] = x, dy

    tape = ad.Tape({"lin": hook})
    x = tape.param(X, "x")
    w = tape.param(W, "lin")
    y = ad.linear(x, w, name="lin", keep_cols=np.array([0, 3]))
    grads = tape.backward(ad.sum_all(y))
    assert "lin" not in grads
    assert np.array_equal(seen["x"], X[:, [0, 3]])
    assert np.array_equal(seen["dy"], np.ones((4, 3)))
    np.testing.assert_allclose(grads["x"], np.ones((4, 3)) @ W.T)


def test_keep_cols_without_hook_is_rejected():
    tape = ad.Tape()
    with pytest.raises(ValueError):
        ad.linear(tape.param(np.ones((2, 2)), "x"), tape.param(np.ones((2, 2)), "w"),
                  name="w", keep_cols=np.array([0]))


def _decoder_batch(spec, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, spec.V, size=(3, 5))
    return Batch(ids=ids, targets=rng.integers(0, spec.V, size=(3, 5)), mask=np.ones((3, 5)))


def test_decoder_gradients_match_finite_differences():
    spec = DecoderSpec(L=1, d=8, heads=2, d_ff=12, V=11, max_seq=8)
    model = build_tiny_decoder(spec, seed=4)
    batch = _decoder_batch(spec)
    ad.forward_backward(model, batch)
    rng = np.random.default_rng(5)
    for name in ("layers.0.q_proj", "layers.0.gate_proj", "lm_head", "embed", "layers.0.ln1.g"):
        arr = model.params[name]
        for _ in range(3):
            idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
            fd = ad.finite_diff_grad(model, batch, (name, idx))
            assert abs(model.grads[name][idx] - fd) <= 1e-6 * max(1.0, abs(fd))


def test_hooked_forward_backward_matches_plain_gradient():
    spec = DecoderSpec(L=1, d=8, heads=1, d_ff=12, V=9, max_seq=8)
    model = build_tiny_decoder(spec, seed=6)
    batch = _decoder_batch(spec, 1)
    ad.forward_backward(model, batch)
    ref = dict(model.grads)
    got = {}

    def make(n):
        def hook(x, dy):
            got[n] = ad.outer_sum(x, dy)
        return hook

    ad.forward_backward(model, batch, {n: make(n) for n in model.linear_names()})
    for n in model.linear_names():
        assert np.array_equal(got[n], ref[n])
        assert n not in model.grads


def test_mlp_gradients_match_finite_differences():
    model = build_mlp([3, 5, 2], seed=0, activation="gelu")
    rng = np.random.default_rng(0)
    batch = Batch(x=rng.standard_normal((4, 3)), y=rng.standard_normal((4, 2)))
    ad.forward_backward(model, batch)
    fd = ad.finite_diff_grad(model, batch, ("fc0", (1, 2)))
    assert abs(model.grads["fc0"][1, 2] - fd) < 1e-8


def test_non_finite_loss_raises_with_step():
    model = build_mlp([2, 2], seed=0)
    batch = Batch(x=np.array([[np.inf, 0.0]]), y=np.zeros((1, 2)))
    with pytest.raises(NumericOverflowError, match="step 12"):
        ad.forward_backward(model, batch, step=12)


def test_finite_diff_grad_rejects_bad_coordinates():
    model = build_mlp([2, 2], seed=0)
    batch = Batch(x=np.ones((1, 2)), y=np.zeros((1, 2)))
    with pytest.raises(IndexError):
        ad.finite_diff_grad(model, batch, ("fc0", (5, 0)))
    with pytest.raises(IndexError):
        ad.finite_diff_grad(model, batch, ("nope", (0, 0)))
    with pytest.raises(ValueError):
        ad.finite_diff_grad(model, batch, ("fc0", (0, 0)), h=0.0)


def test_finite_diff_restores_parameter():
    model = build_mlp([2, 2], seed=0)
    before = model.params["fc0"].copy()
    ad.finite_diff_grad(model, Batch(x=np.ones((1, 2)), y=np.zeros((1, 2))), ("fc0", (0, 1)))
    assert np.array_equal(model.params["fc0"], before)


def test_relative_error_zero_vectors():
    assert ad.relative_error(np.zeros(3), np.zeros(3)) == 0.0
