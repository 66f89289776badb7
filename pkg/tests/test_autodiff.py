import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pbpk_sciml import autodiff as ad
from pbpk_sciml.autodiff import GradientError, NumericError, ShapeError, Tape, Tensor
from pbpk_sciml.rng import stream

N_CASES = 20
TOL = 1e-5


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(-2.0, 2.0, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _case(op, seed):
    """Returns (loss_fn, leaves) for one random instance of ``op``."""
    rng = stream(seed, "gradcheck", op)
    r, c = rng.integers(2, 5, size=2)
    t = lambda shape, x=None: Tensor(rng.standard_normal(shape) if x is None else x, requires_grad=True)
    w = rng.standard_normal((r, c))
    if op == "add":
        a, b = t((r, c)), t((r, c))
        return lambda: ad.sum((a + b) * Tensor(w)), [a, b]
    if op == "add_bias":
        a, b = t((r, c)), t((c,))
        return lambda: ad.sum((a + b) * Tensor(w)), [a, b]
    if op == "sub":
        a, b = t((r, c)), t((r, c))
        return lambda: ad.sum((a - b) * Tensor(w)), [a, b]
    if op == "sub_bias":
        a, b = t((r, c)), t((c,))
        return lambda: ad.sum((a - b) * Tensor(w)), [a, b]
    if op == "mul":
        a, b = t((r, c)), t((r, c))
        return lambda: ad.sum(a * b), [a, b]
    if op == "scale":
        a, k = t((r, c)), float(rng.normal())
        return lambda: ad.sum(ad.scale(a, k) * Tensor(w)), [a]
    if op == "shift":
        a, k = t((r, c)), float(rng.normal())
        return lambda: ad.sum(ad.shift(a, k) * ad.shift(a, k)), [a]
    if op == "neg":
        a = t((r, c))
        return lambda: ad.sum(ad.neg(a) * Tensor(w)), [a]
    if op == "relu":
        a = t((r, c), _away_from_zero(rng, (r, c)))
        return lambda: ad.sum(ad.relu(a) * Tensor(w)), [a]
    if op == "exp":
        a = t((r, c))
        return lambda: ad.sum(ad.exp(a) * Tensor(w)), [a]
    if op == "tanh":
        a = t((r, c))
        return lambda: ad.sum(ad.tanh(a) * Tensor(w)), [a]
    if op == "matmul":
        k = int(rng.integers(2, 5))
        a, b = t((r, k)), t((k, c))
        return lambda: ad.sum((a @ b) * Tensor(w)), [a, b]
    if op == "matmul_batched":
        k = int(rng.integers(2, 4))
        a, b = t((2, r, k)), t((2, k, c))
        w3 = rng.standard_normal((2, r, c))
        return lambda: ad.sum((a @ b) * Tensor(w3)), [a, b]
    if op == "transpose":
        a = t((r, c))
        return lambda: ad.sum(ad.transpose(a) * Tensor(w.T)), [a]
    if op == "reshape":
        a = t((r, c))
        return lambda: ad.sum(ad.reshape(a, (c, r)) * Tensor(w.reshape(c, r))), [a]
    if op == "concat":
        a, b = t((r, c)), t((r, 2))
        wc = rng.standard_normal((r, c + 2))
        return lambda: ad.sum(ad.concat([a, b], axis=1) * Tensor(wc)), [a, b]
    if op == "index":
        a = t((r, c))
        idx = rng.integers(0, r, size=5)
        wi = rng.standard_normal((5, c))
        return lambda: ad.sum(ad.index(a, idx) * Tensor(wi)), [a]
    if op == "sum":
        a = t((r, c))
        return lambda: ad.sum(a) * ad.sum(a), [a]
    if op == "mean":
        a = t((r, c))
        return lambda: ad.mean(a * a), [a]
    if op == "softmax_rows":
        a = t((r, c))
        return lambda: ad.sum(ad.softmax_rows(a) * Tensor(w)), [a]
    if op == "mse_loss":
        a = t((r, c))
        return lambda: ad.mse_loss(a, w), [a]
    raise AssertionError(op)


OPS = ["add", "add_bias", "sub", "sub_bias", "mul", "scale", "shift", "neg", "relu", "exp", "tanh",
       "matmul", "matmul_batched", "transpose", "reshape", "concat", "index", "sum", "mean",
       "softmax_rows", "mse_loss"]


@pytest.mark.parametrize("op", OPS)
def test_gradcheck_random_cases(op):
    worst = 0.0
    for seed in range(N_CASES):
        fn, leaves = _case(op, seed)
        worst = max(worst, ad.check_gradients(fn, leaves))
    assert worst <= TOL, f"{op}: worst relative error {worst:.3e}"


def test_composite_chain_gradcheck():
    rng = stream(1, "composite")
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    fn = lambda: ad.mean(ad.tanh(ad.softmax_rows(x @ w) @ ad.transpose(w)) * ad.exp(ad.scale(x, 0.3)))
    assert ad.check_gradients(fn, [x, w]) <= TOL


def test_reused_node_accumulates():
    x = Tensor([2.0, -3.0], requires_grad=True)
    with Tape() as tape:
        y = ad.sum(x * x + x)
    ad.backward(y, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = x * x
    with Tape() as tape:
        Tensor([1.0]) + Tensor([2.0])
    assert tape.records == []
    with pytest.raises(GradientError):
        ad.backward(ad.sum(y), Tape())


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * x
    with pytest.raises(GradientError, match="scalar"):
        ad.backward(y, tape)


def test_shape_mismatch_message():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        ad.softmax_rows(Tensor([[np.nan, 1.0]]))


def test_softmax_handles_masked_entries():
    p = ad.softmax_rows(Tensor([[0.0, -np.inf, 1.0]])).data
    assert p[0, 1] == 0.0
    assert math.isclose(p.sum(), 1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_adam_step_matches_closed_form():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.25])
    state = ad.AdamState(lr=0.1)
    ad.adam_step([p], state)
    # first bias-corrected step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)
    np.testing.assert_array_equal(p.grad, 0.0)


def test_adam_missing_grad():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(GradientError, match="gradient"):
        ad.adam_step([p], ad.AdamState())


def test_glorot_bounds():
    w = ad.glorot_uniform(stream(0, "g"), 30, 10)
    assert np.max(np.abs(w.data)) <= math.sqrt(6 / 40)
    assert w.requires_grad


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    rng = stream(0, "ckpt")
    params = {"a": Tensor(rng.standard_normal((3, 2)), requires_grad=True),
              "b": Tensor(rng.standard_normal(4), requires_grad=True)}
    for p in params.values():
        p.grad = np.ones_like(p.data)
    opt = ad.AdamState(lr=0.01)
    ad.adam_step(list(params.values()), opt)
    p1 = ad.save_checkpoint(tmp_path / "one.ckpt", "demo", params, opt, {"k": 1})
    p2 = ad.save_checkpoint(tmp_path / "two.ckpt", "demo", params, opt, {"k": 1})
    assert p1.read_bytes() == p2.read_bytes()
    ck = ad.load_checkpoint(p1, "demo")
    for k, v in params.items():
        np.testing.assert_array_equal(ck.params[k], v.data)
    assert ck.optimizer.step == 1
    assert ck.extra == {"k": 1}


def test_checkpoint_wrong_module(tmp_path):
    p = ad.save_checkpoint(tmp_path / "x.ckpt", "demo", {"a": Tensor(np.ones(2))})
    with pytest.raises(ValueError, match="demo"):
        ad.load_checkpoint(p, "other")
