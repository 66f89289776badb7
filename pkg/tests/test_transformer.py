import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pbpk_sciml import autodiff as ad
from pbpk_sciml import synthdata as sd
from pbpk_sciml import transformer as tf
from pbpk_sciml.autodiff import Tensor
from pbpk_sciml.rng import stream

SMALL = tf.TransformerConfig(n_layers=1, n_heads=2, d_model=8, ff_dim=16, epochs=20, batch_size=16)


@pytest.fixture(scope="module")
def small_data():
    return sd.gen_dataset1(60, 0)


@pytest.fixture(scope="module")
def trained(small_data):
    model = tf.ForecastModel.init(SMALL, 0)
    report = tf.train(model, small_data, 0)
    return model, report


def naive_attention(q, k, v, causal):
    out = np.zeros_like(v)
    for i in range(q.shape[0]):
        hi = i + 1 if causal else q.shape[0]
        s = np.array([q[i] @ k[j] / math.sqrt(q.shape[1]) for j in range(hi)])
        w = np.exp(s - s.max())
        out[i] = (w / w.sum()) @ v[:hi]
    return out


@pytest.mark.parametrize("causal", [False, True])
def test_attention_matches_loop(causal):
    rng = stream(0, "attn")
    q, k, v = (rng.standard_normal((6, 4)) for _ in range(3))
    np.testing.assert_allclose(tf.attention(q, k, v, causal).data, naive_attention(q, k, v, causal), atol=1e-12)


def test_attention_batched_agrees_with_2d():
    rng = stream(1, "attn")
    q, k, v = (rng.standard_normal((3, 5, 4)) for _ in range(3))
    batched = tf.attention(q, k, v, causal=True).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], tf.attention(q[b], k[b], v[b], causal=True).data, atol=1e-14)


def test_causal_weights_upper_triangle_zero():
    rng = stream(2, "attn")
    w = tf.attention_weights(Tensor(rng.standard_normal((5, 3))), Tensor(rng.standard_normal((5, 3))), True).data
    assert np.all(np.triu(w, k=1) == 0.0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


def test_attention_gradcheck():
    rng = stream(3, "attn")
    q, k, v = (Tensor(rng.standard_normal((4, 3)), requires_grad=True) for _ in range(3))
    w = Tensor(rng.standard_normal((4, 3)))
    assert ad.check_gradients(lambda: ad.sum(tf.attention(q, k, v, True) * w), [q, k, v]) <= 1e-5


def test_positional_encoding_values():
    pe = tf.positional_encoding(np.arange(3), 4)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert pe[1, 0] == pytest.approx(math.sin(1.0))
    assert pe[1, 3] == pytest.approx(math.cos(1.0 / 100.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 500), st.sampled_from([4, 8, 32]))
def test_positional_encoding_bounded(pos, d):
    pe = tf.positional_encoding(pos, d)
    assert pe.shape == (d,)
    assert np.all(np.abs(pe) <= 1.0)


def test_model_is_causal():
    model = tf.ForecastModel.init(SMALL, 0)
    rng = stream(4, "seq")
    seq = rng.standard_normal((2, 10))
    changed = seq.copy()
    changed[:, 6:] += 5.0
    a, b = model(seq).data, model(changed).data
    np.testing.assert_array_equal(a[:, :6], b[:, :6])
    assert not np.allclose(a[:, 6:], b[:, 6:])


def test_model_gradcheck():
    model = tf.ForecastModel.init(SMALL, 1)
    seq = stream(5, "seq").standard_normal((2, 6))
    target = stream(6, "seq").standard_normal((2, 6))
    leaves = [model.params["l0.wq"], model.params["l0.w1"], model.params["w_out"]]
    assert ad.check_gradients(lambda: ad.mse_loss(model(seq), target), leaves) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(-3, 3))
def test_scaler_round_trip(sd_, mean):
    s = tf.Scaler(mean, sd_)
    c = np.array([1e-3, 0.5, 7.0])
    np.testing.assert_allclose(s.inverse(s.transform(c)), c, rtol=1e-12)


def test_cosine_schedule_endpoints():
    cfg = tf.TransformerConfig()
    assert tf.learning_rate(cfg, 0, 100) == 1e-3
    assert tf.learning_rate(cfg, 50, 100) == pytest.approx(5e-4)
    assert tf.learning_rate(cfg, 100, 100) == pytest.approx(0.0, abs=1e-18)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError, match="divisible"):
        tf.TransformerConfig(d_model=10, n_heads=3)


def test_training_reduces_loss(trained):
    _, report = trained
    assert len(report.epoch_loss) == SMALL.epochs
    assert report.epoch_loss[-1] < report.epoch_loss[0]
    assert all(math.isfinite(x) for x in report.epoch_loss)


def test_generate_shapes(trained, small_data):
    model, _ = trained
    conc = small_data.matrix(small_data.test_idx)
    one = tf.generate(model, conc[0, :5])
    many = tf.generate(model, conc[:, :5])
    assert one.shape == (45,)
    assert many.shape == (len(conc), 45)
    np.testing.assert_allclose(many[0], one)
    assert np.all(many > 0)
    with pytest.raises(ValueError, match="input_len"):
        tf.generate(model, conc[0, :4])


def test_checkpoint_round_trip(trained, small_data, tmp_path):
    model, _ = trained
    model.save(tmp_path / "t.ckpt")
    again = tf.ForecastModel.load(tmp_path / "t.ckpt")
    assert again.scaler == model.scaler
    prefix = small_data.matrix(small_data.test_idx)[:3, :5]
    np.testing.assert_array_equal(tf.generate(again, prefix), tf.generate(model, prefix))


def test_training_is_deterministic(small_data):
    cfg = tf.TransformerConfig(n_layers=1, n_heads=1, d_model=4, ff_dim=8, epochs=1)
    runs = []
    for _ in range(2):
        m = tf.ForecastModel.init(cfg, 3)
        runs.append(tf.train(m, small_data, 3))
    assert runs[0].epoch_loss == runs[1].epoch_loss
    assert runs[0].test_mse == runs[1].test_mse


def test_wrong_sequence_length(small_data):
    cfg = tf.TransformerConfig(input_len=5, output_len=10, epochs=1)
    with pytest.raises(ValueError, match="expects"):
        tf.train(tf.ForecastModel.init(cfg, 0), small_data, 0)
