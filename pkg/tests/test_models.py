import math

import numpy as np
import pytest

from quzo.data import gen_synthetic
from quzo.errors import ConfigurationError, InputError, RunError
from quzo.models import (MLP, Linear, LinearProbe, Model, QuadraticProbe, TinyEncoder, adapters,
                         attach_lora, checkpoint_bytes, load_checkpoint, load_checkpoint_bytes,
                         save_checkpoint)
from quzo.quant import QuantFormat, dequantize

INT8 = QuantFormat("INT", 8)
INT4 = QuantFormat("INT", 4)


def central_fd(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def flat_grad(model, batch):
    _, grads = model.loss_and_grad(batch)
    return np.concatenate([grads[p.name].ravel() for p in model.trainable_params()])


def test_zero_weight_mlp_gives_ln2():
    m = MLP([3, 2], seed=0)
    for p in m.trainable_params():
        p.data = np.zeros_like(p.data)
    x = np.random.default_rng(0).standard_normal((10, 3))
    y = np.array([0, 1] * 5)
    assert m.loss((x, y)) == pytest.approx(math.log(2), abs=1e-15)


def test_quadratic_probe_minimum():
    q = QuadraticProbe(np.ones(4), np.ones(4))
    assert q.loss_flat(q.get_flat()) == 0.0
    assert np.array_equal(q.gradient(), np.zeros(4))
    lp = LinearProbe(np.zeros(3), [1.0, 2.0, 3.0])
    assert lp.loss_flat(np.ones(3)) == 6.0


def test_float_forward_matches_plain_numpy():
    m = MLP([4, 6, 3], seed=1)
    x = np.random.default_rng(1).standard_normal((5, 4))
    p = m.all_params()
    h = np.maximum(x @ p["fc0.weight"].data.T + p["fc0.bias"].data, 0)
    ref = h @ p["fc1.weight"].data.T + p["fc1.bias"].data
    assert np.allclose(m.output(x), ref, rtol=0, atol=1e-12)


def test_mlp_gradient_matches_finite_differences():
    m = MLP([4, 7, 5, 3], seed=2)
    for p in m.trainable_params():
        p.data = p.data + 0.1 * np.random.default_rng(9).standard_normal(p.shape)
    ds = gen_synthetic("two-gaussians", 12, seed=3, dim=4)
    batch = (ds.inputs, ds.targets % 3)
    theta = m.get_flat()
    fd = central_fd(lambda t: m.loss_flat(t, batch), theta)
    g = flat_grad(m, batch)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_encoder_gradient_matches_finite_differences():
    m = TinyEncoder(vocab=5, seq_len=4, d_model=8, heads=2, seed=4)
    ds = gen_synthetic("token-copy", 3, seed=5, vocab=5, seq_len=4)
    batch = ds.batch()
    theta = m.get_flat()
    fd = central_fd(lambda t: m.loss_flat(t, batch), theta, h=1e-5)
    g = flat_grad(m, batch)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_mse_gradient():
    m = MLP([3, 2], loss="mse", seed=0)
    x = np.random.default_rng(2).standard_normal((6, 3))
    y = np.random.default_rng(3).standard_normal((6, 2))
    fd = central_fd(lambda t: m.loss_flat(t, (x, y)), m.get_flat())
    assert np.allclose(flat_grad(m, (x, y)), fd, atol=1e-8)


def test_forward_is_pure():
    m = TinyEncoder(seed=0).quantize(INT8, INT8)
    b = gen_synthetic("token-copy", 4, seed=0).batch()
    assert m.loss(b) == m.loss(b)


def test_quantized_encoder_close_to_float_reference():
    m = TinyEncoder(seed=0).quantize(INT8, INT8)
    ref = m.copy()
    ref.act_format = None
    b = gen_synthetic("token-copy", 8, seed=1).batch()
    out, out_ref = m.output(b[0]), ref.output(b[0])
    # INT8 activations perturb each linear input by at most half a step
    assert np.max(np.abs(out - out_ref)) / np.max(np.abs(out_ref)) < 0.05
    assert not np.array_equal(out, out_ref)


def test_w32a32_equals_float():
    m = MLP([3, 5, 2], seed=0)
    x = np.random.default_rng(0).standard_normal((4, 3))
    before = m.output(x)
    m.quantize(None, None)
    assert np.array_equal(m.output(x), before)


def test_quantize_layout():
    m = MLP([3, 5, 2], seed=0).quantize(INT4, INT8)
    w = m.param("fc0.weight")
    assert w.is_quantized and w.qt.format == INT4 and w.qt.scheme.axis == 0
    b = m.param("fc0.bias")
    assert b.qt.format == INT8 and b.qt.scheme.axis is None
    assert np.all(np.abs(w.qt.codes) <= 7)


def test_lora_zero_init_is_identity():
    m = MLP([4, 6, 3], seed=0).quantize(INT4, INT8)
    x = np.random.default_rng(0).standard_normal((5, 4))
    before = m.output(x)
    attach_lora(m, 2, 1.0, fmt=INT8)
    assert np.array_equal(m.output(x), before)
    assert all(not p.trainable for p in m.all_params().values() if "lora" not in p.name)
    assert [p.name for p in m.trainable_params()] == [
        "fc0.lora_A", "fc0.lora_B", "fc1.lora_A", "fc1.lora_B"]


def test_lora_alpha_zero_is_identity():
    m = MLP([4, 6, 3], seed=0)
    x = np.random.default_rng(0).standard_normal((5, 4))
    before = m.output(x)
    attach_lora(m, 2, 0.0)
    for a in adapters(m):
        a.B.data = np.ones_like(a.B.data)
    assert np.array_equal(m.output(x), before)


def test_lora_matches_folded_weight():
    g = np.random.default_rng(0)
    lin = Linear("l", 8, 8, 1)
    m = Model([lin])
    attach_lora(m, 2, 0.5)
    lin.lora.B.data = g.standard_normal((8, 2))
    x = g.standard_normal((3, 8))
    folded = lin.weight.data + 0.5 * lin.lora.B.data @ lin.lora.A.data
    assert np.allclose(m.output(x), x @ folded.T + lin.bias.data, atol=1e-12)


def test_lora_rank_capped_and_gradient():
    m = MLP([4, 6, 2], seed=0)
    attach_lora(m, 8, 1.0)
    assert [a.rank for a in adapters(m)] == [4, 2]
    for a in adapters(m):
        a.B.data = np.random.default_rng(1).standard_normal(a.B.data.shape)
    ds = gen_synthetic("two-gaussians", 6, seed=1, dim=4)
    fd = central_fd(lambda t: m.loss_flat(t, ds.batch()), m.get_flat())
    assert np.allclose(flat_grad(m, ds.batch()), fd, atol=1e-7)


def test_lora_unknown_layer():
    with pytest.raises(ConfigurationError):
        attach_lora(MLP([2, 2]), 1, 1.0, layers=["nope"])


@pytest.mark.parametrize("make", [
    lambda: MLP([3, 4, 2], seed=3),
    lambda: MLP([3, 4, 2], seed=3).quantize(INT4, INT8),
    lambda: attach_lora(TinyEncoder(d_model=16, heads=2, seed=1).quantize(INT8, INT8), 2, 2.0, fmt=INT8),
])
def test_checkpoint_roundtrip(make, tmp_path):
    m = make()
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert checkpoint_bytes(back) == checkpoint_bytes(m)
    x = np.zeros((2, 3)) + 0.5 if m.kind == "mlp" else np.array([[1, 2, 3, 4, 5, 6, 7, 0]])
    assert np.array_equal(back.output(x), m.output(x))
    assert [p.trainable for p in back.all_params().values()] == \
           [p.trainable for p in m.all_params().values()]


def test_checkpoint_rejects_garbage():
    with pytest.raises(InputError):
        load_checkpoint_bytes(b"XXXX1234")


def test_layer_sizes():
    m = MLP([3, 4, 2], seed=0)
    assert m.layer_sizes(5) == [("fc0", 16, 20), ("fc1", 10, 10)]


def test_unflatten_size_mismatch():
    with pytest.raises(InputError):
        MLP([2, 2]).unflatten(np.zeros(3))


def test_nonfinite_forward_raises():
    m = MLP([2, 2], seed=0)
    m.param("fc0.weight").data[0, 0] = np.inf
    with pytest.raises(RunError, match="fc0"):
        m.loss((np.ones((1, 2)), np.array([0])))


def test_input_width_checked():
    with pytest.raises(InputError):
        MLP([3, 2]).output(np.zeros((1, 4)))
