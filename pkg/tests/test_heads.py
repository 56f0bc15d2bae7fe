import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coherence_marker.models.heads import (
    MLP,
    Adam,
    ConvMaxPool,
    bce_with_logits,
    concat_features,
    concat_features_grad,
    make_optimizer,
    margin_loss,
    sigmoid,
)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def test_concat_examples():
    out = concat_features(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert out.tolist() == [1, 0, 0, 1, 1, -1, 0, 0, 1, 1]
    v = np.array([2.0, -3.0])
    out = concat_features(v, v)
    assert out[4:6].tolist() == [0, 0] and out[8:].tolist() == [0, 0] and out[6:8].tolist() == [4, 9]
    with pytest.raises(ValueError):
        concat_features(np.zeros(2), np.zeros(3))


vec8 = arrays(np.float64, 8, elements=st.floats(-10, 10))


@settings(max_examples=50)
@given(vec8, vec8)
def test_concat_segments_and_swap(u1, u2):
    out = concat_features(u1, u2)
    d = 8
    naive = [*u1, *u2, *(a - b for a, b in zip(u1, u2)), *(a * b for a, b in zip(u1, u2)), *(abs(a - b) for a, b in zip(u1, u2))]
    assert out.shape == (5 * d,) and np.array_equal(out, np.array(naive))
    sw = concat_features(u2, u1)
    assert np.array_equal(sw[:d], out[d : 2 * d]) and np.array_equal(sw[d : 2 * d], out[:d])
    assert np.array_equal(sw[2 * d : 3 * d], -out[2 * d : 3 * d])
    assert np.array_equal(sw[3 * d :], out[3 * d :])


def test_concat_grad_finite_difference():
    rng = np.random.default_rng(0)
    u1, u2, g = rng.normal(size=4), rng.normal(size=4), rng.normal(size=20)
    du1, du2 = concat_features_grad(u1, u2, g)
    assert rel_err(du1, numeric_grad(lambda: concat_features(u1, u2) @ g, u1)) < 1e-6
    assert rel_err(du2, numeric_grad(lambda: concat_features(u1, u2) @ g, u2)) < 1e-6


def test_margin_fixtures():
    assert margin_loss(7, 1, 5) == 0
    assert margin_loss(2, 1, 5) == 4
    for x in (-2.5, 0.0, 3.3):
        assert margin_loss(x, x, 3) == 3
    with pytest.raises(ValueError):
        margin_loss(1, 0, 0)


@given(st.floats(-100, 100), st.floats(-100, 100), st.sampled_from([3.0, 5.0, 7.0]))
def test_margin_properties(fp, fn, n):
    loss = margin_loss(fp, fn, n)
    assert loss >= 0
    assert (loss == 0) == (fp - fn >= n)


def test_sigmoid_stable():
    z = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
    s = sigmoid(z)
    assert np.all(np.isfinite(s)) and s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0


def test_bce_grad():
    rng = np.random.default_rng(1)
    z, y = rng.normal(size=6), (rng.random(6) > 0.5).astype(float)
    _, g = bce_with_logits(z, y)
    assert rel_err(g, numeric_grad(lambda: bce_with_logits(z, y)[0], z)) < 1e-6


def test_mlp_zero_head():
    mlp = MLP(6, 4, zero=True)
    out, _ = mlp.forward(np.random.default_rng(0).normal(size=(3, 6)))
    assert np.all(out == 0)


@pytest.mark.parametrize("seed", range(10))
def test_mlp_gradients(seed):
    rng = np.random.default_rng(seed)
    mlp = MLP(5, 3, rng)
    x, w = rng.normal(size=(4, 5)), rng.normal(size=4)
    out, cache = mlp.forward(x)
    grads, dx = mlp.backward(cache, w)

    def f():
        return float(mlp.forward(x)[0] @ w)

    for k, p in mlp.params.items():
        assert rel_err(grads[k], numeric_grad(f, p)) < 1e-4, k
    assert rel_err(dx, numeric_grad(f, x)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    conv = ConvMaxPool(3, 4, 2, rng)
    x = rng.normal(size=(3, 6))
    w = rng.normal(size=4)
    pooled, cache = conv.forward(x)
    grads = conv.backward(cache, w)

    def f():
        return float(conv.forward(x)[0] @ w)

    for k, p in conv.params.items():
        assert rel_err(grads[k], numeric_grad(f, p)) < 1e-4, k


def test_conv_short_input_padded():
    conv = ConvMaxPool(2, 3, 4, np.random.default_rng(0))
    pooled, _ = conv.forward(np.ones((2, 1)))
    assert pooled.shape == (3,) and np.all(pooled >= 0)


def test_adam_minimises_quadratic():
    p = {"x": np.array([3.0, -2.0])}
    opt = make_optimizer("adam", p, 0.1)
    for _ in range(500):
        opt.step(p, {"x": 2 * p["x"]})
    assert np.allclose(p["x"], 0, atol=1e-2)


def test_adamw_decays_without_gradient():
    p = {"x": np.array([1.0])}
    opt = make_optimizer("adamw", p, 0.1, weight_decay=0.5)
    opt.step(p, {"x": np.array([0.0])})
    assert p["x"][0] == pytest.approx(0.95)
    assert isinstance(opt, Adam)
    with pytest.raises(ValueError):
        make_optimizer("sgd", p, 0.1)
