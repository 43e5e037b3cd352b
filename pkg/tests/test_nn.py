import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bacoun.datasets import LabeledDataset
from bacoun.errors import ShapeError
from bacoun.nn import (
    Mlp,
    MlpConfig,
    categorical_entropy,
    loss_and_grad,
    softmax,
    train_mlp,
)


def finite_diff_grads(mlp, x, y, l2, eps=1e-5):
    params = [p.copy() for p in mlp.params()]
    out = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        for j in range(p.size):
            up = [q.copy() for q in params]
            dn = [q.copy() for q in params]
            up[i].flat[j] += eps
            dn[i].flat[j] -= eps
            lu, _ = loss_and_grad(mlp.with_params(up), x, y, l2)
            ld, _ = loss_and_grad(mlp.with_params(dn), x, y, l2)
            g.flat[j] = (lu - ld) / (2 * eps)
        out.append(g)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-7))


# softmax --------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logit_no_overflow():
    p = softmax([1000.0, 0.0])
    assert p[0] == pytest.approx(1.0)
    assert p[1] < 1e-300 or p[1] == 0.0
    assert np.all(np.isfinite(p))


def test_softmax_ln2():
    np.testing.assert_allclose(softmax([math.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        softmax([np.inf, 0.0])
    with pytest.raises(ValueError):
        softmax([np.nan, 0.0])


finite_logits = arrays(np.float64, st.integers(1, 8),
                       elements=st.floats(-700, 700, allow_nan=False))


@given(finite_logits)
def test_softmax_is_probability_vector(z):
    p = softmax(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    np.testing.assert_allclose(softmax(z + c), softmax(z), atol=1e-12)


# entropy ----------------------------------------------------------------------

def test_entropy_values():
    assert categorical_entropy([1.0, 0.0, 0.0]) == 0.0
    assert categorical_entropy([1 / 3] * 3) == pytest.approx(math.log(3), abs=1e-12)
    assert categorical_entropy([0.5, 0.5]) == pytest.approx(0.6931471805599453, abs=1e-12)


def test_entropy_rejects_negative():
    with pytest.raises(ValueError):
        categorical_entropy([1.2, -0.2])


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0, 1)))
def test_entropy_bounds(w):
    if w.sum() <= 1e-6:
        w = w + 1.0
    p = w / w.sum()
    h = categorical_entropy(p)
    assert -1e-15 <= h <= math.log(len(p)) + 1e-12


# forward ------------------------------------------------------------------------

def test_zero_network_is_uniform():
    cfg = MlpConfig(3, (5, 4), 2)
    mlp = Mlp.zeros(cfg)
    logits, feats = mlp.forward(np.random.default_rng(0).standard_normal((6, 3)))
    assert np.all(logits == 0)
    np.testing.assert_allclose(softmax(logits), 0.5)
    assert feats.shape == (6, 5)


def test_feature_bias_column_and_shapes():
    cfg = MlpConfig(2, (7, 3), 4, dropout_rate=0.3)
    mlp = Mlp.init(cfg, 0)
    x = np.random.default_rng(1).standard_normal((9, 2))
    logits, feats = mlp.forward(x)
    assert logits.shape == (9, 4)
    assert feats.shape == (9, 4)
    assert np.all(feats[:, -1] == 1.0)
    np.testing.assert_allclose(logits, feats @ mlp.last_layer(), atol=1e-12)


def test_eval_forward_is_deterministic():
    mlp = Mlp.init(MlpConfig(2, (16, 16), 3, dropout_rate=0.5), 0)
    x = np.random.default_rng(2).standard_normal((10, 2))
    a = mlp.forward(x)
    b = mlp.forward(x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_forward_shape_error():
    mlp = Mlp.init(MlpConfig(2, (4,), 2), 0)
    with pytest.raises(ShapeError):
        mlp.forward(np.zeros((3, 5)))


def test_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(2, (), 2)
    with pytest.raises(ValueError):
        MlpConfig(2, (3,), 2, dropout_rate=1.0)
    with pytest.raises(ValueError):
        MlpConfig(2, (3,), 2, l2_penalty=-1)


# loss and gradient ------------------------------------------------------------------

def test_zero_weights_loss_is_ln2_plus_penalty():
    mlp = Mlp.zeros(MlpConfig(2, (3,), 2))
    x = np.random.default_rng(0).standard_normal((5, 2))
    loss, _ = loss_and_grad(mlp, x, np.array([0, 1, 1, 0, 1]), l2=0.7)
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)
    # penalty enters when weights are nonzero
    w = [p + 0.5 for p in mlp.params()]
    loss2, _ = loss_and_grad(mlp.with_params(w), np.zeros((5, 2)), np.array([0, 1, 1, 0, 1]), 0.7)
    assert loss2 == pytest.approx(math.log(2.0) + 0.7 * 0.25 * (2 * 3 + 3 * 2), abs=1e-12)


def test_duplicated_batch_leaves_loss_unchanged():
    mlp = Mlp.init(MlpConfig(2, (8,), 3), 0)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((7, 2))
    y = rng.integers(0, 3, 7)
    l1, _ = loss_and_grad(mlp, x, y, 0.01)
    l2, _ = loss_and_grad(mlp, np.vstack([x, x]), np.concatenate([y, y]), 0.01)
    assert l1 == pytest.approx(l2, rel=1e-14)


def test_label_out_of_range():
    mlp = Mlp.init(MlpConfig(2, (4,), 2), 0)
    with pytest.raises(ValueError):
        loss_and_grad(mlp, np.zeros((2, 2)), np.array([0, 2]))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    hidden = tuple(int(h) for h in rng.integers(2, 10, size=rng.integers(1, 3)))
    cfg = MlpConfig(3, hidden, 3, leaky_slope=0.1)
    mlp = Mlp.init(cfg, rng)
    mlp = mlp.with_params([p + 0.1 * rng.standard_normal(p.shape) for p in mlp.params()])
    x = rng.standard_normal((6, 3))
    y = rng.integers(0, 3, 6)
    _, grads = loss_and_grad(mlp, x, y, 0.05)
    fd = finite_diff_grads(mlp, x, y, 0.05)
    for g, f in zip(grads, fd):
        assert rel_err(g, f) < 1e-4


# training ---------------------------------------------------------------------------------

def blobs(seed=0):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(5, 0.5, (100, 2)), rng.normal(-5, 0.5, (100, 2))])
    y = np.repeat([0, 1], 100)
    return LabeledDataset(x=x, y=y, b=np.zeros(200), class_count=2)


def test_train_separable_blobs():
    data = blobs()
    mlp = Mlp.init(MlpConfig(2, (16, 16), 2), 0)
    trained, history = train_mlp(mlp, data, epochs=200, batch_size=32, seed=1)
    acc = (trained.logits(data.x).argmax(1) == data.y).mean()
    assert acc == 1.0
    assert history[-1] < history[0]


def test_train_is_deterministic_and_zero_epochs_identity():
    data = blobs()
    mlp = Mlp.init(MlpConfig(2, (8,), 2, dropout_rate=0.2), 0)
    a, _ = train_mlp(mlp, data, epochs=3, batch_size=50, seed=4)
    b, _ = train_mlp(mlp, data, epochs=3, batch_size=50, seed=4)
    for p, q in zip(a.params(), b.params()):
        assert np.array_equal(p, q)
    c, hist = train_mlp(mlp, data, epochs=0, seed=4)
    assert hist == []
    for p, q in zip(c.params(), mlp.params()):
        assert np.array_equal(p, q)


def test_train_rejects_empty():
    empty = LabeledDataset(x=np.zeros((0, 2)), y=np.zeros(0), b=np.zeros(0), class_count=2)
    with pytest.raises(ValueError):
        train_mlp(Mlp.init(MlpConfig(2, (4,), 2), 0), empty, epochs=1)


def test_json_round_trip_is_exact():
    mlp = Mlp.init(MlpConfig(3, (5, 4), 2, dropout_rate=0.1, l2_penalty=0.01), 7)
    text = mlp.to_json()
    back = Mlp.from_json(text)
    assert back.config == mlp.config
    for p, q in zip(back.params(), mlp.params()):
        assert np.array_equal(p, q)
    assert back.to_json() == text


def test_json_load_validates_shapes():
    d = Mlp.init(MlpConfig(3, (5,), 2), 0).to_dict()
    d["layers"][1]["weights"] = d["layers"][1]["weights"][:-1]
    with pytest.raises(ShapeError):
        Mlp.from_dict(json.loads(json.dumps(d)))
