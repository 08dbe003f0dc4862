import json
import math

import numpy as np
import pytest

from fairguard.network import ModelError, NetworkSpec, backward, bce, load_model, save_model, sigmoid


def tiny(threshold=0.5):
    return NetworkSpec([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)], threshold)


def test_relu_kills_negative_input():
    t = tiny().forward(np.array([-2.0]))
    assert t.pre[0][0] == -2.0
    assert t.post[0][0] == 0.0
    assert t.logit == 0.0
    assert t.probability == 0.5


def test_positive_input_probability():
    t = tiny().forward(np.array([3.0]))
    assert t.logit == 3.0
    assert t.probability == pytest.approx(0.952574, abs=1e-6)


def test_zero_weights_give_constant_output():
    net = NetworkSpec([np.zeros((4, 3)), np.zeros((1, 4))], [np.ones(4), np.array([-0.7])])
    X = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_allclose(net.logits(X), -0.7)
    np.testing.assert_allclose(net.predict_proba(X), sigmoid(-0.7))


def _const(bias, threshold):
    return NetworkSpec([np.zeros((1, 1))], [np.array([bias])], threshold)


@pytest.mark.parametrize("z,threshold,label", [(0.0, 0.5, 1), (-0.1, 0.5, 0), (1.0, 0.9, 0)])
def test_decision_threshold(z, threshold, label):
    assert _const(z, threshold).decide(np.zeros(1)) == label


def test_sigmoid_is_stable_for_large_inputs():
    with np.errstate(over="raise", invalid="raise"):
        v = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(v, [0.0, 0.5, 1.0])


def test_bce_values():
    assert bce(0.5, 1) == pytest.approx(math.log(2))
    assert bce(1e-15, 1) == pytest.approx(-math.log(1e-12))
    assert bce(1.0, 0) == pytest.approx(-math.log(1e-12), rel=1e-4)
    assert math.isfinite(bce(1.0, 0))


def _flat(params):
    return np.concatenate([p.ravel() for p in params])


def finite_difference(net, X, y, w, h=1e-5):
    params = net.parameters()
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = backward(net, X, y, w)[0]
            p[idx] = old - h
            down = backward(net, X, y, w)[0]
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    sizes = [4] + [int(rng.integers(2, 7)) for _ in range(rng.integers(1, 3))] + [1]
    net = NetworkSpec.random(sizes, rng)
    # nonzero biases keep every pre-activation off the ReLU kink, where differences are one-sided
    for b in net.biases:
        b[:] = rng.normal(0.0, 0.5, size=b.shape)
    X = rng.normal(size=(6, 4))
    y = rng.integers(0, 2, size=6)
    w = rng.uniform(0.1, 1.0, size=6)
    loss, grads = backward(net, X, y, w)
    assert loss == pytest.approx(float(np.sum(w * bce(net.predict_proba(X), y))))
    fd = finite_difference(net, X, y, w)
    a, b = _flat(grads), _flat(fd)
    assert np.linalg.norm(a - b) <= 1e-4 * max(np.linalg.norm(b), 1e-8)


def test_save_load_round_trip(tmp_path):
    net = NetworkSpec.random([5, 16, 16, 16, 1], 3, threshold=0.4)
    save_model(net, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    X = np.random.default_rng(1).normal(size=(100, 5))
    assert (back.logits(X) == net.logits(X)).all()
    assert back.threshold == 0.4


def test_wrong_width_rejected(tmp_path):
    obj = NetworkSpec.random([3, 4, 1], 0).to_json()
    obj["layers"][1]["w"] = [[0.0] * 5]
    (tmp_path / "m.json").write_text(json.dumps(obj))
    with pytest.raises(ModelError):
        load_model(tmp_path / "m.json")


def test_nan_weight_rejected():
    with pytest.raises(ModelError, match="non-finite"):
        NetworkSpec([np.array([[np.nan]])], [np.zeros(1)])


def test_random_is_seeded():
    a = NetworkSpec.random([3, 4, 1], 7)
    b = NetworkSpec.random([3, 4, 1], 7)
    assert all((p == q).all() for p, q in zip(a.parameters(), b.parameters()))
