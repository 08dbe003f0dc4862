import numpy as np
import pytest
from scipy.optimize import linprog

from fairguard.bounds import compute_bounds, input_constraints, interval_bounds, query_box, tighten_bounds
from fairguard.network import NetworkSpec

from helpers import random_net, random_point, random_schema


def test_interval_example():
    net = NetworkSpec([np.array([[1.0, -1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
    b = interval_bounds(net, np.zeros(2), np.ones(2))
    assert b.lower[0][0] == -1.0
    assert b.upper[0][0] == 1.0


def test_nonnegative_weights_attain_bounds_at_corners():
    rng = np.random.default_rng(0)
    net = NetworkSpec.random([3, 5, 4, 1], rng)
    for w in net.weights:
        w[:] = np.abs(w)
    lo, hi = -np.ones(3), 2 * np.ones(3)
    b = compute_bounds(net, lo, hi)
    for layer, (l, u) in enumerate(zip(b.lower, b.upper)):
        np.testing.assert_allclose(l, net.forward(lo).pre[layer], atol=1e-9)
        np.testing.assert_allclose(u, net.forward(hi).pre[layer], atol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_monte_carlo_soundness(seed):
    rng = np.random.default_rng(seed)
    net = NetworkSpec.random([2, 8, 8, 1], rng)
    lo, hi = np.array([-1.0, 0.0]), np.array([1.0, 2.0])
    b = compute_bounds(net, lo, hi)
    X = rng.uniform(lo, hi, size=(100_000, 2))
    X[:4] = [[lo[0], lo[1]], [lo[0], hi[1]], [hi[0], lo[1]], [hi[0], hi[1]]]
    pre = net.forward(X).pre
    for z, l, u in zip(pre, b.lower, b.upper):
        assert (z >= l - 1e-9).all() and (z <= u + 1e-9).all()


def test_soundness_with_onehot_rows():
    rng = np.random.default_rng(4)
    for _ in range(30):
        schema = random_schema(rng)
        net = random_net(rng, schema.input_dim)
        x = random_point(schema, rng)
        lo, hi = query_box(schema, x)
        b = compute_bounds(net, lo, hi, input_constraints(schema))
        pts = [random_point(schema, rng) for _ in range(200)]
        k = schema.nonsensitive_dim
        X = np.array([np.concatenate([x[:k], p[k:]]) for p in pts])
        for z, l, u in zip(net.forward(X).pre, b.lower, b.upper):
            assert (z >= l - 1e-9).all() and (z <= u + 1e-9).all()


def test_stable_neurons_unchanged():
    net = NetworkSpec([np.array([[1.0, 1.0], [1.0, -1.0]]), np.array([[1.0, 1.0]])],
                      [np.array([5.0, 0.0]), np.zeros(1)])
    loose = interval_bounds(net, -np.ones(2), np.ones(2))
    tight = tighten_bounds(net, loose)
    assert loose.lower[0][0] >= 0
    assert tight.lower[0][0] == loose.lower[0][0]
    assert tight.upper[0][0] == loose.upper[0][0]


def triangle_lp(net, lo, hi, first_lower, first_upper, objective):
    """Min and max of ``objective . h1 + const`` over the triangle relaxation of layer one."""
    w, b = net.weights[0], net.biases[0]
    d, m = w.shape[1], w.shape[0]
    A_ub, b_ub, A_eq, b_eq = [], [], [], []
    bounds = list(zip(lo, hi))
    for q in range(m):
        l, u = first_lower[q], first_upper[q]
        bounds.append((0.0, max(u, 0.0)))
        row = np.zeros(d + m)
        row[d + q] = 1.0
        if u <= 0:
            A_eq.append(row)
            b_eq.append(0.0)
            continue
        row_z = row.copy()
        row_z[:d] = -w[q]
        if l >= 0:
            A_eq.append(row_z)
            b_eq.append(b[q])
            continue
        A_ub.append(-row_z)  # h >= w x + b
        b_ub.append(-b[q])
        s = u / (u - l)
        up = row.copy()
        up[:d] = -s * w[q]
        A_ub.append(up)  # h <= s (w x + b - l)
        b_ub.append(s * (b[q] - l))
    c = np.concatenate([np.zeros(d), objective])
    kw = dict(A_ub=np.array(A_ub) if A_ub else None, b_ub=b_ub or None,
              A_eq=np.array(A_eq) if A_eq else None, b_eq=b_eq or None, bounds=bounds, method="highs")
    return linprog(c, **kw).fun, -linprog(-c, **kw).fun


def test_second_layer_matches_lp_relaxation():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(30):
        net = NetworkSpec.random([2, 6, 5, 1], rng)
        for bias in net.biases:
            bias[:] = rng.normal(0, 0.3, size=bias.shape)
        lo, hi = -np.ones(2), np.ones(2)
        loose = interval_bounds(net, lo, hi)
        tight = tighten_bounds(net, loose)
        # the first layer is exact over a box
        np.testing.assert_allclose(tight.lower[0], loose.lower[0])
        for j in range(5):
            if tight.lower[1][j] >= 0 or tight.upper[1][j] <= 0:
                continue
            lmin, lmax = triangle_lp(net, lo, hi, tight.lower[0], tight.upper[0], net.weights[1][j])
            lmin, lmax = lmin + net.biases[1][j], lmax + net.biases[1][j]
            # the solver optimum is widened by a relative safety margin of 1e-7
            assert lmin - 1e-7 * (1 + abs(lmin)) - 1e-9 <= tight.lower[1][j] <= lmin + 1e-9
            assert lmax - 1e-9 <= tight.upper[1][j] <= lmax + 1e-7 * (1 + abs(lmax)) + 1e-9
            checked += 1
    assert checked > 20


def test_closed_form_first_layer_matches_lp():
    rng = np.random.default_rng(12)
    for _ in range(30):
        schema = random_schema(rng)
        net = NetworkSpec.random([schema.input_dim, 7, 1], rng)
        A, s, rhs = input_constraints(schema)
        lo, hi = query_box(schema, random_point(schema, rng))
        b = compute_bounds(net, lo, hi, (A, s, rhs))
        for q in range(7):
            w = net.weights[0][q]
            kw = dict(A_eq=A, b_eq=rhs, bounds=list(zip(lo, hi)), method="highs")
            lmin = linprog(w, **kw).fun + net.biases[0][q]
            lmax = -linprog(-w, **kw).fun + net.biases[0][q]
            assert b.lower[0][q] <= lmin + 1e-9 and b.lower[0][q] == pytest.approx(lmin, abs=1e-6)
            assert b.upper[0][q] >= lmax - 1e-9 and b.upper[0][q] == pytest.approx(lmax, abs=1e-6)


def test_tightening_never_loosens():
    rng = np.random.default_rng(13)
    for _ in range(100):
        net = random_net(rng, 3)
        lo, hi = -rng.uniform(0, 2, 3), rng.uniform(0, 2, 3)
        loose = interval_bounds(net, lo, hi)
        tight = tighten_bounds(net, loose)
        for a, b in zip(tight.upper, loose.upper):
            assert (a <= b).all()
        for a, b in zip(tight.lower, loose.lower):
            assert (a >= b).all()
