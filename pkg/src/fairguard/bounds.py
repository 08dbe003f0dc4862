"""Sound pre-activation bounds for every neuron over an input box."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .lp import EQ, GE, LE, LpError, LpProblem, Simplex
from .network import NetworkSpec
from .schema import CATEGORICAL, PREDICTION, FeatureSchema

log = logging.getLogger(__name__)

BIG_M_SLACK = 1e-7
# LP optima are trusted up to this relative margin when tightening
_LP_MARGIN = 1e-7


@dataclass(frozen=True)
class BoundsCache:
    """Input box plus lower/upper pre-activation bounds for layers 1..n."""

    input_lower: np.ndarray
    input_upper: np.ndarray
    lower: tuple[np.ndarray, ...]
    upper: tuple[np.ndarray, ...]

    def stable_inactive(self, layer: int) -> np.ndarray:
        return self.upper[layer] <= 0.0

    def stable_active(self, layer: int) -> np.ndarray:
        return self.lower[layer] >= 0.0

    def unstable(self, layer: int) -> np.ndarray:
        return (self.lower[layer] < 0.0) & (self.upper[layer] > 0.0)

    def inflated(self, slack: float = BIG_M_SLACK) -> BoundsCache:
        return BoundsCache(self.input_lower, self.input_upper,
                           tuple(l - slack for l in self.lower),
                           tuple(u + slack for u in self.upper))

    def contains(self, trace_pre: list[np.ndarray], tol: float = 0.0) -> bool:
        return all(np.all(z >= l - tol) and np.all(z <= u + tol)
                   for z, l, u in zip(trace_pre, self.lower, self.upper))


def _affine_bounds(w, b, lo, hi):
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    return wp @ lo + wn @ hi + b, wp @ hi + wn @ lo + b


def interval_bounds(net: NetworkSpec, lo, hi) -> BoundsCache:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != (net.input_dim,) or hi.shape != (net.input_dim,):
        raise ValueError("input box does not match the network input dimension")
    if not (np.isfinite(lo).all() and np.isfinite(hi).all()) or (lo > hi).any():
        raise ValueError("input box must be finite with lo <= hi")
    lowers, uppers = [], []
    a, c = lo, hi
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        l, u = _affine_bounds(w, b, a, c)
        lowers.append(l)
        uppers.append(u)
        a, c = np.maximum(l, 0.0), np.maximum(u, 0.0)
    return BoundsCache(lo, hi, tuple(lowers), tuple(uppers))


def input_constraints(schema: FeatureSchema) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-hot ``sum == 1`` rows over the encoded input, as ``(A, senses, b)``."""
    rows = []
    for f in schema.layout:
        if f.kind == CATEGORICAL:
            r = np.zeros(schema.input_dim)
            r[schema.slices[f.name]] = 1.0
            rows.append(r)
    A = np.array(rows).reshape(len(rows), schema.input_dim)
    return A, np.full(len(rows), EQ), np.ones(len(rows))


def query_box(schema: FeatureSchema, x, mode: str = PREDICTION) -> tuple[np.ndarray, np.ndarray]:
    """Box whose nonsensitive prefix is the point ``x[:k]`` and sensitive part is free."""
    x = np.asarray(x, dtype=float)
    k = schema.nonsensitive_dim
    lo, hi = schema.lower(), schema.upper()
    lo[:k] = hi[:k] = x[:k]
    if mode == PREDICTION:
        for f in schema.sensitive_features:
            if f.kind != CATEGORICAL:
                grid = f.grid()
                sl = schema.slices[f.name]
                lo[sl], hi[sl] = f.scale(grid[0]), f.scale(grid[-1])
    return lo, hi


def _onehot_groups(A_in, s_in, b_in):
    """Column groups when every input row is a disjoint ``sum == 1`` over 0/1 coefficients."""
    if not len(A_in):
        return []
    if np.any(s_in != EQ) or np.any(b_in != 1.0) or np.any((A_in != 0.0) & (A_in != 1.0)):
        return None
    if np.any(A_in.sum(axis=0) > 1.0):
        return None
    return [np.flatnonzero(r) for r in A_in]


def _first_layer_exact(w, b, lo, hi, groups):
    """Exact min/max of ``w x + b`` over the box intersected with one-hot sum rows.

    The problem separates per group; inside a group it is a fractional
    knapsack, solved by filling the cheapest (or dearest) columns first.
    """
    in_group = np.zeros(len(lo), dtype=bool)
    for g in groups:
        in_group[g] = True
    free = ~in_group
    wf = w[:, free]
    low = np.maximum(wf, 0.0) @ lo[free] + np.minimum(wf, 0.0) @ hi[free] + b
    high = np.maximum(wf, 0.0) @ hi[free] + np.minimum(wf, 0.0) @ lo[free] + b
    for g in groups:
        wg = w[:, g]
        base = wg @ lo[g]
        mass = 1.0 - lo[g].sum()
        if mass < -1e-12 or hi[g].sum() < 1.0 - 1e-12:
            return None
        for sign, out in ((1.0, low), (-1.0, high)):
            order = np.argsort(sign * wg, axis=1, kind="stable")
            cap = (hi[g] - lo[g])[order]
            before = np.cumsum(cap, axis=1) - cap
            fill = np.clip(mass - before, 0.0, cap)
            out += base + np.sum(np.take_along_axis(wg, order, axis=1) * fill, axis=1)
    return low, high


def tighten_bounds(net: NetworkSpec, cache: BoundsCache, input_rows=None) -> BoundsCache:
    """One layer-by-layer pass of LP tightening over the triangle relaxation.

    For each unstable hidden neuron the pre-activation is minimised and
    maximised over the input box (plus optional linear ``input_rows``) and the
    triangle relaxation of every earlier ReLU. Results are intersected with
    the incoming bounds, so nothing is ever loosened. An LP failure keeps the
    incoming bound for that layer.
    """
    lowers = [l.copy() for l in cache.lower]
    uppers = [u.copy() for u in cache.upper]
    d = net.input_dim
    if input_rows is None:
        input_rows = (np.zeros((0, d)), np.zeros(0, dtype=int), np.zeros(0))
    A_in, s_in, b_in = input_rows
    groups = _onehot_groups(A_in, s_in, b_in)
    if groups and net.n_layers > 1:
        exact = _first_layer_exact(net.weights[0], net.biases[0], cache.input_lower,
                                   cache.input_upper, groups)
        if exact is not None:
            l, u = exact
            lowers[0] = np.maximum(lowers[0], l - _LP_MARGIN * (1.0 + np.abs(l)))
            uppers[0] = np.minimum(uppers[0], u + _LP_MARGIN * (1.0 + np.abs(u)))
            first_done = True
        else:
            first_done = False
    else:
        first_done = not len(A_in)

    for i in range(net.n_layers - 1):
        if i > 0:
            # refresh with the already tightened previous layer before paying for LPs
            a, c = np.maximum(lowers[i - 1], 0.0), np.maximum(uppers[i - 1], 0.0)
            l, u = _affine_bounds(net.weights[i], net.biases[i], a, c)
            lowers[i] = np.maximum(lowers[i], l)
            uppers[i] = np.minimum(uppers[i], u)
        unstable = np.flatnonzero((lowers[i] < 0.0) & (uppers[i] > 0.0))
        if not len(unstable) or (i == 0 and first_done):
            # with no input rows, or disjoint one-hot rows handled in closed form,
            # the first-layer relaxation optimum is already known exactly
            continue
        try:
            sx, obj_of = _relaxation(net, i, lowers, uppers, cache, A_in, s_in, b_in)
            first = True
            for j in unstable:
                c_vec, const = obj_of(j)
                for maximize in (False, True):
                    sx.set_objective(c_vec, maximize)
                    sol = sx.solve() if first else sx.resolve()
                    first = False
                    if not sol.optimal:
                        raise LpError("relaxation infeasible")
                    val = sol.objective + const
                    margin = _LP_MARGIN * (1.0 + abs(val))
                    if maximize:
                        uppers[i][j] = min(uppers[i][j], val + margin)
                    else:
                        lowers[i][j] = max(lowers[i][j], val - margin)
        except LpError as exc:
            log.warning("bound tightening failed on layer %d (%s); keeping interval bounds", i + 1, exc)
    # output layer: propagate intervals from the tightened last hidden layer
    if net.n_layers > 1:
        i = net.n_layers - 1
        a, c = np.maximum(lowers[i - 1], 0.0), np.maximum(uppers[i - 1], 0.0)
        l, u = _affine_bounds(net.weights[i], net.biases[i], a, c)
        lowers[i] = np.maximum(lowers[i], l)
        uppers[i] = np.minimum(uppers[i], u)
    return BoundsCache(cache.input_lower, cache.input_upper, tuple(lowers), tuple(uppers))


def _relaxation(net, layer, lowers, uppers, cache, A_in, s_in, b_in):
    """LP over inputs and post-activations of hidden layers before ``layer``."""
    d = net.input_dim
    sizes = [d] + [net.widths[j] for j in range(layer)]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1])
    lo = np.empty(n)
    hi = np.empty(n)
    lo[:d], hi[:d] = cache.input_lower, cache.input_upper
    rows, senses, rhs = [], [], []
    for r, s, b in zip(A_in, s_in, b_in):
        row = np.zeros(n)
        row[:d] = r
        rows.append(row)
        senses.append(s)
        rhs.append(b)
    for j in range(layer):
        prev = slice(offsets[j], offsets[j + 1])
        cur = slice(offsets[j + 1], offsets[j + 2])
        l, u = lowers[j], uppers[j]
        lo[cur], hi[cur] = np.maximum(l, 0.0), np.maximum(u, 0.0)
        w, b = net.weights[j], net.biases[j]
        for q in range(len(b)):
            if u[q] <= 0.0:
                continue
            row = np.zeros(n)
            row[offsets[j + 1] + q] = 1.0
            row[prev] -= w[q]
            if l[q] >= 0.0:
                rows.append(row)
                senses.append(EQ)
                rhs.append(b[q])
                continue
            rows.append(row)
            senses.append(GE)
            rhs.append(b[q])
            slope = u[q] / (u[q] - l[q])
            upper_row = np.zeros(n)
            upper_row[offsets[j + 1] + q] = 1.0
            upper_row[prev] -= slope * w[q]
            rows.append(upper_row)
            senses.append(LE)
            rhs.append(slope * (b[q] - l[q]))
    if not rows:
        # the simplex needs at least one row
        rows, senses, rhs = [np.zeros(n)], [LE], [1.0]
    A = np.array(rows).reshape(len(rows), n)
    prob = LpProblem(np.zeros(n), A, np.array(senses, dtype=int), np.array(rhs), lo, hi)
    sx = Simplex.from_problem(prob)
    last = slice(offsets[layer], offsets[layer + 1])

    def objective(j):
        c = np.zeros(n)
        c[last] = net.weights[layer][j]
        return c, float(net.biases[layer][j])

    return sx, objective


def compute_bounds(net: NetworkSpec, lo, hi, input_rows=None, tighten: bool = True) -> BoundsCache:
    cache = interval_bounds(net, lo, hi)
    return tighten_bounds(net, cache, input_rows) if tighten else cache
