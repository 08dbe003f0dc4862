"""Mixed-integer encoding of ReLU classifiers and a branch-and-bound solver.

Each hidden neuron ``j`` of layer ``i`` gets variables ``z_i_j`` (pre-activation),
``zhat_i_j`` (post-activation) and ``delta_i_j`` (activation indicator). With
pre-activation bounds ``l <= z <= u`` an unstable neuron is encoded exactly by

    zhat >= 0,  zhat <= u * delta,  zhat >= z,  zhat <= z - l * (1 - delta)

and stable neurons are encoded linearly with ``delta`` fixed.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bounds import BIG_M_SLACK, BoundsCache
from .lp import EQ, GE, LE, LpError, LpProblem, Simplex
from .network import NetworkSpec
from .schema import CATEGORICAL, PREDICTION, TRAINING, FeatureSchema

EPS_STRICT = 1e-6
INT_TOL = 1e-6
OPT_GAP = 1e-6
ONEHOT_GRID_LIMIT = 64

INFEASIBLE = "infeasible"
FEASIBLE = "feasible"
OPTIMAL = "optimal"
POOL = "pool"
TIMEOUT = "timeout"


class MilpError(RuntimeError):
    pass


@dataclass
class MilpModel:
    """Variables, linear rows and objective, plus the network bookkeeping.

    Rows are stored sparsely as ``(indices, coefficients, sense, rhs, name)``.
    """

    names: list[str] = field(default_factory=list)
    lo: list[float] = field(default_factory=list)
    hi: list[float] = field(default_factory=list)
    integer: list[bool] = field(default_factory=list)
    rows: list[tuple] = field(default_factory=list)
    objective: dict[int, float] = field(default_factory=dict)
    maximize: bool = False

    input_vars: np.ndarray | None = None
    z_vars: list[np.ndarray] = field(default_factory=list)
    zhat_vars: list[np.ndarray] = field(default_factory=list)
    delta_vars: list[np.ndarray] = field(default_factory=list)
    output_var: int = -1
    # binary variables over which no-good cuts are expressed, one group per sensitive feature
    cut_groups: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)
    general_int_sensitive: list[int] = field(default_factory=list)
    continuous_sensitive: list[int] = field(default_factory=list)
    schema: FeatureSchema | None = None
    net: NetworkSpec | None = None
    mode: str = PREDICTION
    n_cuts: int = 0

    def add_var(self, name: str, lo: float, hi: float, integer: bool = False) -> int:
        self.names.append(name)
        self.lo.append(float(lo))
        self.hi.append(float(hi))
        self.integer.append(integer)
        return len(self.names) - 1

    def add_row(self, idx, coef, sense: int, rhs: float, name: str = "") -> None:
        self.rows.append((np.asarray(idx, dtype=int), np.asarray(coef, dtype=float),
                          int(sense), float(rhs), name))

    def fix(self, var: int, value: float) -> None:
        self.lo[var] = self.hi[var] = float(value)

    @property
    def n_vars(self) -> int:
        return len(self.names)

    def copy(self) -> MilpModel:
        out = MilpModel(list(self.names), list(self.lo), list(self.hi), list(self.integer),
                        list(self.rows), dict(self.objective), self.maximize)
        for name in ("input_vars", "z_vars", "zhat_vars", "delta_vars", "output_var",
                     "cut_groups", "general_int_sensitive", "continuous_sensitive",
                     "schema", "net", "mode", "n_cuts"):
            setattr(out, name, getattr(self, name))
        return out

    def set_objective(self, coeffs: dict[int, float], maximize: bool = False) -> None:
        self.objective = dict(coeffs)
        self.maximize = maximize

    def to_lp(self) -> LpProblem:
        n = self.n_vars
        A = np.zeros((len(self.rows), n))
        senses = np.empty(len(self.rows), dtype=int)
        b = np.empty(len(self.rows))
        for r, (idx, coef, sense, rhs, _) in enumerate(self.rows):
            np.add.at(A[r], idx, coef)
            senses[r] = sense
            b[r] = rhs
        c = np.zeros(n)
        for j, v in self.objective.items():
            c[j] = v
        return LpProblem(c, A, senses, b, np.array(self.lo), np.array(self.hi), self.maximize)

    def dump_lp(self) -> str:
        """Human-readable LP-format text, one constraint per line."""
        def term(c, name):
            return f"{'-' if c < 0 else '+'} {abs(c):.17g} {name}"

        lines = ["Maximize" if self.maximize else "Minimize"]
        obj = " ".join(term(v, self.names[j]) for j, v in sorted(self.objective.items()))
        lines.append(f"  obj: {obj or '0'}")
        lines.append("Subject To")
        ops = {LE: "<=", EQ: "=", GE: ">="}
        for r, (idx, coef, sense, rhs, name) in enumerate(self.rows):
            body = " ".join(term(c, self.names[j]) for j, c in zip(idx, coef))
            lines.append(f"  {name or f'r{r}'}: {body} {ops[sense]} {rhs:.17g}")
        lines.append("Bounds")
        for name, lo, hi in zip(self.names, self.lo, self.hi):
            if lo == hi:
                lines.append(f"  {name} = {lo:.17g}")
            else:
                lines.append(f"  {lo:.17g} <= {name} <= {hi:.17g}")
        ints = [n for n, flag in zip(self.names, self.integer) if flag]
        if ints:
            lines.append("General")
            lines.append("  " + " ".join(ints))
        lines.append("End")
        return "\n".join(lines) + "\n"


def encode_network(net: NetworkSpec, bounds: BoundsCache, schema: FeatureSchema,
                   mode: str = PREDICTION, onehot_grid_limit: int = ONEHOT_GRID_LIMIT) -> MilpModel:
    """Exact MILP of ``net`` over the input box of ``bounds`` and the schema domain.

    Categorical columns are binary with a one-hot row. In prediction mode
    numeric sensitive features are restricted to their integer grid (one-hot
    grid indicators up to ``onehot_grid_limit`` points, else a general
    integer); in training mode they stay continuous.
    """
    if net.input_dim != schema.input_dim:
        raise MilpError(f"network expects {net.input_dim} inputs, schema encodes {schema.input_dim}")
    for l, u in zip(bounds.lower, bounds.upper):
        if not (np.isfinite(l).all() and np.isfinite(u).all()):
            raise MilpError("unbounded neuron: non-finite pre-activation bound")
    m = MilpModel(schema=schema, net=net, mode=mode)
    d = schema.input_dim
    in_lo, in_hi = bounds.input_lower, bounds.input_upper
    inputs = np.array([m.add_var(f"z_0_{j}", in_lo[j], in_hi[j]) for j in range(d)])
    m.input_vars = inputs

    for f in schema.layout:
        sl = schema.slices[f.name]
        cols = inputs[sl]
        if f.kind == CATEGORICAL:
            for v in cols:
                m.integer[v] = True
            m.add_row(cols, np.ones(len(cols)), EQ, 1.0, f"onehot_{f.name}")
            if f.sensitive:
                m.cut_groups.append((f.name, cols, np.eye(len(cols))))
            continue
        if not f.sensitive:
            continue
        col = int(cols[0])
        if mode == TRAINING:
            m.continuous_sensitive.append(col)
            continue
        grid = f.grid()
        scaled = np.array([f.scale(g) for g in grid])
        if len(grid) <= onehot_grid_limit:
            ind = np.array([m.add_var(f"g_{f.name}_{g}", 0.0, 1.0, True) for g in grid])
            lo_col, hi_col = m.lo[col], m.hi[col]
            for v, s in zip(ind, scaled):
                if s < lo_col - 1e-12 or s > hi_col + 1e-12:
                    m.hi[v] = 0.0
            m.add_row(ind, np.ones(len(ind)), EQ, 1.0, f"grid_{f.name}")
            m.add_row(np.concatenate([[col], ind]), np.concatenate([[1.0], -scaled]), EQ, 0.0,
                      f"gridval_{f.name}")
            m.cut_groups.append((f.name, ind, scaled[:, None]))
        else:
            k = m.add_var(f"k_{f.name}", 0.0, float(len(grid) - 1), True)
            # col = (grid[0] - lo + k) / span
            m.add_row([col, k], [1.0, -1.0 / f.span], EQ, (grid[0] - f.lo) / f.span,
                      f"gridval_{f.name}")
            m.general_int_sensitive.append(k)

    lowers = [l - BIG_M_SLACK for l in bounds.lower]
    uppers = [u + BIG_M_SLACK for u in bounds.upper]
    prev = inputs
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        layer = i + 1
        l, u = lowers[i], uppers[i]
        z = np.array([m.add_var(f"z_{layer}_{j}", l[j], u[j]) for j in range(len(b))])
        for j in range(len(b)):
            nz = np.flatnonzero(w[j])
            m.add_row(np.concatenate([[z[j]], prev[nz]]), np.concatenate([[1.0], -w[j, nz]]),
                      EQ, b[j], f"lin_{layer}_{j}")
        m.z_vars.append(z)
        if i == last:
            m.output_var = int(z[0])
            break
        raw_l, raw_u = bounds.lower[i], bounds.upper[i]
        zhat = np.empty(len(b), dtype=int)
        delta = np.empty(len(b), dtype=int)
        for j in range(len(b)):
            if raw_u[j] <= 0.0:
                zhat[j] = m.add_var(f"zhat_{layer}_{j}", 0.0, 0.0)
                delta[j] = m.add_var(f"delta_{layer}_{j}", 0.0, 0.0, True)
            elif raw_l[j] >= 0.0:
                zhat[j] = m.add_var(f"zhat_{layer}_{j}", 0.0, max(u[j], 0.0))
                delta[j] = m.add_var(f"delta_{layer}_{j}", 1.0, 1.0, True)
                m.add_row([zhat[j], z[j]], [1.0, -1.0], EQ, 0.0, f"relu_active_{layer}_{j}")
            else:
                zhat[j] = m.add_var(f"zhat_{layer}_{j}", 0.0, u[j])
                delta[j] = m.add_var(f"delta_{layer}_{j}", 0.0, 1.0, True)
                m.add_row([zhat[j], delta[j]], [1.0, -u[j]], LE, 0.0, f"relu_ub_{layer}_{j}")
                m.add_row([zhat[j], z[j]], [1.0, -1.0], GE, 0.0, f"relu_ge_{layer}_{j}")
                m.add_row([zhat[j], z[j], delta[j]], [1.0, -1.0, -l[j]], LE, -l[j],
                          f"relu_le_{layer}_{j}")
        m.zhat_vars.append(zhat)
        m.delta_vars.append(delta)
        prev = zhat
    return m


def add_fairness_ce_constraints(m: MilpModel, x, label: int, eps: float = EPS_STRICT) -> MilpModel:
    """Fix the nonsensitive prefix to ``x`` and demand the opposite decision.

    Label 1 requires ``z_n <= logit(threshold) - eps``; label 0 requires
    ``z_n >= logit(threshold)``, matching the ``>=`` of the decision rule.
    """
    m = m.copy()
    m.lo, m.hi = list(m.lo), list(m.hi)
    x = np.asarray(x, dtype=float)
    k = m.schema.nonsensitive_dim
    for i in range(k):
        m.fix(int(m.input_vars[i]), x[i])
    t = m.net.logit_threshold
    out = m.output_var
    if label == 1:
        m.hi[out] = min(m.hi[out], t - eps)
    else:
        m.lo[out] = max(m.lo[out], t)
    return m


def sensitive_signature(m: MilpModel, point) -> list[np.ndarray]:
    """Binary values of every cut group for a full solution vector or an encoded input."""
    point = np.asarray(point, dtype=float)
    if m.general_int_sensitive:
        raise MilpError("no-good cuts need binary expansions; raise the one-hot grid limit")
    if m.continuous_sensitive:
        raise MilpError("no-good cuts need a discrete sensitive space (prediction mode)")
    full = len(point) == m.n_vars
    input_pos = {int(v): j for j, v in enumerate(m.input_vars)}
    sig = []
    for name, vars_, values in m.cut_groups:
        if full:
            bits = point[vars_]
        elif vars_[0] in input_pos:
            bits = np.array([point[input_pos[int(v)]] for v in vars_])
        else:
            col = point[m.schema.slices[name]][0]
            near = int(np.argmin(np.abs(values[:, 0] - col)))
            if abs(values[near, 0] - col) > INT_TOL:
                raise MilpError(f"value of {name!r} is not on its grid")
            bits = np.zeros(len(vars_))
            bits[near] = 1.0
        if np.any(np.minimum(np.abs(bits), np.abs(1 - bits)) > INT_TOL):
            raise MilpError(f"fractional binary entries for {name!r}: {bits}")
        sig.append(np.round(bits))
    return sig


def add_no_good_cut(m: MilpModel, point) -> MilpModel:
    """Exclude the sensitive assignment of ``point``: differ in at least one binary.

    ``point`` is either a full solution vector of ``m`` or an encoded input.
    """
    sig = sensitive_signature(m, point)
    idx, coef = [], []
    ones = 0
    for (_, vars_, _), bits in zip(m.cut_groups, sig):
        for v, bit in zip(vars_, bits):
            idx.append(int(v))
            if bit:
                coef.append(-1.0)
                ones += 1
            else:
                coef.append(1.0)
    m = m.copy()
    m.add_row(idx, coef, GE, 1.0 - ones, f"nogood_{m.n_cuts}")
    m.n_cuts += 1
    return m


@dataclass
class SolutionPool:
    points: list[np.ndarray] = field(default_factory=list)
    logits: list[float] = field(default_factory=list)
    cap: int = 0
    exhausted: bool = False

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class BnbResult:
    status: str
    x: np.ndarray | None = None
    objective: float = float("nan")
    pool: SolutionPool | None = None
    nodes: int = 0
    lp_iterations: int = 0

    @property
    def point(self) -> np.ndarray | None:
        return None if self.x is None else self.x[self._inputs]

    _inputs: np.ndarray | None = field(default=None, repr=False)


@dataclass(order=True)
class _Node:
    key: float
    seq: int
    sx: Simplex = field(compare=False)
    x: np.ndarray = field(compare=False)
    lo: np.ndarray = field(compare=False)
    hi: np.ndarray = field(compare=False)


def _most_fractional(x, groups):
    """Most fractional variable of the first group that has one; ties to the lowest index."""
    for idx in groups:
        if not len(idx):
            continue
        v = x[idx]
        frac = np.abs(v - np.round(v))
        j = int(np.argmax(frac))  # argmax returns the lowest index among ties
        if frac[j] > INT_TOL:
            return int(idx[j])
    return -1


def _branch_groups(m: MilpModel, int_idx: np.ndarray) -> list[np.ndarray]:
    """Integer variables split into input-side variables first, then ReLU indicators.

    Fixing discrete inputs shrinks the input box, which node propagation
    turns into stable neurons; indicators only matter inside the remaining box.
    """
    deltas = set()
    for dv in m.delta_vars:
        deltas.update(int(v) for v in dv)
    is_delta = np.array([int(v) in deltas for v in int_idx], dtype=bool)
    return [int_idx[~is_delta], int_idx[is_delta]]


def complete_solution(m: MilpModel, point) -> np.ndarray:
    """Full variable vector of ``m`` induced by the encoded input ``point``.

    Network variables come from a forward pass; grid indicators and grid
    integers from the nearest grid value. The result satisfies every row of
    the plain encoding whenever ``point`` lies in the input box.
    """
    point = np.asarray(point, dtype=float)
    x = np.zeros(m.n_vars)
    x[m.input_vars] = point
    trace = m.net.forward(point)
    for i, zv in enumerate(m.z_vars):
        x[zv] = trace.pre[i]
    for i, (hv, dv) in enumerate(zip(m.zhat_vars, m.delta_vars)):
        x[hv] = trace.post[i]
        x[dv] = trace.pre[i] > 0.0
    schema = m.schema
    input_pos = {int(v) for v in m.input_vars}
    for name, vars_, values in m.cut_groups:
        if int(vars_[0]) in input_pos:
            continue
        col = point[schema.slices[name]][0]
        x[vars_[int(np.argmin(np.abs(values[:, 0] - col)))]] = 1.0
    for k in m.general_int_sensitive:
        name = m.names[k][2:]
        f = schema.feature(name)
        x[k] = round(f.unscale(point[schema.slices[name]][0]) - f.grid()[0])
    return x


def _rounding_heuristic(m: MilpModel):
    """Round the discrete inputs of an LP point, then complete it by a forward pass."""
    schema = m.schema
    groups = []
    for f in schema.layout:
        sl = schema.slices[f.name]
        if f.kind == CATEGORICAL:
            groups.append(("onehot", sl, None))
        elif f.sensitive and m.mode == PREDICTION:
            grid = np.array([f.scale(g) for g in f.grid()])
            groups.append(("grid", sl, grid))
    in_lo = np.array(m.lo)[m.input_vars]
    in_hi = np.array(m.hi)[m.input_vars]

    def run(lp_x):
        pt = np.clip(lp_x[m.input_vars], in_lo, in_hi)
        for kind, sl, grid in groups:
            if kind == "onehot":
                block = np.zeros(sl.stop - sl.start)
                block[int(np.argmax(pt[sl]))] = 1.0
                pt[sl] = block
            else:
                ok = grid[(grid >= in_lo[sl][0] - 1e-12) & (grid <= in_hi[sl][0] + 1e-12)]
                if not len(ok):
                    return None
                pt[sl] = ok[int(np.argmin(np.abs(ok - pt[sl][0])))]
        return complete_solution(m, pt)

    return run


def _propagator(m: MilpModel):
    """Interval propagation of a node's variable bounds through the network.

    Returns a function mapping node bounds ``(lo, hi)`` to tightened copies,
    or None when the node is infeasible. Neurons that become stable get their
    indicator fixed.
    """
    net = m.net
    inputs = m.input_vars
    schema = m.schema
    input_set = {int(v) for v in inputs}
    grid_groups = []
    for name, vars_, values in m.cut_groups:
        if int(vars_[0]) not in input_set:
            grid_groups.append((schema.slices[name].start, vars_, values[:, 0]))
    onehots = [m.input_vars[schema.slices[f.name]] for f in schema.layout if f.kind == CATEGORICAL]
    general = []
    for k in m.general_int_sensitive:
        name = m.names[k][2:]
        f = schema.feature(name)
        general.append((schema.slices[name].start, k, f))

    def relax(v):
        return 1e-9 * (1.0 + np.abs(v))

    def run(lo, hi):
        lo, hi = lo.copy(), hi.copy()
        for vars_ in onehots:
            open_ = vars_[hi[vars_] > 0.5]
            if not len(open_):
                return None
            if len(open_) == 1:
                lo[open_[0]] = 1.0
        a, c = lo[inputs], hi[inputs]
        for col, vars_, scaled in grid_groups:
            allowed = scaled[hi[vars_] > 0.5]
            if not len(allowed):
                return None
            a[col], c[col] = max(a[col], allowed.min()), min(c[col], allowed.max())
        for col, k, f in general:
            g0 = f.grid()[0]
            a[col] = max(a[col], f.scale(g0 + lo[k]))
            c[col] = min(c[col], f.scale(g0 + hi[k]))
        if np.any(a > c + 1e-9):
            return None
        c = np.maximum(a, c)
        lo[inputs], hi[inputs] = a, c
        last = net.n_layers - 1
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            zv = m.z_vars[i]
            wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
            l_raw = wp @ a + wn @ c + b
            u_raw = wp @ c + wn @ a + b
            l = np.maximum(lo[zv], l_raw - relax(l_raw))
            u = np.minimum(hi[zv], u_raw + relax(u_raw))
            if i < last:
                dv, hv = m.delta_vars[i], m.zhat_vars[i]
                off = (hi[dv] < 0.5) | (u_raw <= 0.0)
                on = (lo[dv] > 0.5) | (l_raw >= 0.0)
                if np.any(off & on & (l > 1e-7)):
                    return None
                u = np.where(off & ~on, np.minimum(u, 0.0), u)
                l = np.where(on & ~off, np.maximum(l, 0.0), l)
            if np.any(l > u + 1e-7):
                return None
            lo[zv], hi[zv] = l, np.maximum(u, l)
            if i == last:
                break
            hi[dv] = np.where(off, 0.0, hi[dv])
            lo[dv] = np.where(on & ~off, 1.0, lo[dv])
            a = np.maximum(l, 0.0)
            c = np.where(off, 0.0, np.maximum(u, 0.0))
            a = np.where(off, 0.0, a)
            lo[hv] = np.maximum(lo[hv], np.minimum(a, hi[hv]))
            hi[hv] = np.minimum(hi[hv], c)
            hi[hv] = np.maximum(hi[hv], lo[hv])
            a, c = lo[hv], hi[hv]
        return lo, hi

    return run


def _onehot_groups(m: MilpModel) -> dict[int, np.ndarray]:
    """Map each binary of a sum-to-one input group to the whole group."""
    out = {}
    if m.schema is None:
        return out
    for name, vars_, _ in m.cut_groups:
        for v in vars_:
            out[int(v)] = vars_
    for f in m.schema.layout:
        if f.kind == CATEGORICAL and not f.sensitive:
            vars_ = m.input_vars[m.schema.slices[f.name]]
            for v in vars_:
                out[int(v)] = vars_
    return out


def _split_group(allowed, weights):
    cut = len(allowed) // 2
    if weights is not None and weights.sum() > 0:
        mass = np.cumsum(weights)
        cut = int(np.searchsorted(mass, 0.5 * mass[-1]))
    cut = min(max(cut, 1), len(allowed) - 1)
    left, right = allowed[:cut], allowed[cut:]
    return ([(int(v), 0.0, 0.0) for v in right], [(int(v), 0.0, 0.0) for v in left])


def _children(node, groups, onehot_of, int_inputs):
    """Bound changes of the children of ``node``.

    Priority: a fractional input-side binary, then an input group whose
    bounds still allow several values (even if the LP point is integral
    there), then the most fractional ReLU indicator. A member of a one-hot
    group splits the group's still-allowed members in two at half of their
    LP mass and forbids one half in each child, which halves the reachable
    input values instead of peeling off one value per level. Plain variables
    split at their fractional value, floor side first.
    """
    j = _most_fractional(node.x, groups[:1])
    if j < 0:
        widest, size = None, 1
        seen = set()
        for v in int_inputs:
            group = onehot_of.get(v)
            if group is None:
                width = node.hi[v] - node.lo[v] + 1
                key = v
            else:
                key = int(group[0])
                if key in seen:
                    continue
                seen.add(key)
                width = int(np.sum(node.hi[group] > 0.5))
            if width > size:
                widest, size = (v, group), width
        if widest is not None:
            v, group = widest
            if group is not None:
                allowed = group[node.hi[group] > 0.5]
                return _split_group(allowed, None)
            mid = math.floor((node.lo[v] + node.hi[v]) / 2)
            return ([(v, node.lo[v], mid)], [(v, mid + 1, node.hi[v])])
        j = _most_fractional(node.x, groups[1:])
    group = onehot_of.get(j)
    if group is not None:
        allowed = group[node.hi[group] > 0.5]
        if len(allowed) > 2:
            return _split_group(allowed, node.x[allowed])
    v = node.x[j]
    return ([(j, node.lo[j], math.floor(v))], [(j, math.ceil(v), node.hi[j])])


def _search(m: MilpModel, first_only: bool, deadline: float | None, node_limit: int | None):
    """Best-bound branch and bound. Returns (status, x, objective, nodes, lp_iters)."""
    lp = m.to_lp()
    if np.any(lp.lo > lp.hi):
        return INFEASIBLE, None, math.nan, 0, 0
    sense = -1.0 if lp.maximize else 1.0
    int_idx = np.flatnonzero(np.array(m.integer) & (lp.lo < lp.hi))
    groups = _branch_groups(m, int_idx)
    onehot_of = _onehot_groups(m)
    int_inputs = [int(v) for v in groups[0]]
    root = Simplex.from_problem(lp)
    sol = root.solve()
    iters = sol.iterations
    if not sol.optimal:
        return INFEASIBLE, None, math.nan, 1, iters
    incumbent, best_x = math.inf, None
    heap: list[_Node] = []
    seq = 0
    nodes = 1
    heuristic = _rounding_heuristic(m) if m.net is not None else None
    propagate = _propagator(m) if m.net is not None else None
    root_lo, root_hi = lp.lo, lp.hi
    tol = 1e-9  # forward-pass completions satisfy rows to float precision

    def consider(sx, s, lo, hi):
        nonlocal incumbent, best_x, seq
        key = sense * s.objective
        j = _most_fractional(s.x, groups)
        if j < 0:
            if key < incumbent:
                incumbent, best_x = key, s.x
            return True
        found = False
        if heuristic is not None:
            cand = heuristic(s.x)
            if cand is not None and lp.violation(cand) <= tol:
                hkey = sense * float(lp.c @ cand)
                if hkey < incumbent:
                    incumbent, best_x = hkey, cand
                found = True
        if key < incumbent - OPT_GAP:
            heapq.heappush(heap, _Node(key, seq, sx, s.x, lo, hi))
            seq += 1
        return found

    if consider(root, sol, lp.lo.copy(), lp.hi.copy()) and first_only:
        return FEASIBLE, best_x, sense * incumbent, nodes, iters
    while heap:
        if deadline is not None and time.monotonic() > deadline:
            return TIMEOUT, best_x, sense * incumbent, nodes, iters
        if node_limit is not None and nodes >= node_limit:
            return TIMEOUT, best_x, sense * incumbent, nodes, iters
        node = heapq.heappop(heap)
        if node.key >= incumbent - OPT_GAP:
            continue
        for child in _children(node, groups, onehot_of, int_inputs):
            lo, hi = node.lo.copy(), node.hi.copy()
            for var, b_lo, b_hi in child:
                lo[var], hi[var] = b_lo, b_hi
            nodes += 1
            if propagate is not None:
                tightened = propagate(lo, hi)
                if tightened is None:
                    continue
                lo, hi = tightened
            changed = np.flatnonzero((lo != node.lo) | (hi != node.hi))
            sx = node.sx.copy()
            try:
                for var in changed:
                    if root_lo[var] < root_hi[var]:
                        sx.set_bounds(int(var), lo[var], hi[var])
                s = sx.reoptimize()
            except LpError:
                sx = Simplex.from_problem(LpProblem(lp.c, lp.A, lp.senses, lp.b, lo, hi, lp.maximize))
                s = sx.solve()
            iters += s.iterations
            if not s.optimal:
                continue
            found = consider(sx, s, lo, hi)
            if found and first_only:
                return FEASIBLE, best_x, sense * incumbent, nodes, iters
    if best_x is None:
        return INFEASIBLE, None, math.nan, nodes, iters
    return OPTIMAL, best_x, sense * incumbent, nodes, iters


def _clean(m: MilpModel, x: np.ndarray) -> np.ndarray:
    x = x.copy()
    ints = np.array(m.integer)
    x[ints] = np.round(x[ints])
    return x


def bnb_solve(m: MilpModel, mode: str = "feasibility", *, k: int | None = None,
              time_limit: float | None = None, node_limit: int | None = None) -> BnbResult:
    """Solve ``m`` in one of three modes.

    ``feasibility`` stops at the first integer-feasible node (best-bound order
    on the model objective), ``optimize`` proves optimality within an absolute
    gap of 1e-6, ``pool`` collects up to ``k`` solutions that are pairwise
    distinct on the sensitive binaries by adding no-good cuts. Time and node
    limits apply to the whole call; hitting one yields ``TIMEOUT`` with
    whatever was found so far.
    """
    deadline = None if time_limit is None else time.monotonic() + time_limit
    inputs = m.input_vars
    if mode in ("feasibility", "optimize"):
        status, x, obj, nodes, iters = _search(m, mode == "feasibility", deadline, node_limit)
        if x is not None:
            x = _clean(m, x)
        if status == OPTIMAL and mode == "feasibility":
            status = FEASIBLE
        return BnbResult(status, x, obj, nodes=nodes, lp_iterations=iters, _inputs=inputs)
    if mode != "pool":
        raise ValueError(f"unknown mode {mode!r}")
    if k is None or k < 1:
        raise ValueError("pool mode needs k >= 1")
    pool = SolutionPool(cap=k)
    model = m
    total_nodes = total_iters = 0
    while len(pool) < k:
        remaining = None if node_limit is None else node_limit - total_nodes
        if remaining is not None and remaining <= 0:
            return BnbResult(TIMEOUT, pool=pool, nodes=total_nodes, lp_iterations=total_iters,
                             _inputs=inputs)
        status, x, obj, nodes, iters = _search(model, True, deadline, remaining)
        total_nodes += nodes
        total_iters += iters
        if status == TIMEOUT:
            return BnbResult(TIMEOUT, pool=pool, nodes=total_nodes, lp_iterations=total_iters,
                             _inputs=inputs)
        if status == INFEASIBLE:
            pool.exhausted = True
            break
        x = _clean(m, x)
        pool.points.append(x[inputs])
        pool.logits.append(float(x[m.output_var]))
        model = add_no_good_cut(model, x)
    return BnbResult(POOL, pool=pool, nodes=total_nodes, lp_iterations=total_iters, _inputs=inputs)
