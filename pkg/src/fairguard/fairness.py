"""Counterexample search, guaranteed-fair prediction by counting, and audits."""

from __future__ import annotations

import heapq
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundsCache, compute_bounds, input_constraints, query_box
from .milp import (EPS_STRICT, FEASIBLE, INFEASIBLE, OPTIMAL, POOL, add_fairness_ce_constraints,
                   bnb_solve, encode_network)
from .network import NetworkSpec, sigmoid
from .schema import CATEGORICAL, PREDICTION, TRAINING, Dataset, FeatureSchema, assignment_space

log = logging.getLogger(__name__)

CE = "ce"
FAIR = "fair"
UNKNOWN = "unknown"

DEFAULT_TIME_LIMIT = 60.0
ENUMERATION_CAP = 10**6
# undecided regions at most this large are evaluated in one vectorised batch
LEAF_SIZE = 1024


class UndecidedError(RuntimeError):
    """Fair prediction could not be resolved within its limits."""


@dataclass(frozen=True)
class Counterexample:
    point: np.ndarray
    logit: float
    probability: float
    violation: float
    assignment: dict


@dataclass(frozen=True)
class VerificationOutcome:
    status: str
    counterexample: Counterexample | None = None
    nodes: int = 0
    seconds: float = 0.0

    @property
    def has_ce(self) -> bool:
        return self.status == CE


def _sensitive_assignment(schema: FeatureSchema, point) -> dict:
    values = dict(zip([f.name for f in schema.features], schema.decode_point(point)))
    return {f.name: values[f.name] for f in schema.sensitive_features}


def snap_point(schema: FeatureSchema, point, mode: str = PREDICTION) -> np.ndarray:
    """Project a solver point onto valid encodings: one-hot argmax, grid rounding, box clip."""
    p = np.clip(np.asarray(point, dtype=float), 0.0, 1.0)
    for f in schema.layout:
        sl = schema.slices[f.name]
        if f.kind == CATEGORICAL:
            block = np.zeros(f.width)
            block[int(np.argmax(p[sl]))] = 1.0
            p[sl] = block
        elif f.sensitive and mode == PREDICTION:
            grid = np.array(f.grid(), dtype=float)
            raw = f.unscale(p[sl][0])
            p[sl] = f.scale(grid[int(np.argmin(np.abs(grid - raw)))])
    return p


def _query_bounds(net, schema, x, mode) -> BoundsCache:
    lo, hi = query_box(schema, x, mode)
    return compute_bounds(net, lo, hi, input_constraints(schema))


def _search_ce(net: NetworkSpec, schema: FeatureSchema, x, bounds: BoundsCache | None, mode: str,
               solve_mode: str, time_limit: float | None, node_limit: int | None) -> VerificationOutcome:
    start = time.monotonic()
    x = np.asarray(x, dtype=float)
    y0 = net.decide(x)
    p0 = float(net.predict_proba(x)[0])
    if bounds is None:
        bounds = _query_bounds(net, schema, x, mode)
    base = encode_network(net, bounds, schema, mode)
    nodes = 0
    for eps in (EPS_STRICT, 10 * EPS_STRICT):
        m = add_fairness_ce_constraints(base, x, y0, eps)
        # push the logit away from the original decision
        m.set_objective({m.output_var: 1.0}, maximize=(y0 == 0))
        remaining = None if time_limit is None else max(0.0, time_limit - (time.monotonic() - start))
        res = bnb_solve(m, solve_mode, time_limit=remaining, node_limit=node_limit)
        nodes += res.nodes
        if res.status == INFEASIBLE:
            return VerificationOutcome(FAIR, nodes=nodes, seconds=time.monotonic() - start)
        if res.status not in (FEASIBLE, OPTIMAL):
            return VerificationOutcome(UNKNOWN, nodes=nodes, seconds=time.monotonic() - start)
        cand = snap_point(schema, res.point, mode)
        cand[: schema.nonsensitive_dim] = x[: schema.nonsensitive_dim]
        if net.decide(cand) != y0:
            z = net.forward(cand).logit
            p = float(sigmoid(z))
            ce = Counterexample(cand, z, p, abs(p - p0), _sensitive_assignment(schema, cand))
            return VerificationOutcome(CE, ce, nodes, time.monotonic() - start)
        log.debug("solver counterexample failed the forward recheck (eps=%g)", eps)
    return VerificationOutcome(UNKNOWN, nodes=nodes, seconds=time.monotonic() - start)


def verify(net: NetworkSpec, schema: FeatureSchema, x, bounds: BoundsCache | None = None, *,
           time_limit: float | None = DEFAULT_TIME_LIMIT, node_limit: int | None = None,
           mode: str = PREDICTION) -> VerificationOutcome:
    """Search for any point sharing ``x``'s nonsensitive prefix with the opposite decision.

    ``bounds`` must be sound for the query box; by default they are computed
    for this query with the prefix pinned, which is far tighter than a global
    box. A solver counterexample is snapped to valid encodings and rechecked
    with a forward pass before it is reported.
    """
    return _search_ce(net, schema, x, bounds, mode, "feasibility", time_limit, node_limit)


def verify_max_violation(net: NetworkSpec, schema: FeatureSchema, x, bounds: BoundsCache | None = None,
                         *, time_limit: float | None = DEFAULT_TIME_LIMIT, node_limit: int | None = None,
                         mode: str = TRAINING) -> VerificationOutcome:
    """Counterexample with the largest probability gap to ``x``.

    Maximises the logit when ``x`` is rejected and minimises it when
    accepted; the sigmoid is increasing, so this maximises the gap.
    """
    return _search_ce(net, schema, x, bounds, mode, "optimize", time_limit, node_limit)


# ---------------------------------------------------------------------------
# fair prediction

def majority_thresholds(size: int) -> tuple[int, int]:
    """Label-1 count that settles label 1, and label-0 count that settles label 0.

    Ties go to label 1: label 1 wins with ceil(size/2) votes, label 0
    needs floor(size/2) + 1.
    """
    return (size + 1) // 2, size // 2 + 1


@dataclass
class CountResult:
    label: int
    ones: int
    zeros: int
    size: int
    nodes: int = 0


class _RegionCounter:
    """Exact majority vote of the decision over the sensitive assignments of one prefix.

    Sub-boxes of the assignment grid are bounded from exact first-layer
    per-value contributions (see ``_bounds``). Boxes with a
    settled sign are counted wholesale; small undecided ones are enumerated.
    """

    def __init__(self, net: NetworkSpec, schema: FeatureSchema, leaf_size: int = LEAF_SIZE):
        self.net = net
        self.schema = schema
        self.space = assignment_space(schema, PREDICTION)
        self.leaf_size = leaf_size
        w1 = net.weights[0]
        k = schema.nonsensitive_dim
        self.w_prefix = w1[:, :k]
        self.encodings = [d.encodings for d in self.space.domains]
        self.contrib = [enc @ w1[:, schema.slices[d.feature.name]].T
                        for enc, d in zip(self.encodings, self.space.domains)]
        self.sizes = [len(e) for e in self.encodings]
        self.threshold = net.logit_threshold

    def _first_layer_range(self, base, box, coef=None):
        """Exact min and max of ``coef @ first_layer(x)`` over the box (rows of coef are separate targets).

        Without ``coef`` the first-layer pre-activations themselves are bounded.
        """
        lo = base.copy() if coef is None else coef @ base
        hi = lo.copy()
        for c, (s, e) in zip(self.contrib, box):
            vals = c[s:e] if coef is None else c[s:e] @ coef.T
            lo += vals.min(axis=0)
            hi += vals.max(axis=0)
        return lo, hi

    def _bounds(self, base, box, refine=False):
        """Bounds on the output logit over the box.

        Hidden layers get interval bounds. With ``refine``, and when those
        leave the decision open, the output is also bounded by substituting
        linear ReLU relaxations back to the first layer, whose per-feature
        contributions are separable and so minimised exactly; the tighter of
        the two bounds is used.
        """
        net = self.net
        lo, hi = self._first_layer_range(base, box)
        los, his = [lo], [hi]
        for w, b in zip(net.weights[1:], net.biases[1:]):
            a, c = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
            wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
            lo, hi = wp @ a + wn @ c + b, wp @ c + wn @ a + b
            los.append(lo)
            his.append(hi)
        lo, hi = float(lo[0]), float(hi[0])
        if refine and len(net.weights) > 1 and lo < self.threshold <= hi:
            up = self._upper(base, box, len(net.weights) - 1, los, his)
            lo, hi = max(lo, -float(up[1])), min(hi, float(up[0]))
        return lo, hi

    def _upper(self, base, box, m, los, his):
        """Upper bounds of layer ``m`` pre-activations followed by upper bounds of their negations."""
        net = self.net
        lam = np.vstack([net.weights[m], -net.weights[m]])
        const = np.concatenate([net.biases[m], -net.biases[m]]).astype(float)
        for j in range(m - 1, -1, -1):
            l, u = los[j], his[j]
            unstable = (l < 0) & (u > 0)
            width = np.where(unstable, u - l, 1.0)
            up_slope = np.where(u <= 0, 0.0, np.where(unstable, u / width, 1.0))
            up_shift = np.where(unstable, -l * u / width, 0.0)
            low_slope = np.where(u <= 0, 0.0, np.where(unstable, (u > -l).astype(float), 1.0))
            # positive coefficients take the upper relaxation, negative ones the lower
            pos = lam > 0
            const += np.where(pos, lam, 0.0) @ up_shift
            lam = lam * np.where(pos, up_slope, low_slope)
            if j > 0:
                const += lam @ net.biases[j]
                lam = lam @ net.weights[j]
        return const + self._first_layer_range(base, box, lam)[1]

    def _enumerate(self, x, box) -> int:
        k = self.schema.nonsensitive_dim
        idx = np.indices([e - s for s, e in box]).reshape(len(box), -1)
        parts = [enc[s + i] for enc, (s, _), i in zip(self.encodings, box, idx)]
        pts = np.empty((idx.shape[1], self.schema.input_dim))
        pts[:, :k] = x[:k]
        pts[:, k:] = np.hstack(parts)
        return int(np.count_nonzero(self.net.logits(pts) >= self.threshold))

    def count(self, x, deadline: float | None = None) -> CountResult:
        x = np.asarray(x, dtype=float)
        total = math.prod(self.sizes)
        need_one, need_zero = majority_thresholds(total)
        base = self.w_prefix @ x[: self.schema.nonsensitive_dim] + self.net.biases[0]
        margin = 1e-9 * (1.0 + abs(self.threshold))
        ones = zeros = nodes = 0
        root = tuple((0, n) for n in self.sizes)
        heap = [(-total, 0, root)]
        seq = 1
        while heap:
            if ones >= need_one or zeros >= need_zero:
                break
            if deadline is not None and time.monotonic() > deadline:
                raise UndecidedError(f"fair prediction undecided: {ones} accept / {zeros} reject "
                                     f"of {total} assignments when the time limit expired")
            neg_size, _, box = heapq.heappop(heap)
            size = -neg_size
            nodes += 1
            # the tighter bound pays off at the root, where a nearly fair model is settled in one step;
            # deeper boxes straddle the decision boundary and rarely settle
            lo, hi = self._bounds(base, box, refine=nodes == 1)
            if lo >= self.threshold + margin:
                ones += size
                continue
            if hi < self.threshold - margin:
                zeros += size
                continue
            if size <= self.leaf_size:
                got = self._enumerate(x, box)
                ones += got
                zeros += size - got
                continue
            # split the widest feature range in half
            j = max(range(len(box)), key=lambda q: (box[q][1] - box[q][0], -q))
            s, e = box[j]
            mid = (s + e) // 2
            for part in ((s, mid), (mid, e)):
                child = box[:j] + (part,) + box[j + 1:]
                heapq.heappush(heap, (-(size // (e - s)) * (part[1] - part[0]), seq, child))
                seq += 1
        label = 1 if ones >= need_one else 0
        return CountResult(label, ones, zeros, total, nodes)


def _pool_count(net, schema, x, time_limit) -> CountResult:
    """Count opposite-label assignments with iterative no-good cuts, stopping at the threshold."""
    x = np.asarray(x, dtype=float)
    y0 = net.decide(x)
    total = assignment_space(schema, PREDICTION).size
    need_one, need_zero = majority_thresholds(total)
    # opposite labels needed to overturn y0
    target = need_zero if y0 == 1 else need_one
    lo, hi = query_box(schema, x, PREDICTION)
    bounds = compute_bounds(net, lo, hi, input_constraints(schema))
    m = add_fairness_ce_constraints(encode_network(net, bounds, schema, PREDICTION), x, y0)
    res = bnb_solve(m, "pool", k=target, time_limit=time_limit)
    if res.status != POOL:
        raise UndecidedError(f"fair prediction undecided: {len(res.pool)} of {target} opposite "
                             "labels found when the limit was hit")
    found = len(res.pool)
    label = 1 - y0 if found >= target else y0
    ones, zeros = (total - found, found) if y0 == 1 else (found, total - found)
    return CountResult(label, ones, zeros, total, res.nodes)


def count_assignments(net: NetworkSpec, schema: FeatureSchema, x, *, strategy: str = "count",
                      time_limit: float | None = DEFAULT_TIME_LIMIT, leaf_size: int = LEAF_SIZE) -> CountResult:
    """Majority vote over the sensitive assignments of ``x`` (counts may stop early)."""
    if strategy == "count":
        deadline = None if time_limit is None else time.monotonic() + time_limit
        return _RegionCounter(net, schema, leaf_size).count(x, deadline)
    if strategy == "pool":
        return _pool_count(net, schema, x, time_limit)
    raise ValueError(f"unknown strategy {strategy!r}")


def fair_predict(net: NetworkSpec, schema: FeatureSchema, x, *, strategy: str = "count",
                 time_limit: float | None = DEFAULT_TIME_LIMIT, leaf_size: int = LEAF_SIZE) -> int:
    """Label 1 iff at least half of the sensitive assignments of ``x`` are accepted.

    Raises :class:`UndecidedError` when the limit expires; never falls back
    to the raw decision.
    """
    return count_assignments(net, schema, x, strategy=strategy, time_limit=time_limit,
                             leaf_size=leaf_size).label


def enumerate_predict(net: NetworkSpec, schema: FeatureSchema, x, cap: int = ENUMERATION_CAP) -> int:
    """Majority vote by evaluating every sensitive assignment."""
    space = assignment_space(schema, PREDICTION)
    if space.size > cap:
        raise ValueError(f"{space.size} assignments exceed the enumeration cap of {cap}")
    t = net.logit_threshold
    ones = sum(int(np.count_nonzero(net.logits(pts) >= t))
               for pts in space.members(np.asarray(x, dtype=float)))
    return 1 if 2 * ones >= space.size else 0


class FairPredictor:
    """Callable wrapper reusing per-network precomputation across many points.

    The vote depends on the nonsensitive prefix only, so results are cached
    per prefix; ``seconds`` accumulates the time spent on uncached counts.
    """

    def __init__(self, net: NetworkSpec, schema: FeatureSchema, *, strategy: str = "count",
                 time_limit: float | None = DEFAULT_TIME_LIMIT, leaf_size: int = LEAF_SIZE):
        self.net, self.schema = net, schema
        self.strategy, self.time_limit = strategy, time_limit
        self._counter = _RegionCounter(net, schema, leaf_size) if strategy == "count" else None
        self._memo: dict[bytes, CountResult] = {}
        self.seconds = 0.0

    def count(self, x) -> CountResult:
        x = np.asarray(x, dtype=float)
        key = x[: self.schema.nonsensitive_dim].tobytes()
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        start = time.perf_counter()
        try:
            if self._counter is None:
                out = _pool_count(self.net, self.schema, x, self.time_limit)
            else:
                deadline = None if self.time_limit is None else time.monotonic() + self.time_limit
                out = self._counter.count(x, deadline)
        finally:
            self.seconds += time.perf_counter() - start
        self._memo[key] = out
        return out

    def __call__(self, x) -> int:
        return self.count(x).label


# ---------------------------------------------------------------------------
# audits

@dataclass
class SampleRecord:
    sample_id: int
    raw_label: int
    fair_label: int | None
    has_ce: bool | None
    flipped: bool | None
    violation: float | None
    solve_ms: float
    status: str
    true_label: int | None = None
    counterexample: Counterexample | None = field(default=None, repr=False)


@dataclass
class FairnessReport:
    records: list[SampleRecord]
    ce_rate: float
    flip_rate: float
    accuracy: float
    fair_accuracy: float
    avg_violation: float
    max_violation: float
    n_unknown: int

    @property
    def n(self) -> int:
        return len(self.records)


def summarize(records: list[SampleRecord]) -> FairnessReport:
    """Aggregate per-sample records; unknown outcomes are excluded from every rate.

    Violation averages count fair samples as zero violation.
    """
    decided = [r for r in records if r.status != UNKNOWN]
    n = len(decided)

    def rate(values):
        return float(np.mean(values)) if n else 0.0

    has_ce = [bool(r.has_ce) for r in decided]
    flipped = [bool(r.flipped) for r in decided if r.flipped is not None]
    labeled = [r for r in decided if r.true_label is not None]
    acc = float(np.mean([r.raw_label == r.true_label for r in labeled])) if labeled else math.nan
    fair_lab = [r for r in labeled if r.fair_label is not None]
    fair_acc = float(np.mean([r.fair_label == r.true_label for r in fair_lab])) if fair_lab else math.nan
    viol = [r.violation if r.has_ce else 0.0 for r in decided if r.violation is not None or not r.has_ce]
    return FairnessReport(
        records=records,
        ce_rate=rate(has_ce),
        flip_rate=float(np.mean(flipped)) if flipped else 0.0,
        accuracy=acc,
        fair_accuracy=fair_acc,
        avg_violation=float(np.mean(viol)) if viol else 0.0,
        max_violation=float(np.max(viol)) if viol else 0.0,
        n_unknown=len(records) - n,
    )


def audit_sample(net: NetworkSpec, schema: FeatureSchema, x, sample_id: int = 0, *,
                 y: int | None = None, predictor: FairPredictor | None = None,
                 max_violation: bool = True, fair: bool = True,
                 time_limit: float | None = DEFAULT_TIME_LIMIT) -> SampleRecord:
    start = time.perf_counter()
    raw = net.decide(x)
    if max_violation:
        out = verify_max_violation(net, schema, x, time_limit=time_limit, mode=PREDICTION)
    else:
        out = verify(net, schema, x, time_limit=time_limit)
    fair_label = flipped = None
    status = out.status
    if fair and status != UNKNOWN:
        predictor = predictor or FairPredictor(net, schema, time_limit=time_limit)
        try:
            fair_label = predictor(x)
            flipped = fair_label != raw
        except UndecidedError:
            status = UNKNOWN
    has_ce = None if out.status == UNKNOWN else out.has_ce
    violation = out.counterexample.violation if (max_violation and out.has_ce) else None
    return SampleRecord(sample_id, raw, fair_label, has_ce, flipped, violation,
                        (time.perf_counter() - start) * 1000.0, status, y, out.counterexample)


def audit(net: NetworkSpec, schema: FeatureSchema, dataset: Dataset, *, max_violation: bool = True,
          fair: bool = True, time_limit: float | None = DEFAULT_TIME_LIMIT, threads: int = 1) -> FairnessReport:
    """Per-sample counterexample search and fair prediction over a dataset."""
    predictor = FairPredictor(net, schema, time_limit=time_limit) if fair else None

    def one(i):
        return audit_sample(net, schema, dataset.X[i], i, y=int(dataset.y[i]), predictor=predictor,
                            max_violation=max_violation, fair=fair, time_limit=time_limit)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(one, range(len(dataset))))
    else:
        records = [one(i) for i in range(len(dataset))]
    return summarize(records)


def ce_rate(net: NetworkSpec, schema: FeatureSchema, X, *, time_limit: float | None = DEFAULT_TIME_LIMIT,
            mode: str = PREDICTION) -> tuple[float, int]:
    """Fraction of rows with a counterexample, and the number of unknown outcomes."""
    outs = [verify(net, schema, x, time_limit=time_limit, mode=mode) for x in X]
    decided = [o for o in outs if o.status != UNKNOWN]
    rate = float(np.mean([o.has_ce for o in decided])) if decided else 0.0
    return rate, len(outs) - len(decided)


def audit_fair_predictor(predictor: FairPredictor, dataset: Dataset, *, member_cap: int = 4096,
                         extra_points: dict[int, np.ndarray] | None = None) -> FairnessReport:
    """Score the fair predictor itself as a classifier.

    For each sample the predictor is evaluated on the members of A(x) (all of
    them when there are at most ``member_cap``, else the first ``member_cap``
    in product order plus any ``extra_points[i]``). A counterexample is a
    member with a different label; a flip is a change under a second round
    of majority voting over those members.
    """
    schema = predictor.schema
    space = assignment_space(schema, PREDICTION)
    records = []
    for i, x in enumerate(dataset.X):
        start = time.perf_counter()
        try:
            label = predictor(x)
        except UndecidedError:
            records.append(SampleRecord(i, -1, None, None, None, None,
                                        (time.perf_counter() - start) * 1000.0, UNKNOWN, int(dataset.y[i])))
            continue
        elapsed = (time.perf_counter() - start) * 1000.0
        members = []
        seen = 0
        for chunk in space.members(x, chunk=min(member_cap, 8192)):
            members.append(chunk[: member_cap - seen])
            seen += len(members[-1])
            if seen >= member_cap:
                break
        if extra_points and i in extra_points:
            members.append(np.atleast_2d(extra_points[i]))
        labels = np.array([predictor(m) for m in np.vstack(members)])
        has_ce = bool(np.any(labels != label))
        second = 1 if 2 * int(labels.sum()) >= len(labels) else 0
        records.append(SampleRecord(i, label, second, has_ce, second != label, None, elapsed, FAIR if not
                                    has_ce else CE, int(dataset.y[i])))
    return summarize(records)
