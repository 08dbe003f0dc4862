"""Pretraining and counterexample-guided fairness retraining of ReLU classifiers."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .fairness import UNKNOWN, verify_max_violation
from .network import NetworkSpec, backward, bce, sigmoid
from .schema import PREDICTION, TRAINING, Dataset

log = logging.getLogger(__name__)

FULL_BATCH = "full_batch"
CE_BATCH = "ce_batch"
STRATEGIES = (FULL_BATCH, CE_BATCH)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    rho: float = 1.0
    strategy: str = FULL_BATCH
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1
    val_cap: int = 200
    time_limit: float | None = 10.0  # per counterexample search, seconds
    threads: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown batch strategy {self.strategy!r}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch size and learning rate must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("validation fraction must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float
    val_loss: float
    val_ce_rate: float | None = None
    avg_violation: float | None = None
    max_violation: float | None = None
    n_counterexamples: int = 0
    n_unknown: int = 0
    seconds: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SelectionResult:
    epoch: int
    distance: float
    distances: list[float]
    trajectory: list[EpochRecord] = field(default_factory=list)


class Adam:
    def __init__(self, params: list[np.ndarray], config: TrainConfig):
        self.lr, self.b1, self.b2, self.eps = config.lr, config.beta1, config.beta2, config.adam_eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _metrics(net: NetworkSpec, X, y) -> tuple[float, float]:
    if not len(y):
        return math.nan, math.nan
    p = net.predict_proba(X)
    acc = float(np.mean((net.logits(X) >= net.logit_threshold) == (y == 1)))
    return acc, float(np.mean(bce(p, y)))


def _split(dataset: Dataset, config: TrainConfig, val: Dataset | None) -> tuple[Dataset, Dataset]:
    if val is not None:
        return dataset, val
    if config.val_fraction == 0:
        return dataset, dataset.subset([])
    return dataset.split(config.val_fraction, config.seed)


def _check(loss: float, epoch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"training diverged in epoch {epoch}: loss is {loss}")


def pretrain(net: NetworkSpec, dataset: Dataset, config: TrainConfig, val: Dataset | None = None,
             mask=None) -> tuple[NetworkSpec, list[EpochRecord]]:
    """Minibatch Adam on the clamped cross-entropy; keeps the best-validation-loss epoch.

    ``mask`` (a boolean column vector) zeroes those input columns before
    training. Epoch 0 is the initial network, so zero epochs return it unchanged.
    """
    if not len(dataset):
        raise TrainingError("empty training set")
    train, val = _split(dataset, config, val)
    X, y = np.array(train.X), np.array(train.y, dtype=float)
    Xv, yv = np.array(val.X), np.array(val.y, dtype=float)
    if mask is not None:
        X[:, mask] = 0.0
        Xv[:, mask] = 0.0
    rng = np.random.default_rng(config.seed)
    net = net.copy()
    params = net.parameters()
    opt = Adam(params, config)
    records = []

    def record(epoch, loss, seconds):
        acc, _ = _metrics(net, X, y)
        vacc, vloss = _metrics(net, Xv, yv) if len(yv) else (acc, loss)
        records.append(EpochRecord(epoch, loss, acc, vacc, vloss, seconds=seconds))

    _, loss0 = _metrics(net, X, y)
    record(0, loss0, 0.0)
    best, best_loss = net.copy(), records[0].val_loss
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(y))
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s: s + config.batch_size]
            loss, grads = backward(net, X[idx], y[idx])
            _check(loss, epoch)
            opt.step(params, grads)
            losses.append(loss * len(idx))
        record(epoch, float(np.sum(losses) / len(y)), time.perf_counter() - start)
        _check(records[-1].val_loss, epoch)
        if records[-1].val_loss < best_loss:
            best, best_loss = net.copy(), records[-1].val_loss
    return best, records


def train_blind(net: NetworkSpec, dataset: Dataset, config: TrainConfig,
                val: Dataset | None = None) -> tuple[NetworkSpec, list[EpochRecord]]:
    """Pretrain with every sensitive column masked to zero.

    The first-layer weights on sensitive columns are zeroed afterwards, so the
    model ignores those columns on unmasked inputs too.
    """
    schema = dataset.schema
    mask = np.zeros(schema.input_dim, dtype=bool)
    mask[schema.nonsensitive_dim:] = True
    out, records = pretrain(net, dataset, config, val, mask=mask)
    out.weights[0][:, mask] = 0.0
    return out, records


@dataclass
class BatchPlan:
    """Rows of one optimizer step: ``X``, labels, per-row loss weights, and provenance."""

    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    is_ce: np.ndarray
    source: np.ndarray  # dataset row each entry came from


def _find_counterexamples(net, schema, X, config):
    def one(x):
        return verify_max_violation(net, schema, x, time_limit=config.time_limit, mode=TRAINING)

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            return list(pool.map(one, X))
    return [one(x) for x in X]


def plan_batch(net: NetworkSpec, dataset: Dataset, batch: np.ndarray, config: TrainConfig,
               rng: np.random.Generator) -> tuple[BatchPlan, int, int, list[float]]:
    """Subsample a batch, search max-violation counterexamples, and assemble the step.

    Each counterexample carries the label of the sample it came from. The
    loss averages the originals and, separately, the counterexamples, and
    adds the two means. Returns the plan, the CE count, the unknown count and
    the violations found.
    """
    n_sample = max(1, math.ceil(config.rho * len(batch)))
    sampled = np.sort(rng.choice(batch, size=n_sample, replace=False)) if n_sample < len(batch) else batch
    outs = _find_counterexamples(net, dataset.schema, dataset.X[sampled], config)
    with_ce = [i for i, o in zip(sampled, outs) if o.has_ce]
    ces = [o.counterexample.point for o in outs if o.has_ce]
    violations = [o.counterexample.violation for o in outs if o.has_ce]
    unknown = sum(o.status == UNKNOWN for o in outs)
    if unknown == len(outs):
        log.warning("every counterexample search in this batch timed out; training on originals")
    if config.strategy == CE_BATCH and with_ce:
        originals = np.array(with_ce)
    else:
        originals = np.asarray(sampled)
    X_orig = dataset.X[originals]
    y_orig = dataset.y[originals].astype(float)
    w_orig = np.full(len(originals), 1.0 / len(originals))
    if ces:
        X = np.vstack([X_orig, np.array(ces)])
        y = np.concatenate([y_orig, dataset.y[with_ce].astype(float)])
        w = np.concatenate([w_orig, np.full(len(ces), 1.0 / len(ces))])
        source = np.concatenate([originals, with_ce])
    else:
        X, y, w, source = X_orig, y_orig, w_orig, originals
    is_ce = np.zeros(len(y), dtype=bool)
    is_ce[len(originals):] = True
    return BatchPlan(X, y, w, is_ce, np.asarray(source)), len(ces), unknown, violations


def ce_fair_epoch(net: NetworkSpec, dataset: Dataset, config: TrainConfig, optimizer: Adam,
                  rng: np.random.Generator, epoch: int = 1) -> tuple[NetworkSpec, dict]:
    """One epoch of counterexample-guided training, updating ``net`` in place.

    Bounds are recomputed for every counterexample search, so each batch sees
    bounds that are sound for the current weights.
    """
    params = net.parameters()
    order = rng.permutation(len(dataset))
    losses, n_ce, n_unknown, violations = [], 0, 0, []
    for s in range(0, len(order), config.batch_size):
        batch = order[s: s + config.batch_size]
        plan, found, unknown, viol = plan_batch(net, dataset, batch, config, rng)
        loss, grads = backward(net, plan.X, plan.y, plan.weights)
        _check(loss, epoch)
        optimizer.step(params, grads)
        losses.append(loss)
        n_ce += found
        n_unknown += unknown
        violations += viol
    stats = {
        "loss": float(np.mean(losses)),
        "n_counterexamples": n_ce,
        "n_unknown": n_unknown,
        "avg_violation": float(np.mean(violations)) if violations else 0.0,
        "max_violation": float(np.max(violations)) if violations else 0.0,
    }
    return net, stats


def validation_fairness(net: NetworkSpec, schema, X, time_limit) -> tuple[float, float, float, int]:
    """CE rate, average and maximum violation over ``X`` (prediction-mode domains)."""
    outs = [verify_max_violation(net, schema, x, time_limit=time_limit, mode=PREDICTION) for x in X]
    decided = [o for o in outs if o.status != UNKNOWN]
    viol = [o.counterexample.violation if o.has_ce else 0.0 for o in decided]
    if not decided:
        return 0.0, 0.0, 0.0, len(outs)
    return (float(np.mean([o.has_ce for o in decided])), float(np.mean(viol)), float(np.max(viol)),
            len(outs) - len(decided))


def nadir_distance(accuracy: float, ce_rate: float) -> float:
    """Euclidean distance from (accuracy, CE rate) to the ideal point (1, 0)."""
    return math.hypot(1.0 - accuracy, ce_rate)


def select_epoch(records: list[EpochRecord]) -> SelectionResult:
    """Record closest to perfect accuracy with no counterexamples; ties go to the earliest."""
    if not records:
        raise TrainingError("no epochs to select from")
    distances = [nadir_distance(r.val_accuracy, r.val_ce_rate or 0.0) for r in records]
    best = min(range(len(records)), key=lambda i: (distances[i], i))
    return SelectionResult(records[best].epoch, distances[best], distances, list(records))


def ce_fair_train(net: NetworkSpec, dataset: Dataset, config: TrainConfig, val: Dataset | None = None,
                  on_epoch=None) -> tuple[SelectionResult, NetworkSpec, list[NetworkSpec]]:
    """Counterexample-guided retraining for ``config.epochs`` epochs with epoch selection.

    Validation accuracy uses the whole validation split; the validation CE
    rate uses a fixed subsample of at most ``config.val_cap`` rows. Returns
    the selection, the chosen network, and every epoch's snapshot.
    ``on_epoch(record, snapshot)`` is called after each epoch.
    """
    if config.epochs < 1:
        raise TrainingError("counterexample-guided training needs at least one epoch")
    train, val = _split(dataset, config, val)
    if not len(val):
        val = train
    rng = np.random.default_rng(config.seed)
    cap = min(len(val), config.val_cap)
    val_idx = np.sort(np.random.default_rng(config.seed + 1).choice(len(val), size=cap, replace=False))
    Xv_fair = val.X[val_idx]
    net = net.copy()
    opt = Adam(net.parameters(), config)
    records, snapshots = [], []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        net, stats = ce_fair_epoch(net, train, config, opt, rng, epoch)
        acc, _ = _metrics(net, train.X, train.y)
        vacc, vloss = _metrics(net, val.X, val.y)
        rate, avg_v, max_v, unknown = validation_fairness(net, val.schema, Xv_fair, config.time_limit)
        rec = EpochRecord(epoch, stats["loss"], acc, vacc, vloss, rate, avg_v, max_v,
                          stats["n_counterexamples"], stats["n_unknown"] + unknown,
                          time.perf_counter() - start)
        records.append(rec)
        snapshots.append(net.copy())
        log.info("epoch %d: loss %.4f val acc %.4f val ce rate %.4f", epoch, rec.loss, vacc, rate)
        if on_epoch is not None:
            on_epoch(rec, snapshots[-1])
    sel = select_epoch(records)
    return sel, snapshots[sel.epoch - 1].copy(), snapshots
