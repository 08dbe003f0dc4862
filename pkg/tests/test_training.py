import numpy as np
import pytest

from fairguard.datasets import biased_schema, synthetic_biased
from fairguard.fairness import FAIR, verify, verify_max_violation
from fairguard.network import NetworkSpec
from fairguard.schema import TRAINING, dataset_from_rows
from fairguard.training import (CE_BATCH, FULL_BATCH, Adam, EpochRecord, TrainConfig, TrainingError,
                                ce_fair_epoch, ce_fair_train, nadir_distance, plan_batch, pretrain,
                                select_epoch, train_blind)


def separable(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(n, 2))
    keep = np.abs(x[:, 0] - x[:, 1]) > 0.05
    x = x[keep]
    g = rng.integers(0, 2, size=len(x))
    rows = [(float(a), float(b), "ab"[k]) for (a, b), k in zip(x, g)]
    return dataset_from_rows(biased_schema(), rows, (x[:, 0] > x[:, 1]).astype(int))


def biased_net():
    """Accepts on x1 + x2 and pushes group b strongly toward acceptance."""
    w1 = np.array([[3.0, 3.0, 0.0, 0.0], [0.0, 0.0, -2.0, 2.0]])
    return NetworkSpec([w1, np.array([[1.0, 1.0]])], [np.array([-2.0, 0.5]), np.array([-1.5])])


def test_pretrain_separates_toy_data():
    ds = separable()
    net, records = pretrain(NetworkSpec.random([4, 8, 1], 0), ds,
                            TrainConfig(lr=1e-2, epochs=200, val_fraction=0.0))
    assert records[-1].train_accuracy >= 0.99


def test_zero_epochs_returns_initial_weights():
    net0 = NetworkSpec.random([4, 5, 1], 1)
    net, records = pretrain(net0, separable(), TrainConfig(epochs=0))
    assert len(records) == 1
    assert all((a == b).all() for a, b in zip(net.parameters(), net0.parameters()))


def test_training_is_deterministic():
    ds = synthetic_biased(200, seed=3)
    cfg = TrainConfig(lr=1e-2, epochs=3, seed=5)
    a, _ = pretrain(NetworkSpec.random([4, 6, 1], 2), ds, cfg)
    b, _ = pretrain(NetworkSpec.random([4, 6, 1], 2), ds, cfg)
    assert all((p == q).all() for p, q in zip(a.parameters(), b.parameters()))
    sa, na, _ = ce_fair_train(a, ds, TrainConfig(epochs=1, seed=1))
    sb, nb, _ = ce_fair_train(b, ds, TrainConfig(epochs=1, seed=1))
    assert all((p == q).all() for p, q in zip(na.parameters(), nb.parameters()))


def test_adam_first_step_moves_by_learning_rate():
    p = [np.array([1.0, -2.0])]
    Adam(p, TrainConfig(lr=0.1)).step(p, [np.array([0.5, -3.0])])
    # bias-corrected first step is lr * sign(g) up to epsilon
    np.testing.assert_allclose(p[0], [0.9, -1.9], atol=1e-6)


def test_fair_network_batches_are_plain_originals():
    ds = synthetic_biased(100, seed=4)
    net = NetworkSpec.random([4, 6, 1], 3)
    net.weights[0][:, 2:] = 0.0
    cfg = TrainConfig(rho=0.5)
    batch = np.arange(20)
    plan, found, unknown, _ = plan_batch(net, ds, batch, cfg, np.random.default_rng(0))
    assert found == 0 and unknown == 0
    assert len(plan.y) == 10 and not plan.is_ce.any()
    np.testing.assert_allclose(plan.weights, 0.1)
    assert (plan.y == ds.y[plan.source]).all()


@pytest.mark.parametrize("strategy", [FULL_BATCH, CE_BATCH])
def test_counterexamples_inherit_labels(strategy):
    ds = synthetic_biased(100, seed=5)
    net = biased_net()
    plan, found, _, viol = plan_batch(net, ds, np.arange(32), TrainConfig(strategy=strategy),
                                      np.random.default_rng(0))
    assert found > 0 and len(viol) == found
    ce_src = plan.source[plan.is_ce]
    assert (plan.y[plan.is_ce] == ds.y[ce_src]).all()
    # only the sensitive suffix differs from the source row
    assert (plan.X[plan.is_ce][:, :2] == ds.X[ce_src][:, :2]).all()
    assert plan.weights[plan.is_ce].sum() == pytest.approx(1.0)
    assert plan.weights[~plan.is_ce].sum() == pytest.approx(1.0)
    n_orig = (~plan.is_ce).sum()
    assert n_orig == (found if strategy == CE_BATCH else 32)


def avg_violation(net, X):
    outs = [verify_max_violation(net, biased_schema(), x, mode=TRAINING) for x in X]
    return float(np.mean([o.counterexample.violation if o.has_ce else 0.0 for o in outs]))


def test_one_epoch_reduces_violation_on_biased_network():
    ds = synthetic_biased(256, seed=6)
    net = biased_net()
    # rho = 1 samples every row, so the whole set is the sampled set
    before = avg_violation(net, ds.X)
    cfg = TrainConfig(lr=3e-2, strategy=CE_BATCH, seed=0)
    net, stats = ce_fair_epoch(net, ds, cfg, Adam(net.parameters(), cfg), np.random.default_rng(0))
    assert stats["n_counterexamples"] > 0
    assert avg_violation(net, ds.X) < before


def record(epoch, acc, rate):
    return EpochRecord(epoch, 0.0, acc, acc, 0.0, rate)


def test_nadir_selection_example():
    recs = [record(1, 0.90, 0.30), record(2, 0.85, 0.05), record(3, 0.70, 0.00)]
    sel = select_epoch(recs)
    # distance to (accuracy 1, CE rate 0): hypot(0.10, 0.30), hypot(0.15, 0.05), hypot(0.30, 0)
    assert [round(d, 4) for d in sel.distances] == [0.3162, 0.1581, 0.3]
    assert sel.epoch == 2
    assert nadir_distance(1.0, 0.0) == 0.0


def test_single_epoch_is_selected():
    assert select_epoch([record(1, 0.5, 0.5)]).epoch == 1


def test_all_fair_trajectory_picks_highest_accuracy():
    recs = [record(1, 0.7, 0.0), record(2, 0.8, 0.0), record(3, 0.75, 0.0), record(4, 0.8, 0.0)]
    assert select_epoch(recs).epoch == 2


def test_ce_training_needs_an_epoch():
    with pytest.raises(TrainingError):
        ce_fair_train(biased_net(), synthetic_biased(50), TrainConfig(epochs=0))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        TrainConfig(rho=0.0)
    with pytest.raises(ValueError):
        TrainConfig(strategy="bogus")


def test_trajectory_has_one_record_per_epoch():
    ds = synthetic_biased(120, seed=7)
    seen = []
    sel, net, snaps = ce_fair_train(biased_net(), ds, TrainConfig(epochs=2, lr=1e-2),
                                    on_epoch=lambda rec, snap: seen.append(rec.epoch))
    assert seen == [1, 2] and len(sel.trajectory) == 2 and len(snaps) == 2
    chosen = snaps[sel.epoch - 1]
    assert all((a == b).all() for a, b in zip(net.parameters(), chosen.parameters()))


def test_blind_model_is_fair_but_less_accurate():
    ds = synthetic_biased(1000, seed=8, bias=0.6, noise=0.05)
    train, test = ds.split(0.3, seed=0)
    cfg = TrainConfig(lr=1e-2, epochs=60)
    init = NetworkSpec.random([4, 8, 1], 4)
    blind, _ = train_blind(init, train, cfg)
    full, _ = pretrain(init, train, cfg)
    for x in test.X[:20]:
        assert verify(blind, test.schema, x).status == FAIR
    acc_blind = np.mean(blind.decide_batch(test.X) == test.y)
    acc_full = np.mean(full.decide_batch(test.X) == test.y)
    assert acc_blind <= acc_full
