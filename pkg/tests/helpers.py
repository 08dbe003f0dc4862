"""Random instances and brute-force oracles shared by the tests."""

import numpy as np

from fairguard.network import NetworkSpec
from fairguard.schema import PREDICTION, FeatureSchema, FeatureSpec, assignment_space


def random_schema(rng) -> FeatureSchema:
    feats = [FeatureSpec("a", "real", lo=0, hi=1), FeatureSpec("b", "real", lo=-2, hi=3)]
    if rng.random() < 0.5:
        feats.append(FeatureSpec("c", "categorical", categories=("x", "y", "z")))
    feats.append(FeatureSpec("s1", "categorical", True, categories=tuple("pqrs"[:rng.integers(2, 5)])))
    if rng.random() < 0.7:
        feats.append(FeatureSpec("age", "int", True, lo=18, hi=18 + int(rng.integers(1, 40))))
    if rng.random() < 0.5:
        feats.append(FeatureSpec("s2", "categorical", True, categories=("m", "f")))
    return FeatureSchema(tuple(feats), "y")


def random_net(rng, d, max_layers=3, max_width=16) -> NetworkSpec:
    sizes = [d] + [int(rng.integers(2, max_width + 1)) for _ in range(rng.integers(1, max_layers + 1))] + [1]
    return NetworkSpec.random(sizes, rng)


def random_raw(schema, rng) -> list:
    raw = []
    for f in schema.features:
        if f.kind == "categorical":
            raw.append(f.categories[rng.integers(len(f.categories))])
        elif f.kind == "int":
            raw.append(int(rng.integers(f.lo, f.hi + 1)))
        else:
            raw.append(float(rng.uniform(f.lo, f.hi)))
    return raw


def random_point(schema, rng) -> np.ndarray:
    return schema.encode_row(random_raw(schema, rng))


def members(schema, x) -> np.ndarray:
    return np.vstack(list(assignment_space(schema, PREDICTION).members(x)))


def brute_force(net, schema, x):
    """Every member of A(x), its logit, and which members flip the decision of x."""
    pts = members(schema, x)
    logits = net.logits(pts)
    flips = net.decide_batch(pts) != net.decide(x)
    return pts, logits, flips


def brute_majority(net, schema, x) -> int:
    labels = net.decide_batch(members(schema, x))
    ones = int(labels.sum())
    return 1 if ones >= len(labels) - ones else 0
