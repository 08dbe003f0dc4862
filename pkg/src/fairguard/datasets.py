"""Bundled and synthetic datasets."""

from __future__ import annotations

from importlib import resources

import numpy as np

from .schema import (CATEGORICAL, INTEGER, REAL, Dataset, FeatureSchema, FeatureSpec,
                     dataset_from_rows, load_dataset, load_schema)


def _data_path(name: str):
    return resources.files("fairguard") / "data" / name


def german_schema() -> FeatureSchema:
    with resources.as_file(_data_path("german.schema.json")) as p:
        return load_schema(p)


def german() -> Dataset:
    """UCI Statlog German credit data (1000 rows), label ``credit`` with good = 1.

    Sensitive features: age (integer years), personal status and sex, and
    foreign-worker status.
    """
    schema = german_schema()
    with resources.as_file(_data_path("german.csv")) as p:
        return load_dataset(schema, p)


def biased_schema() -> FeatureSchema:
    return FeatureSchema((
        FeatureSpec("x1", REAL, lo=0.0, hi=1.0),
        FeatureSpec("x2", REAL, lo=0.0, hi=1.0),
        FeatureSpec("group", CATEGORICAL, sensitive=True, categories=("a", "b")),
    ), label="y")


def synthetic_biased(n: int = 2000, seed: int = 0, bias: float = 0.15, noise: float = 0.1) -> Dataset:
    """Two uniform features and a binary group; group ``b`` gets a bonus of ``bias``.

    ``y = 1[x1 + x2 + bias * (group == b) + N(0, noise^2) > 1 + bias / 2]``
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, 2))
    g = rng.integers(0, 2, size=n)
    score = x.sum(axis=1) + bias * g + rng.normal(0.0, noise, size=n)
    y = (score > 1.0 + bias / 2).astype(int)
    rows = [(float(a), float(b), "ab"[k]) for (a, b), k in zip(x, g)]
    return dataset_from_rows(biased_schema(), rows, y)


WIDE_CATEGORIES = {
    "marital": ("never", "married", "divorced", "separated", "widowed", "spouse_absent", "af_spouse"),
    "race": ("white", "black", "asian_pac", "amer_indian", "other"),
    "country": tuple(f"c{i:02d}" for i in range(41)),
    "sex": ("female", "male"),
}


def wide_schema() -> FeatureSchema:
    """Census-style schema whose sensitive space has 74 * 7 * 5 * 41 * 2 = 212380 assignments."""
    feats = [
        FeatureSpec("education_years", INTEGER, lo=1, hi=16),
        FeatureSpec("hours", REAL, lo=1.0, hi=99.0),
        FeatureSpec("capital", REAL, lo=0.0, hi=1.0),
        FeatureSpec("occupation", CATEGORICAL, categories=tuple(f"o{i}" for i in range(6))),
        FeatureSpec("age", INTEGER, sensitive=True, lo=17, hi=90),
    ]
    feats += [FeatureSpec(name, CATEGORICAL, sensitive=True, categories=cats)
              for name, cats in WIDE_CATEGORIES.items()]
    return FeatureSchema(tuple(feats), label="income")


def synthetic_wide(n: int = 2000, seed: int = 0) -> Dataset:
    """Labels driven mostly by nonsensitive features, with mild age and marital effects."""
    rng = np.random.default_rng(seed)
    schema = wide_schema()
    edu = rng.integers(1, 17, size=n)
    hours = rng.uniform(1.0, 99.0, size=n)
    capital = rng.beta(0.5, 3.0, size=n)
    occ = rng.integers(0, 6, size=n)
    age = rng.integers(17, 91, size=n)
    picks = {name: rng.integers(0, len(c), size=n) for name, c in WIDE_CATEGORIES.items()}
    score = (0.25 * (edu - 9) + 0.03 * (hours - 40) + 3.0 * capital + 0.2 * (occ - 2.5)
             + 0.02 * (np.minimum(age, 60) - 38) + 0.4 * (picks["marital"] == 1)
             + rng.normal(0.0, 0.8, size=n))
    y = (score > 0.3).astype(int)
    rows = []
    for i in range(n):
        rows.append((int(edu[i]), float(hours[i]), float(capital[i]), f"o{occ[i]}", int(age[i]),
                     *(WIDE_CATEGORIES[name][picks[name][i]] for name in WIDE_CATEGORIES)))
    return dataset_from_rows(schema, rows, y)
