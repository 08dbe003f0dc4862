"""Tabular feature schemas.

A schema fixes the encoded column layout used by every other module:
nonsensitive columns first, sensitive columns last, numerics min-max scaled
to [0, 1] and categoricals one-hot encoded.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

CATEGORICAL = "categorical"
INTEGER = "int"
REAL = "real"
KINDS = (CATEGORICAL, INTEGER, REAL)

TRAINING = "training"
PREDICTION = "prediction"

_MAX_ASSIGNMENTS = 2**63


class SchemaError(ValueError):
    """Malformed schema, out-of-domain value or non-conforming data file."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    sensitive: bool = False
    categories: tuple[str, ...] = ()
    lo: float = 0.0
    hi: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if not self.categories:
                raise SchemaError(f"feature {self.name!r}: empty category list")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"feature {self.name!r}: duplicate categories")
        else:
            if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
                raise SchemaError(f"feature {self.name!r}: non-finite domain")
            if self.lo > self.hi:
                raise SchemaError(f"feature {self.name!r}: lo > hi ({self.lo} > {self.hi})")
            if self.kind == INTEGER and (self.lo != int(self.lo) or self.hi != int(self.hi)):
                raise SchemaError(f"feature {self.name!r}: integer domain needs integer bounds")

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == CATEGORICAL else 1

    @property
    def span(self) -> float:
        return (self.hi - self.lo) or 1.0

    def scale(self, value: float) -> float:
        return (value - self.lo) / self.span

    def unscale(self, column: float) -> float:
        return self.lo + column * self.span

    def grid(self) -> list[int]:
        """Integer points of a numeric domain, step 1 in raw units."""
        if self.kind == CATEGORICAL:
            raise SchemaError(f"feature {self.name!r}: categorical features have no grid")
        return list(range(math.ceil(self.lo), math.floor(self.hi) + 1))

    def encode_value(self, value: Any) -> list[float]:
        if self.kind == CATEGORICAL:
            value = str(value)
            if value not in self.categories:
                raise SchemaError(f"feature {self.name!r}: unknown category {value!r}")
            return [1.0 if c == value else 0.0 for c in self.categories]
        try:
            v = float(value)
        except (TypeError, ValueError):
            raise SchemaError(f"feature {self.name!r}: not a number: {value!r}") from None
        if not math.isfinite(v) or v < self.lo or v > self.hi:
            raise SchemaError(f"feature {self.name!r}: {value!r} outside [{self.lo}, {self.hi}]")
        if self.kind == INTEGER and v != round(v):
            raise SchemaError(f"feature {self.name!r}: {value!r} is not an integer")
        return [self.scale(v)]

    def decode_value(self, block: Sequence[float]) -> Any:
        if self.kind == CATEGORICAL:
            j = int(np.argmax(block))
            if block[j] < 0.5:
                raise SchemaError(f"feature {self.name!r}: malformed one-hot {list(block)}")
            return self.categories[j]
        v = self.unscale(float(block[0]))
        v = min(max(v, self.lo), self.hi)
        if self.kind == INTEGER:
            return int(round(v))
        return v

    def to_json(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind}
        if self.kind == CATEGORICAL:
            out["categories"] = list(self.categories)
        else:
            out["lo"], out["hi"] = self.lo, self.hi
        out["sensitive"] = self.sensitive
        return out

    @classmethod
    def from_json(cls, obj: dict) -> FeatureSpec:
        try:
            name, kind = str(obj["name"]), obj["kind"]
            if kind == CATEGORICAL:
                return cls(name, kind, bool(obj.get("sensitive", False)),
                           categories=tuple(str(c) for c in obj["categories"]))
            return cls(name, kind, bool(obj.get("sensitive", False)),
                       lo=float(obj["lo"]), hi=float(obj["hi"]))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed feature entry {obj!r}: {exc}") from None


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]
    label: str = "label"

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")
        if self.label in names:
            raise SchemaError(f"label column {self.label!r} clashes with a feature name")
        if not any(f.sensitive for f in self.features):
            raise SchemaError("no sensitive features: individual fairness is undefined")

    @cached_property
    def layout(self) -> tuple[FeatureSpec, ...]:
        """Features in encoded order: nonsensitive first, then sensitive."""
        return tuple(f for f in self.features if not f.sensitive) + tuple(
            f for f in self.features if f.sensitive)

    @cached_property
    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for f in self.layout:
            out[f.name] = slice(start, start + f.width)
            start += f.width
        return out

    @cached_property
    def input_dim(self) -> int:
        return sum(f.width for f in self.features)

    @cached_property
    def nonsensitive_dim(self) -> int:
        return sum(f.width for f in self.features if not f.sensitive)

    @property
    def sensitive_features(self) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.layout if f.sensitive)

    @cached_property
    def column_names(self) -> list[str]:
        names = []
        for f in self.layout:
            if f.kind == CATEGORICAL:
                names.extend(f"{f.name}={c}" for c in f.categories)
            else:
                names.append(f.name)
        return names

    def feature(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def lower(self) -> np.ndarray:
        return np.zeros(self.input_dim)

    def upper(self) -> np.ndarray:
        return np.ones(self.input_dim)

    def encode_row(self, raw: Sequence[Any]) -> np.ndarray:
        """Encode raw values given in declaration order."""
        if len(raw) != len(self.features):
            raise SchemaError(f"expected {len(self.features)} values, got {len(raw)}")
        out = np.empty(self.input_dim)
        for f, value in zip(self.features, raw):
            out[self.slices[f.name]] = f.encode_value(value)
        return out

    def decode_point(self, point: Sequence[float]) -> list[Any]:
        """Inverse of :meth:`encode_row`; integers snap to the nearest grid point."""
        point = np.asarray(point, dtype=float)
        if point.shape != (self.input_dim,):
            raise SchemaError(f"expected a point of dimension {self.input_dim}, got {point.shape}")
        return [f.decode_value(point[self.slices[f.name]]) for f in self.features]

    def to_json(self) -> dict:
        return {"features": [f.to_json() for f in self.features], "label": self.label}

    @classmethod
    def from_json(cls, obj: dict) -> FeatureSchema:
        if not isinstance(obj, dict) or "features" not in obj:
            raise SchemaError("schema JSON must be an object with a 'features' list")
        return cls(tuple(FeatureSpec.from_json(f) for f in obj["features"]),
                   label=str(obj.get("label", "label")))


def load_schema(path: str | Path) -> FeatureSchema:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    return FeatureSchema.from_json(obj)


def encode_row(schema: FeatureSchema, raw: Sequence[Any]) -> np.ndarray:
    return schema.encode_row(raw)


def decode_point(schema: FeatureSchema, point: Sequence[float]) -> list[Any]:
    return schema.decode_point(point)


@dataclass(frozen=True)
class SensitiveDomain:
    """Domain of one sensitive feature inside an assignment space.

    ``values`` is None when the feature is treated as a continuous interval
    (numeric sensitive features in training mode).
    """

    feature: FeatureSpec
    values: tuple | None

    @property
    def discrete(self) -> bool:
        return self.values is not None

    @cached_property
    def encodings(self) -> np.ndarray:
        """One row per domain value: that value's encoded column block."""
        if self.values is None:
            raise SchemaError(f"feature {self.feature.name!r} is continuous here")
        return np.array([self.feature.encode_value(v) for v in self.values], dtype=float)


@dataclass(frozen=True)
class AssignmentSpace:
    """All sensitive-feature assignments that share a nonsensitive prefix."""

    schema: FeatureSchema
    mode: str
    domains: tuple[SensitiveDomain, ...]

    @property
    def discrete(self) -> bool:
        return all(d.discrete for d in self.domains)

    @property
    def size(self) -> int | None:
        if not self.discrete:
            return None
        return math.prod(len(d.values) for d in self.domains)

    def __iter__(self) -> Iterator[tuple]:
        if not self.discrete:
            raise SchemaError("continuous assignment space cannot be enumerated")
        return itertools.product(*(d.values for d in self.domains))

    def encode_suffix(self, assignment: Sequence[Any]) -> np.ndarray:
        return np.concatenate([d.feature.encode_value(v) for d, v in zip(self.domains, assignment)])

    def suffix_chunks(self, chunk: int = 8192) -> Iterator[np.ndarray]:
        """Encoded sensitive suffixes of every assignment, in product order."""
        if not self.discrete:
            raise SchemaError("continuous assignment space cannot be enumerated")
        blocks = [d.encodings for d in self.domains]
        sizes = [len(b) for b in blocks]
        total = math.prod(sizes)
        for start in range(0, total, chunk):
            idx = np.arange(start, min(start + chunk, total))
            parts = []
            for j in range(len(blocks)):
                stride = math.prod(sizes[j + 1:])
                parts.append(blocks[j][(idx // stride) % sizes[j]])
            yield np.hstack(parts)

    def members(self, x: np.ndarray, chunk: int = 8192) -> Iterator[np.ndarray]:
        """Chunks of full encoded points sharing ``x``'s nonsensitive prefix."""
        k = self.schema.nonsensitive_dim
        for suffix in self.suffix_chunks(chunk):
            pts = np.empty((len(suffix), self.schema.input_dim))
            pts[:, :k] = x[:k]
            pts[:, k:] = suffix
            yield pts


def assignment_space(schema: FeatureSchema, mode: str = PREDICTION) -> AssignmentSpace:
    if mode not in (TRAINING, PREDICTION):
        raise ValueError(f"unknown mode {mode!r}")
    domains = []
    for f in schema.sensitive_features:
        if f.kind == CATEGORICAL:
            domains.append(SensitiveDomain(f, f.categories))
        elif mode == TRAINING:
            domains.append(SensitiveDomain(f, None))
        else:
            grid = f.grid()
            if not grid:
                raise SchemaError(f"feature {f.name!r}: no integer point in [{f.lo}, {f.hi}]")
            domains.append(SensitiveDomain(f, tuple(grid)))
    space = AssignmentSpace(schema, mode, tuple(domains))
    if space.discrete and space.size > _MAX_ASSIGNMENTS:
        raise SchemaError(f"assignment space too large ({space.size} > 2^63)")
    return space


@dataclass(frozen=True)
class Dataset:
    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    raw: tuple[tuple, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if self.X.ndim != 2 or self.X.shape[1] != self.schema.input_dim:
            raise SchemaError(f"X has shape {self.X.shape}, schema needs {self.schema.input_dim} columns")
        if len(self.X) != len(self.y):
            raise SchemaError("X and y lengths differ")
        if not np.isin(self.y, (0, 1)).all():
            raise SchemaError("labels must be 0 or 1")
        self.X.setflags(write=False)
        self.y.setflags(write=False)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx: Sequence[int]) -> Dataset:
        idx = np.asarray(idx, dtype=int)
        raw = tuple(self.raw[i] for i in idx) if self.raw else ()
        return Dataset(self.schema, self.X[idx].copy(), self.y[idx].copy(), raw)

    def split(self, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
        """Shuffle with ``seed`` and cut off ``fraction`` of rows as the second part."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_second = int(round(fraction * len(self)))
        return self.subset(np.sort(order[n_second:])), self.subset(np.sort(order[:n_second]))


def dataset_from_rows(schema: FeatureSchema, rows: Sequence[Sequence[Any]],
                      labels: Sequence[int]) -> Dataset:
    X = np.array([schema.encode_row(r) for r in rows], dtype=float).reshape(len(rows), schema.input_dim)
    return Dataset(schema, X, np.asarray(labels, dtype=int), tuple(tuple(r) for r in rows))


def _parse(f: FeatureSpec, text: str) -> Any:
    if f.kind == CATEGORICAL:
        return text
    try:
        v = float(text)
    except ValueError:
        raise SchemaError(f"feature {f.name!r}: not a number: {text!r}") from None
    return int(v) if f.kind == INTEGER and v == int(v) else v


def load_dataset(schema: FeatureSchema, path: str | Path) -> Dataset:
    """Read a CSV whose header names exactly the schema features plus the label."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        expected = {f.name for f in schema.features} | {schema.label}
        if set(header) != expected or len(header) != len(expected):
            missing = sorted(expected - set(header))
            extra = sorted(set(header) - expected)
            raise SchemaError(f"{path}: header mismatch (missing {missing}, unexpected {extra})")
        pos = {name: i for i, name in enumerate(header)}
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header) or any(v.strip() == "" for v in rec):
                raise SchemaError(f"{path}:{lineno}: missing value")
            try:
                rows.append([_parse(f, rec[pos[f.name]].strip()) for f in schema.features])
                label = float(rec[pos[schema.label]])
            except (SchemaError, ValueError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            if label not in (0.0, 1.0):
                raise SchemaError(f"{path}:{lineno}: label must be 0 or 1, got {rec[pos[schema.label]]!r}")
            labels.append(int(label))
    try:
        return dataset_from_rows(schema, rows, labels)
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def write_dataset(ds: Dataset, path: str | Path) -> None:
    """Write raw rows back to CSV (declaration order, label last)."""
    rows = ds.raw or tuple(tuple(ds.schema.decode_point(x)) for x in ds.X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f.name for f in ds.schema.features] + [ds.schema.label])
        for r, y in zip(rows, ds.y):
            w.writerow([_fmt(v) for v in r] + [int(y)])


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)
