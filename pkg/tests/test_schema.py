import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairguard.datasets import german, german_schema
from fairguard.schema import (PREDICTION, TRAINING, FeatureSchema, FeatureSpec, SchemaError,
                              assignment_space, dataset_from_rows, load_dataset, load_schema,
                              write_dataset)


def income_sex():
    return FeatureSchema((FeatureSpec("income", "real", lo=0, hi=100_000),
                          FeatureSpec("sex", "categorical", True, categories=("F", "M"))), "y")


def test_dimensions_of_small_schema():
    s = income_sex()
    assert s.input_dim == 3
    assert s.nonsensitive_dim == 1


def test_schema_without_sensitive_features_rejected():
    with pytest.raises(SchemaError, match="no sensitive features"):
        FeatureSchema((FeatureSpec("a", "real", lo=0, hi=1),), "y")


def test_german_schema_shape():
    s = german_schema()
    assert s.input_dim == 61
    assert {f.name for f in s.sensitive_features} == {"age", "sex_marital", "foreign_worker"}
    assert assignment_space(s, PREDICTION).size == 57 * 4 * 2
    ds = german()
    assert len(ds) == 1000


def test_sensitive_columns_come_last():
    s = FeatureSchema((FeatureSpec("sex", "categorical", True, categories=("F", "M")),
                       FeatureSpec("a", "real", lo=0, hi=1)), "y")
    assert s.column_names[0].startswith("a")
    x = s.encode_row(["M", 0.25])
    np.testing.assert_allclose(x, [0.25, 0, 1])
    assert s.decode_point(x) == ["M", 0.25]


@pytest.mark.parametrize("spec,value,column", [
    (FeatureSpec("r", "real", lo=0, hi=10), 5, [0.5]),
    (FeatureSpec("c", "categorical", categories=("A", "B", "C")), "B", [0, 1, 0]),
    (FeatureSpec("i", "int", lo=19, hi=75), 19, [0.0]),
])
def test_encode_value(spec, value, column):
    np.testing.assert_allclose(spec.encode_value(value), column)


@pytest.mark.parametrize("spec,block,value", [
    (FeatureSpec("r", "real", lo=0, hi=10), [0.5], 5),
    (FeatureSpec("c", "categorical", categories=("A", "B", "C")), [0, 1, 0], "B"),
    (FeatureSpec("i", "int", lo=0, hi=1), [0.499999], 0),
])
def test_decode_value(spec, block, value):
    assert spec.decode_value(block) == value


def test_out_of_domain_values_rejected():
    with pytest.raises(SchemaError):
        FeatureSpec("r", "real", lo=0, hi=10).encode_value(11)
    with pytest.raises(SchemaError):
        FeatureSpec("c", "categorical", categories=("A",)).encode_value("Z")


def test_assignment_space_sizes():
    s = FeatureSchema((FeatureSpec("a", "real", lo=0, hi=1),
                       FeatureSpec("sex", "categorical", True, categories=("F", "M")),
                       FeatureSpec("foreign", "categorical", True, categories=("y", "n"))), "y")
    assert assignment_space(s, PREDICTION).size == 4
    s2 = FeatureSchema((FeatureSpec("a", "real", lo=0, hi=1),
                        FeatureSpec("age", "int", True, lo=19, hi=75)), "y")
    assert assignment_space(s2, PREDICTION).size == 57
    training = assignment_space(s2, TRAINING)
    assert not training.discrete
    assert training.size is None


def test_members_share_prefix_and_cover_every_assignment():
    s = german_schema()
    x = german().X[3]
    pts = np.vstack(list(assignment_space(s).members(x, chunk=50)))
    assert len(pts) == 456
    k = s.nonsensitive_dim
    assert (pts[:, :k] == x[:k]).all()
    assert len({tuple(p[k:]) for p in pts}) == 456
    decoded = {tuple(s.decode_point(p)[i] for i, f in enumerate(s.features) if f.sensitive) for p in pts}
    assert len(decoded) == 456


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 100_000), st.sampled_from(["F", "M"]))
def test_encode_decode_round_trip(income, sex):
    s = income_sex()
    back = s.decode_point(s.encode_row([income, sex]))
    assert back[1] == sex
    assert back[0] == pytest.approx(income, abs=1e-6)


def test_csv_round_trip(tmp_path):
    s = income_sex()
    ds = dataset_from_rows(s, [(10.5, "F"), (99_000, "M")], [0, 1])
    (tmp_path / "s.json").write_text(json.dumps(s.to_json()))
    write_dataset(ds, tmp_path / "d.csv")
    back = load_dataset(load_schema(tmp_path / "s.json"), tmp_path / "d.csv")
    np.testing.assert_allclose(back.X, ds.X)
    assert back.y.tolist() == [0, 1]


def test_csv_header_mismatch(tmp_path):
    (tmp_path / "d.csv").write_text("income,y\n1,0\n")
    with pytest.raises(SchemaError, match="header mismatch"):
        load_dataset(income_sex(), tmp_path / "d.csv")


def test_split_is_a_partition():
    ds = german()
    a, b = ds.split(0.2, seed=0)
    assert len(a) == 800 and len(b) == 200
    a2, b2 = ds.split(0.2, seed=0)
    assert (a.X == a2.X).all() and (b.y == b2.y).all()
