import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autodml.data import (DataError, Dataset, load_csv, make_folds, philox,
                          replication_seed, write_csv)


def _write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_three_rows(tmp_path):
    path = _write(tmp_path, "y,d,z\n1.0,1,0.5\n2.0,0,1.5\n3.0,1,-2\n")
    data = load_csv(path, {"outcome": "y", "treatment": "d"})
    assert data.n_rows == 3
    np.testing.assert_array_equal(data.y, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(data.d, [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(data["z"], [0.5, 1.5, -2.0])


def test_blank_cell_is_rejected(tmp_path):
    path = _write(tmp_path, "y,d,z\n1.0,1,0.5\n2.0,,1.5\n")
    with pytest.raises(DataError, match="non-numeric cell at row 2, column d"):
        load_csv(path, {"outcome": "y"})


def test_non_numeric_and_infinite_cells_are_rejected(tmp_path):
    path = _write(tmp_path, "y,z\n1.0,abc\n")
    with pytest.raises(DataError, match="row 1, column z"):
        load_csv(path, {"outcome": "y"})
    path = _write(tmp_path, "y,z\n1.0,inf\n", "inf.csv")
    with pytest.raises(DataError, match="row 1, column z"):
        load_csv(path, {"outcome": "y"})


def test_cluster_column_counts_distinct_ids(tmp_path):
    path = _write(tmp_path, "y,g\n1,7\n2,7\n3,3\n")
    data = load_csv(path, {"outcome": "y", "cluster": "g"})
    assert data.n_clusters == 2
    assert "g" not in data
    np.testing.assert_array_equal(data.cluster, [7, 7, 3])


def test_missing_column_and_empty_file(tmp_path):
    path = _write(tmp_path, "y,z\n1,2\n")
    with pytest.raises(DataError, match="missing column 'd'"):
        load_csv(path, {"outcome": "y", "treatment": "d"})
    with pytest.raises(DataError, match="empty file"):
        load_csv(_write(tmp_path, "y,z\n", "e.csv"))
    with pytest.raises(DataError, match="cannot open"):
        load_csv(tmp_path / "absent.csv")


def test_dataset_rejects_bad_columns():
    with pytest.raises(DataError, match="has 2 rows, expected 3"):
        Dataset({"a": [1, 2, 3], "b": [1, 2]})
    with pytest.raises(DataError, match="non-finite"):
        Dataset({"a": [1.0, np.nan]})
    with pytest.raises(DataError, match="outcome column 'y' not present"):
        Dataset({"a": [1.0]}, outcome="y")


def test_folds_of_ten_rows():
    plan = make_folds(10, 5, seed=3)
    np.testing.assert_array_equal(plan.sizes, [2, 2, 2, 2, 2])


def test_cluster_folds_keep_clusters_whole():
    data = Dataset({"y": np.arange(6.0)}, outcome="y", cluster=[0, 0, 1, 1, 2, 2])
    plan = make_folds(data, 3, seed=0)
    for rows in plan:
        assert rows.size == 2
        assert np.unique(data.cluster[rows]).size == 1


def test_folds_are_deterministic():
    a = make_folds(37, 5, seed=11)
    b = make_folds(37, 5, seed=11)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    assert not np.array_equal(a.assignment, make_folds(37, 5, seed=12).assignment)


def test_fold_count_out_of_range():
    with pytest.raises(DataError, match="out of range"):
        make_folds(4, 5)
    with pytest.raises(DataError, match="out of range"):
        make_folds(10, 1)


def test_replication_seeds_depend_only_on_seed_and_rep():
    assert replication_seed(5, 3) == replication_seed(5, 3)
    assert len({replication_seed(5, r) for r in range(100)}) == 100
    assert philox(9).random() == philox(9).random()


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.integers(2, 8), st.integers(0, 2**32), st.booleans())
def test_fold_plan_partitions_rows(n_units, L, seed, clustered):
    L = min(L, n_units)
    rng = philox(seed)
    if clustered:
        sizes = rng.integers(1, 4, n_units)
        ids = np.repeat(rng.permutation(n_units) * 7, sizes)
        data = Dataset({"y": np.zeros(ids.size)}, cluster=ids)
    else:
        data = Dataset({"y": np.zeros(n_units)})
    plan = make_folds(data, L, seed)
    rows = np.concatenate(list(plan))
    assert np.array_equal(np.sort(rows), np.arange(data.n_rows))
    ids = data.cluster_ids()
    for c in np.unique(ids):
        f = plan.assignment[ids == c]
        assert f.max() == f.min()
    unit_sizes = np.bincount(plan.assignment[np.unique(ids, return_index=True)[1]], minlength=L)
    assert unit_sizes.max() - unit_sizes.min() <= 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=30),
       st.booleans())
def test_csv_round_trip_is_bit_exact(tmp_path_factory, values, clustered):
    v = np.array(values)
    cluster = np.arange(v.size) // 2 if clustered else None
    data = Dataset({"y": v, "x": -v}, outcome="y", cluster=cluster)
    path = tmp_path_factory.mktemp("rt") / "rt.csv"
    write_csv(data, path)
    back = load_csv(path, {"outcome": "y", "cluster": "cluster" if clustered else None})
    assert back.y.tobytes() == data.y.tobytes()
    assert back["x"].tobytes() == data["x"].tobytes()
    if clustered:
        np.testing.assert_array_equal(back.cluster, data.cluster)


def test_canonical_order_makes_clusters_contiguous():
    data = Dataset({"y": np.arange(5.0)}, cluster=[2, 1, 2, 1, 0])
    order = data.canonical_order()
    np.testing.assert_array_equal(data.cluster[order], [0, 1, 1, 2, 2])
