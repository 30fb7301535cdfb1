import json

import numpy as np
import pytest

from conftest import small_dataset
from nsf import (
    ModelSpec,
    build_model,
    dataset_from_arrays,
    evaluate,
    fit,
    FitConfig,
    load_dataset,
    load_model,
    normalize_log,
    predict_mean,
    save_model,
    select_features,
    train_val_split,
)
from nsf.exceptions import (
    DegenerateDataError,
    ParameterError,
    ParseError,
    ShapeError,
)
from nsf.pipeline import loadings_sparsity, predicted_counts, training_deviance


def test_dataset_from_arrays_validation(rng):
    Y = rng.poisson(3.0, size=(5, 3)) + 1
    X = rng.uniform(0, 1, size=(5, 2))
    with pytest.raises(ShapeError):
        dataset_from_arrays(Y, X[:4])
    with pytest.raises(ParameterError):
        dataset_from_arrays(-Y, X)
    with pytest.raises(ParameterError):
        dataset_from_arrays(Y + 0.5, X)
    Ybad = Y.astype(float)
    Ybad[0, 0] = np.nan
    with pytest.raises(ParameterError):
        dataset_from_arrays(Ybad, X)


def test_dataset_coordinate_rescaling(rng):
    Y = rng.poisson(3.0, size=(40, 3)) + 1
    X = np.column_stack([rng.uniform(5, 9, size=40), rng.uniform(-100, 300, size=40)])
    data = dataset_from_arrays(Y, X)
    np.testing.assert_allclose(data.X.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.abs(data.X).max(axis=0), 1.0, rtol=1e-12)


def test_dataset_min_total_filter():
    Y = np.array([[60, 50], [30, 20], [200, 5]])
    X = np.arange(6.0).reshape(3, 2)
    data = dataset_from_arrays(Y, X, min_total=100)
    assert data.N == 2
    np.testing.assert_array_equal(data.row_indices, [0, 2])
    with pytest.raises(DegenerateDataError):
        dataset_from_arrays(Y, X, min_total=10_000)


def test_load_dense_csv(tmp_path):
    counts = tmp_path / "counts.csv"
    coords = tmp_path / "coords.csv"
    counts.write_text("# comment line\ng1,g2\n60,50\n70,40\n90,30\n")
    coords.write_text("x,y\n0,0\n0,1\n1,0\n")
    data = load_dataset(counts, coords)
    assert (data.N, data.J, data.D) == (3, 2, 2)
    assert data.feature_names == ["g1", "g2"]


def test_load_triplet_counts(tmp_path):
    counts = tmp_path / "counts.txt"
    coords = tmp_path / "coords.csv"
    counts.write_text("2 2 3\n1 1 80\n1 2 30\n2 1 120\n")
    coords.write_text("0,0\n0,1\n")
    data = load_dataset(counts, coords)
    np.testing.assert_array_equal(data.Y, [[80, 30], [120, 0]])


def test_load_triplet_duplicates_summed(tmp_path):
    counts = tmp_path / "c.txt"
    coords = tmp_path / "x.csv"
    counts.write_text("1 2 2\n1 1 60\n1 1 50\n")
    coords.write_text("0,0\n")
    data = load_dataset(counts, coords, min_total=0)
    np.testing.assert_array_equal(data.Y, [[110, 0]])


def test_load_triplet_bad_entries(tmp_path):
    coords = tmp_path / "x.csv"
    coords.write_text("0,0\n0,1\n")
    bad_index = tmp_path / "bad1.txt"
    bad_index.write_text("2 2 1\n3 1 5\n")
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(bad_index, coords)
    bad_count = tmp_path / "bad2.txt"
    bad_count.write_text("2 2 2\n1 1 5\n")
    with pytest.raises(ParseError):
        load_dataset(bad_count, coords)


def test_load_dense_bad_cell(tmp_path):
    counts = tmp_path / "counts.csv"
    coords = tmp_path / "coords.csv"
    counts.write_text("g1,g2\n1,oops\n")
    coords.write_text("0,0\n")
    with pytest.raises(ParseError):
        load_dataset(counts, coords)


def test_load_missing_file(tmp_path):
    coords = tmp_path / "x.csv"
    coords.write_text("0,0\n")
    with pytest.raises(OSError):
        load_dataset(tmp_path / "nope.csv", coords)


def test_load_count_filter_drops_row(tmp_path):
    counts = tmp_path / "counts.csv"
    coords = tmp_path / "coords.csv"
    counts.write_text("g1,g2\n60,50\n30,20\n90,30\n")
    coords.write_text("0,0\n0,1\n1,0\n")
    data = load_dataset(counts, coords)
    assert data.N == 2


def test_select_features_ranking(rng):
    N = 30
    X = rng.uniform(0, 1, size=(N, 2))
    A = rng.poisson(5.0, size=(N, 2)) + 1
    A[3, 1] = 200
    # a column equal to the sum of the others is exactly proportional to
    # the row totals, so the size-factor null predicts it perfectly
    saturating = A.sum(axis=1)
    Y = np.column_stack([A[:, 0], saturating, A[:, 1]])
    data = dataset_from_arrays(Y, X, min_total=0)
    top2 = select_features(data, 2)
    assert top2.J == 2
    assert top2.feature_names == ["f0001", "f0003"]
    np.testing.assert_array_equal(top2.Y, Y[:, [0, 2]])
    assert select_features(data, 3) is data
    assert select_features(data, 99) is data
    with pytest.raises(ParameterError):
        select_features(data, 0)


def test_select_features_permutation_invariance(rng):
    Y = rng.poisson(4.0, size=(20, 6)) + 1
    X = rng.uniform(0, 1, size=(20, 2))
    data = dataset_from_arrays(Y, X)
    kept = set(select_features(data, 3).feature_names)
    perm = rng.permutation(6)
    data_p = dataset_from_arrays(Y[:, perm], X,
                                 feature_names=[data.feature_names[j] for j in perm])
    kept_p = set(select_features(data_p, 3).feature_names)
    assert kept == kept_p


def test_normalize_log_properties(rng):
    Y = rng.poisson(6.0, size=(15, 4)) + 1
    X = rng.uniform(0, 1, size=(15, 2))
    data = dataset_from_arrays(Y, X)
    Z = normalize_log(data)
    np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-12)
    med = np.median(Y.sum(axis=1))
    scaled = np.expm1(Z + np.log1p(Y * (med / Y.sum(axis=1))[:, None]).mean(axis=0))
    np.testing.assert_allclose(scaled.sum(axis=1), med, rtol=1e-8)


def test_train_val_split(rng):
    data = small_dataset(N=100, J=4)
    train, val = train_val_split(data, 0.95, seed=4)
    assert train.N == 95 and val.N == 5
    all_rows = np.concatenate([train.row_indices, val.row_indices])
    np.testing.assert_array_equal(np.sort(all_rows), np.arange(100))
    t2, v2 = train_val_split(data, 0.95, seed=4)
    np.testing.assert_array_equal(train.row_indices, t2.row_indices)
    with pytest.raises(ParameterError):
        train_val_split(data, 1.0, seed=0)


def test_split_preserves_normalization_stats():
    data = small_dataset(N=40, J=5, seed=21)
    ref = data.normalized()
    train, val = train_val_split(data, 0.9, seed=1)
    np.testing.assert_allclose(train.normalized(), ref[train.row_indices], rtol=1e-12)
    np.testing.assert_allclose(val.normalized(), ref[val.row_indices], rtol=1e-12)


def test_evaluate_spatial_model(rng):
    data = small_dataset(N=30, J=4, seed=23)
    train, val = train_val_split(data, 0.9, seed=0)
    m = build_model(ModelSpec(L=2, T=2, M=10), train, seed=0)
    m, _ = fit(m, train, FitConfig(max_steps=15, seed=0))
    rep = evaluate(m, val)
    assert rep["validation_deviance_total"] >= 0
    assert rep["n_validation"] == val.N
    assert 0 <= rep["sparsity"] <= 1
    assert rep["flags"] == {}
    assert training_deviance(m, train)["training_deviance_total"] >= 0


def test_evaluate_nonspatial_model_flags(rng):
    data = small_dataset(N=25, J=4, seed=27)
    train, val = train_val_split(data, 0.9, seed=0)
    m = build_model(ModelSpec(L=2, T=0), train, seed=0)
    m, _ = fit(m, train, FitConfig(max_steps=10, seed=0))
    rep = evaluate(m, val)
    assert "nonspatial_extrapolation" in rep["flags"]
    assert np.isfinite(rep["validation_deviance_total"])


def test_loadings_sparsity():
    data = small_dataset(N=12, J=4)
    m = build_model(ModelSpec(L=2, T=1, M=6), data, seed=0)
    m.W[:] = 1.0
    m.V[:] = 1.0
    assert loadings_sparsity(m) == 0.0
    m.V[:2, 0] = 0.0
    assert loadings_sparsity(m) == pytest.approx(2 / 8)


def test_predicted_counts_shapes():
    data = small_dataset(N=15, J=3, seed=29)
    m = build_model(ModelSpec(L=2, T=1, M=8), data, seed=0)
    pred, flags = predicted_counts(m, data, rows=np.arange(5))
    assert pred.shape == (5, 3)
    assert np.all(pred > 0)
    assert flags == {}
    pred_oos, flags_oos = predicted_counts(m, data)
    assert pred_oos.shape == (15, 3)
    assert "nonspatial_prior_means" in flags_oos


def test_save_load_round_trip(tmp_path):
    data = small_dataset(N=18, J=4, seed=31)
    m = build_model(ModelSpec(L=3, T=2, M=9), data, seed=0)
    m, _ = fit(m, data, FitConfig(max_steps=8, seed=0))
    path = tmp_path / "model.npz"
    save_model(m, path, val_indices=np.array([1, 5]), norm_median=3.0,
               norm_col_means=np.zeros(4))
    m2, info = load_model(path)
    np.testing.assert_array_equal(
        predict_mean(m, rows=np.arange(18)), predict_mean(m2, rows=np.arange(18))
    )
    assert m2.spec.kind == m.spec.kind
    assert m2.feature_names == m.feature_names
    np.testing.assert_array_equal(info["val_indices"], [1, 5])
    assert info["norm_median"] == 3.0


def test_load_model_rejects_unknown_version(tmp_path):
    data = small_dataset(N=10, J=3)
    m = build_model(ModelSpec(L=2, T=0), data, seed=0)
    path = tmp_path / "model.npz"
    save_model(m, path)
    raw = dict(np.load(path, allow_pickle=False))
    cfg = json.loads(bytes(raw["config_json"]).decode())
    cfg["format_version"] = 999
    raw["config_json"] = np.frombuffer(json.dumps(cfg).encode(), dtype=np.uint8)
    np.savez(path, **raw)
    with pytest.raises(ParseError):
        load_model(path)


def test_gaussian_model_archives_normalization(tmp_path):
    data = small_dataset(N=16, J=4, seed=33)
    m = build_model(ModelSpec(L=2, T=0, nonnegative=False, likelihood="gaussian"),
                    data, seed=0)
    m, _ = fit(m, data, FitConfig(max_steps=5, seed=0))
    rep = evaluate(m, data)
    assert "deviance_via_inverse_transform" in rep["flags"]
