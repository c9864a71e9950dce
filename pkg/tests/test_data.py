import numpy as np
import pytest

from mckd.data import LabeledDataset, blob_splits, gaussian_blobs, load_csv, save_csv, stratified_subset


def test_blobs_deterministic_and_shaped():
    a = gaussian_blobs(4, 10, 6, 0.3, seed=7)
    b = gaussian_blobs(4, 10, 6, 0.3, seed=7)
    np.testing.assert_array_equal(a.features, b.features)
    assert a.num_samples == 40 and a.dim == 6 and a.num_classes == 4
    c = gaussian_blobs(4, 10, 6, 0.3, seed=8)
    assert not np.array_equal(a.features, c.features)
    with pytest.raises(ValueError):
        gaussian_blobs(1, 10, 6, 0.3, seed=7)


def test_blobs_tiny_spread_linearly_separable():
    train, test = blob_splits(5, 40, 8, spread=1e-4, seed=3, test_per_class=10)
    # nearest-class-mean classifier is a linear probe's upper bound; at spread->0
    # it is exact
    means = np.stack([train.features[train.labels == c].mean(axis=0) for c in range(5)])
    pred = ((test.features[:, None, :] - means[None]) ** 2).sum(-1).argmin(1)
    assert (pred == test.labels).mean() == 1.0


def test_blob_splits_disjoint_draws():
    train, test = blob_splits(3, 20, 4, 0.5, seed=1, test_per_class=5)
    assert train.split == "train" and test.split == "test"
    assert train.num_samples == 60 and test.num_samples == 15
    # same seed, same means: clusters overlap but no identical rows
    assert not np.isin(test.features.round(12), train.features.round(12)).all()


def test_csv_roundtrip_value_exact(tmp_path):
    ds = gaussian_blobs(3, 5, 4, 0.7, seed=2)
    path = tmp_path / "data.csv"
    save_csv(ds, path)
    back = load_csv(path)
    np.testing.assert_array_equal(ds.features, back.features)
    np.testing.assert_array_equal(ds.labels, back.labels)


def test_csv_header_and_label_gap(tmp_path, caplog):
    path = tmp_path / "gap.csv"
    path.write_text("f1,f2,label\n0.5,1.0,0\n0.25,2.0,2\n")
    with caplog.at_level("WARNING"):
        ds = load_csv(path)
    assert sorted(np.unique(ds.labels)) == [0, 1]  # remapped densely
    assert "remapping" in caplog.text


def test_csv_failures(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_csv(empty)
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("1.0,2.0,0\n1.0,1\n")
    with pytest.raises(ValueError, match="ragged.csv:2"):
        load_csv(ragged)
    bad = tmp_path / "bad.csv"
    bad.write_text("1.0,2.0,0\n1.0,x,1\n")
    with pytest.raises(ValueError, match="bad.csv:2"):
        load_csv(bad)


def test_stratified_subset_rules():
    ds = gaussian_blobs(4, 10, 3, 0.2, seed=5)
    assert stratified_subset(ds, 1.0, seed=0) is ds
    half = stratified_subset(ds, 0.5, seed=0)
    assert half.num_samples == 20
    for c in range(4):
        assert (half.labels == c).sum() == 5
    # floor rule with remainder to lowest class indices
    frac = stratified_subset(ds, 0.26, seed=0)  # 0.26*40 = 10.4 -> 10 total, floor 2 each + 2 extra
    counts = [(frac.labels == c).sum() for c in range(4)]
    assert counts == [3, 3, 2, 2]
    with pytest.raises(ValueError):
        stratified_subset(ds, 0.01, seed=0)
    with pytest.raises(ValueError):
        stratified_subset(ds, 0.0, seed=0)


def test_dataset_validates_invariants():
    with pytest.raises(ValueError):
        LabeledDataset(np.ones((3, 2)), np.zeros(2, dtype=int))
    feats = np.ones((3, 2))
    feats[0, 0] = np.inf
    with pytest.raises(ValueError):
        LabeledDataset(feats, np.zeros(3, dtype=int))
