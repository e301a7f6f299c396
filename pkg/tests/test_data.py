import numpy as np
import pytest

from clom.analysis import class_relation_matrix
from clom.data import (
    InfeasibleSpecError,
    SyntheticSpec,
    bayes_accuracy,
    class_means,
    gen_synthetic,
    load_dataset,
    read_features,
    read_labels,
    relation_gram,
    save_dataset,
    write_features,
)
from clom.errors import ContractError, DatasetFormatError

# two samples of three features: [1, -2.5, 0.5] and [0, 3, -1]
TWO_SAMPLE_HEX = (
    "434c4d31" "02000000" "03000000"
    "000000000000f03f" "00000000000004c0" "000000000000e03f"
    "0000000000000000" "0000000000000840" "000000000000f0bf"
)


def test_hex_fixture_parses(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(bytes.fromhex(TWO_SAMPLE_HEX))
    x = read_features(path)
    assert x.shape == (2, 3)
    assert x.tolist() == [[1.0, -2.5, 0.5], [0.0, 3.0, -1.0]]


def test_writer_produces_fixture_bytes(tmp_path):
    write_features(tmp_path / "x.bin", np.array([[1.0, -2.5, 0.5], [0.0, 3.0, -1.0]]))
    assert (tmp_path / "x.bin").read_bytes().hex() == TWO_SAMPLE_HEX


def test_feature_file_errors(tmp_path):
    good = bytes.fromhex(TWO_SAMPLE_HEX)
    cases = {"trunc": good[:-1], "header": good[:9], "magic": b"CLM2" + good[4:], "trailing": good + b"\0"}
    for name, buf in cases.items():
        (tmp_path / name).write_bytes(buf)
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_features(tmp_path / "trunc")
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_features(tmp_path / "header")
    with pytest.raises(DatasetFormatError, match="magic"):
        read_features(tmp_path / "magic")
    with pytest.raises(DatasetFormatError, match="trailing"):
        read_features(tmp_path / "trailing")


def test_label_file_errors(tmp_path):
    (tmp_path / "a.csv").write_text("index,label\n0,3\n1,0\n")
    assert read_labels(tmp_path / "a.csv").tolist() == [3, 0]
    for name, text in {"hdr": "i,l\n0,1\n", "skip": "index,label\n0,1\n2,1\n",
                       "text": "index,label\n0,cat\n", "neg": "index,label\n0,-1\n"}.items():
        (tmp_path / name).write_text(text)
        with pytest.raises(DatasetFormatError):
            read_labels(tmp_path / name)


def test_round_trip_is_lossless(tmp_path):
    spec = SyntheticSpec(seed=3, train_per_class=5, test_per_class=4)
    ds = gen_synthetic(spec)
    save_dataset(ds, tmp_path, spec)
    back = load_dataset(tmp_path)
    for name in ("train_x", "train_y", "test_x", "test_y", "means", "groups"):
        assert np.array_equal(getattr(ds, name), getattr(back, name)), name


def test_same_seed_gives_identical_files(tmp_path):
    spec = SyntheticSpec(seed=11, train_per_class=6, test_per_class=3)
    save_dataset(gen_synthetic(spec), tmp_path / "a", spec)
    save_dataset(gen_synthetic(spec), tmp_path / "b", spec)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
    other = gen_synthetic(SyntheticSpec(seed=12, train_per_class=6, test_per_class=3))
    assert not np.array_equal(other.train_x, gen_synthetic(spec).train_x)


def test_count_mismatch_rejected(tmp_path):
    spec = SyntheticSpec(train_per_class=3, test_per_class=2)
    save_dataset(gen_synthetic(spec), tmp_path, spec)
    (tmp_path / "train_labels.csv").write_text("index,label\n0,0\n")
    with pytest.raises(DatasetFormatError, match="labels"):
        load_dataset(tmp_path)
    (tmp_path / "test.bin").unlink()
    with pytest.raises(DatasetFormatError, match="missing"):
        load_dataset(tmp_path)


# ---------------------------------------------------------------- geometry


@pytest.mark.parametrize("within,between", [(0.6, 0.1), (0.3, -0.05), (0.0, 0.0), (0.9, 0.8)])
def test_class_means_realize_requested_cosines(within, between):
    spec = SyntheticSpec(n_groups=4, classes_per_group=3, dim=16,
                         within_group_cos=within, between_group_cos=between, seed=2)
    means = class_means(spec)
    assert np.allclose(np.linalg.norm(means, axis=1), 1.0, atol=1e-12)
    assert np.allclose(means @ means.T, relation_gram(spec), atol=1e-12)


def test_group_assignment_and_counts():
    spec = SyntheticSpec(n_groups=3, classes_per_group=4, train_per_class=7, test_per_class=2)
    ds = gen_synthetic(spec)
    assert spec.n_classes == 12
    assert ds.groups.tolist() == [c % 3 for c in range(12)]
    assert np.bincount(ds.train_y).tolist() == [7] * 12
    assert np.bincount(ds.test_y).tolist() == [2] * 12


def test_infeasible_geometry():
    with pytest.raises(InfeasibleSpecError, match="dim"):
        class_means(SyntheticSpec(n_groups=5, classes_per_group=4, dim=19))
    with pytest.raises(InfeasibleSpecError, match="not realizable"):
        class_means(SyntheticSpec(n_groups=5, classes_per_group=4, dim=32, between_group_cos=-0.5))
    with pytest.raises(InfeasibleSpecError):
        class_means(SyntheticSpec(within_group_cos=1.0))


def test_singular_cosine_matrix_needs_fewer_dimensions():
    # 1 - w + 4 (w - b) + 20 b = 0: the all-ones direction has eigenvalue zero
    spec = SyntheticSpec(n_groups=5, classes_per_group=4, dim=19, within_group_cos=0.6, between_group_cos=-0.175)
    means = class_means(spec)
    assert np.allclose(means @ means.T, relation_gram(spec), atol=1e-12)
    assert np.allclose(means.sum(axis=0), 0.0, atol=1e-12)


def test_flat_relation_structure():
    spec = SyntheticSpec(n_groups=4, classes_per_group=3, dim=16, within_group_cos=0.3, between_group_cos=0.3)
    _, flat = class_relation_matrix(class_means(spec))
    assert flat.size == 66
    assert flat.var() < 1e-24


def test_spec_validation():
    with pytest.raises(ContractError):
        SyntheticSpec(noise_sigma=0.0)
    with pytest.raises(ContractError):
        SyntheticSpec(n_groups=0)


def test_samples_center_on_means():
    spec = SyntheticSpec(n_groups=2, classes_per_group=2, dim=8, noise_sigma=0.5, train_per_class=4000)
    ds = gen_synthetic(spec)
    for c in range(4):
        # standard error 0.5 / sqrt(4000) per coordinate
        assert np.abs(ds.train_x[ds.train_y == c].mean(axis=0) - ds.means[c]).max() < 0.04


# ---------------------------------------------------------------- Bayes oracle


def test_bayes_accuracy_noiseless_limit():
    means = class_means(SyntheticSpec(dim=32))
    assert bayes_accuracy(means, 1e-3, n_per_class=200) == 1.0


def test_bayes_accuracy_falls_with_noise():
    means = class_means(SyntheticSpec(dim=32))
    accs = [bayes_accuracy(means, s, n_per_class=300) for s in (0.05, 0.2, 0.4, 0.8)]
    assert all(a >= b for a, b in zip(accs, accs[1:]))
    assert accs[-1] < 0.9
    # never below chance
    assert accs[-1] > 1 / 20
