"""Synthetic grouped-Gaussian datasets and the on-disk dataset format.

A dataset directory holds::

    train.bin / test.bin              features: b"CLM1", u32 n, u32 dim, n*dim <f8
    train_labels.csv / test_labels.csv    "index,label" rows
    means.bin                         class means (same binary layout)
    meta.json                         generator parameters and class groups
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DatasetFormatError
from .numcore import make_rng

FEATURE_MAGIC = b"CLM1"


class InfeasibleSpecError(ContractError):
    """Requested class-mean geometry cannot be realized."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Grouped Gaussian mixture.

    Class ``c`` belongs to group ``c % n_groups``. Class means are unit
    vectors with cosine ``within_group_cos`` inside a group and
    ``between_group_cos`` across groups.
    """

    n_groups: int = 5
    classes_per_group: int = 4
    dim: int = 32
    within_group_cos: float = 0.6
    between_group_cos: float = 0.1
    noise_sigma: float = 0.1
    train_per_class: int = 50
    test_per_class: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_groups < 1 or self.classes_per_group < 1:
            raise ContractError("n_groups and classes_per_group must be positive")
        if not self.noise_sigma > 0:
            raise ContractError("noise_sigma must be positive")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ContractError("per-class sample counts must be positive")

    @property
    def n_classes(self) -> int:
        return self.n_groups * self.classes_per_group


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    means: np.ndarray | None = None
    groups: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1


def relation_gram(spec: SyntheticSpec) -> np.ndarray:
    """Target cosine matrix between class means."""
    groups = np.arange(spec.n_classes) % spec.n_groups
    same = groups[:, None] == groups[None, :]
    G = np.where(same, spec.within_group_cos, spec.between_group_cos)
    np.fill_diagonal(G, 1.0)
    return G


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """Unit class means whose pairwise cosines equal :func:`relation_gram`.

    The Gram matrix is factorized, the factor is placed in ``dim`` dimensions
    and randomly rotated.
    """
    w, b = spec.within_group_cos, spec.between_group_cos
    if not (-1.0 <= b <= 1.0 and -1.0 <= w < 1.0):
        raise InfeasibleSpecError(f"cosines must lie in [-1, 1) , got within={w}, between={b}")
    G = relation_gram(spec)
    vals, vecs = np.linalg.eigh(G)
    tol = 1e-10
    if vals.min() < -tol:
        raise InfeasibleSpecError(
            f"within={w}, between={b} is not realizable: cosine matrix has eigenvalue {vals.min():.3g}")
    keep = vals > tol
    rank = int(keep.sum())
    if spec.dim < rank:
        raise InfeasibleSpecError(f"geometry needs dim >= {rank}, got {spec.dim}")
    factor = vecs[:, keep] * np.sqrt(vals[keep])
    rng = make_rng(spec.seed, "means")
    q, r = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
    frame = q * np.sign(np.diag(r))
    means = factor @ frame[:, :rank].T
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    means = class_means(spec)
    rng = make_rng(spec.seed, "samples")

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        y = np.repeat(np.arange(spec.n_classes), per_class)
        x = means[y] + spec.noise_sigma * rng.standard_normal((y.size, spec.dim))
        return x, y

    train_x, train_y = draw(spec.train_per_class)
    test_x, test_y = draw(spec.test_per_class)
    groups = np.arange(spec.n_classes) % spec.n_groups
    return Dataset(train_x, train_y, test_x, test_y, means, groups)


def bayes_accuracy(means: np.ndarray, noise_sigma: float, n_per_class: int = 2000, seed: int = 0) -> float:
    """Monte Carlo accuracy of the Bayes rule for the mixture.

    Equal priors and a shared isotropic covariance make the Bayes rule the
    nearest class mean.
    """
    rng = make_rng(seed, "bayes")
    k, dim = means.shape
    y = np.repeat(np.arange(k), n_per_class)
    x = means[y] + noise_sigma * rng.standard_normal((y.size, dim))
    d2 = (x * x).sum(1, keepdims=True) - 2 * x @ means.T + (means * means).sum(1)
    return float((d2.argmin(axis=1) == y).mean())


# ---------------------------------------------------------------- file format


def write_features(path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    n, dim = x.shape
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<II", n, dim) + x.tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise DatasetFormatError(f"{path}: truncated header")
    n, dim = struct.unpack_from("<II", buf, 4)
    expected = 12 + 8 * n * dim
    if len(buf) < expected:
        raise DatasetFormatError(f"{path}: truncated, expected {expected} bytes, found {len(buf)}")
    if len(buf) > expected:
        raise DatasetFormatError(f"{path}: {len(buf) - expected} trailing bytes")
    return np.frombuffer(buf, dtype="<f8", offset=12, count=n * dim).reshape(n, dim).astype(np.float64)


def write_labels(path, y: np.ndarray) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "label"])
    for i, label in enumerate(y):
        w.writerow([i, int(label)])
    Path(path).write_text(buf.getvalue())


def read_labels(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["index", "label"]:
        raise DatasetFormatError(f"{path}: expected header 'index,label'")
    labels = []
    for k, row in enumerate(rows[1:]):
        if len(row) != 2:
            raise DatasetFormatError(f"{path}: malformed row {k + 2}")
        try:
            idx, label = int(row[0]), int(row[1])
        except ValueError:
            raise DatasetFormatError(f"{path}: non-integer value on row {k + 2}") from None
        if idx != k or label < 0:
            raise DatasetFormatError(f"{path}: row {k + 2} has index {idx}, label {label}")
        labels.append(label)
    return np.array(labels, dtype=np.int64)


def save_dataset(ds: Dataset, directory, spec: SyntheticSpec | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_features(out / "train.bin", ds.train_x)
    write_labels(out / "train_labels.csv", ds.train_y)
    write_features(out / "test.bin", ds.test_x)
    write_labels(out / "test_labels.csv", ds.test_y)
    if ds.means is not None:
        write_features(out / "means.bin", ds.means)
    meta = {"generator": asdict(spec) if spec is not None else None,
            "groups": ds.groups.tolist() if ds.groups is not None else None}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    for name in ("train.bin", "train_labels.csv", "test.bin", "test_labels.csv"):
        if not (root / name).is_file():
            raise DatasetFormatError(f"{root}: missing {name}")
    train_x, train_y = read_features(root / "train.bin"), read_labels(root / "train_labels.csv")
    test_x, test_y = read_features(root / "test.bin"), read_labels(root / "test_labels.csv")
    if train_x.shape[0] != train_y.shape[0]:
        raise DatasetFormatError(f"{root}: {train_x.shape[0]} train rows but {train_y.shape[0]} labels")
    if test_x.shape[0] != test_y.shape[0]:
        raise DatasetFormatError(f"{root}: {test_x.shape[0]} test rows but {test_y.shape[0]} labels")
    if train_x.shape[1] != test_x.shape[1]:
        raise DatasetFormatError(f"{root}: train/test feature widths differ")
    means = read_features(root / "means.bin") if (root / "means.bin").is_file() else None
    groups = None
    if (root / "meta.json").is_file():
        g = json.loads((root / "meta.json").read_text()).get("groups")
        groups = np.array(g, dtype=np.int64) if g is not None else None
    return Dataset(train_x, train_y, test_x, test_y, means, groups)
