"""Pattern diagnostics: sparsity, top-activation statistics, class relations, CKA."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, LabelError
from .margins import AdjacencyMatrix, adjacency_from_weights
from .model import ModelState, _unit_columns, backbone_activations, compute_prototypes, embed
from .numcore import Tensor


@dataclass
class PatternMetrics:
    l1_mean: float
    mta: float
    transferability: float
    top_k: int


@dataclass
class RelationDelta:
    r0: np.ndarray
    delta: np.ndarray
    margin_tag: str
    order: np.ndarray


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def default_top_k(d: int) -> int:
    """5% of the channels, at least one."""
    return max(1, math.ceil(0.05 * d))


def l1_sparsity(features) -> float:
    """Mean L1 norm of the (unit-norm) feature rows; 1 is maximally sparse."""
    F = _arr(features)
    return float(np.abs(F).sum(axis=1).mean())


def _top_channels(W: np.ndarray, top_k: int) -> np.ndarray:
    d = W.shape[0]
    if not 1 <= top_k <= d:
        raise ContractError(f"top_k must lie in [1, {d}], got {top_k}")
    # stable sort on negated weights: equal weights keep the lower channel first
    return np.argsort(-W, axis=0, kind="stable")[:top_k].T


def _check(F: np.ndarray, y: np.ndarray, W: np.ndarray) -> None:
    if F.shape[1] != W.shape[0]:
        raise DimensionError(f"feature width {F.shape[1]} != weight rows {W.shape[0]}")
    if y.shape[0] != F.shape[0]:
        raise DimensionError("features and labels disagree on sample count")
    if y.size and (y.min() < 0 or y.max() >= W.shape[1]):
        raise LabelError(f"labels must index the {W.shape[1]} classifier columns")


def mta(features, labels, W, top_k: int, magnitude: bool = False) -> float:
    """Mean Top Activation.

    For each sample, average its activation over the ``top_k`` channels with
    the largest weights in its own class column; then average over samples.
    ``labels`` index the columns of ``W``.
    """
    F, Wd = _arr(features), _arr(W)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    _check(F, y, Wd)
    act = np.abs(F) if magnitude else F
    top = _top_channels(Wd, top_k)[y]
    return float(np.take_along_axis(act, top, axis=1).mean(axis=1).mean())


def transferability(features, labels, W, top_k: int, magnitude: bool = False) -> float:
    """Mean activation of each class's top-weight channels on other classes' samples."""
    F, Wd = _arr(features), _arr(W)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    _check(F, y, Wd)
    classes = np.unique(y)
    if classes.size < 2:
        raise ContractError("transferability needs samples from at least two classes")
    act = np.abs(F) if magnitude else F
    top = _top_channels(Wd, top_k)
    per_class = [act[y != c][:, top[c]].mean() for c in classes]
    return float(np.mean(per_class))


def pattern_metrics(features, labels, W, top_k: int | None = None, magnitude: bool = False) -> PatternMetrics:
    k = top_k if top_k is not None else default_top_k(_arr(W).shape[0])
    return PatternMetrics(
        l1_sparsity(features),
        mta(features, labels, W, k, magnitude),
        transferability(features, labels, W, k, magnitude),
        k,
    )


def upper_triangle_pairs(n: int) -> list[tuple[int, int]]:
    """All (i, j) with i < j in lexicographic order."""
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def class_relation_matrix(prototypes) -> tuple[AdjacencyMatrix, np.ndarray]:
    """Cosine relations between prototype rows, plus the flattened i<j list."""
    P = _arr(prototypes)
    if P.shape[0] < 2:
        raise ContractError("class relations need at least two prototypes")
    A = adjacency_from_weights(P.T)
    iu = np.triu_indices(P.shape[0], k=1)
    return A, A.values[iu]


def relation_delta(r0_list, rm_list, margin_tag: str = "") -> RelationDelta:
    """Relation change ``rm - r0`` ordered by ascending inherent relation ``r0``.

    ``order`` maps sorted positions back to indices of the input lists.
    """
    r0 = np.asarray(r0_list, dtype=np.float64).reshape(-1)
    rm = np.asarray(rm_list, dtype=np.float64).reshape(-1)
    if r0.shape != rm.shape:
        raise DimensionError(f"relation lists have lengths {r0.size} and {rm.size}")
    order = np.argsort(r0, kind="stable")
    return RelationDelta(r0[order], (rm - r0)[order], margin_tag, order)


def linear_cka(X, Y) -> float:
    """Linear centered kernel alignment between two representations of the same rows."""
    Xd, Yd = _arr(X), _arr(Y)
    if Xd.shape[0] != Yd.shape[0]:
        raise DimensionError("CKA inputs must have the same number of rows")
    if Xd.shape[0] < 2:
        raise ContractError("CKA needs at least two rows")
    Xc = Xd - Xd.mean(axis=0, keepdims=True)
    Yc = Yd - Yd.mean(axis=0, keepdims=True)
    xx = np.linalg.norm(Xc.T @ Xc)
    yy = np.linalg.norm(Yc.T @ Yc)
    if xx == 0 or yy == 0:
        raise ContractError("CKA input has zero variance")
    cross = np.linalg.norm(Yc.T @ Xc) ** 2
    return float(min(1.0, max(0.0, cross / (xx * yy))))


# ---------------------------------------------------------------- model-level reports


def first_hidden_features(state: ModelState, x) -> np.ndarray:
    """Output of the first backbone layer (the simplest feature extractor)."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    return backbone_activations(state, xt, "eval")[0].data


def base_class_columns(state: ModelState, class_ids) -> list[int]:
    col = {c: i for i, c in enumerate(state.class_ids)}
    try:
        return [col[int(c)] for c in class_ids]
    except KeyError as exc:
        raise LabelError(f"class {exc} is not registered in the model") from None


@dataclass
class ModelAnalysis:
    rows: list[tuple[str, str, float]]
    relations: dict[str, np.ndarray]


def analyze_model(
    state: ModelState,
    x: np.ndarray,
    y: np.ndarray,
    top_k: int | None = None,
    magnitude: bool = False,
    simple_reference: ModelState | None = None,
) -> ModelAnalysis:
    """All pattern metrics of ``state`` on labelled data ``(x, y)``.

    Metrics are computed per branch (``nm``, ``pm``) and per choice of class
    prototype: trained classifier columns (``weights``) or class means of the
    features on ``(x, y)`` (``protos``). ``cka_simple`` compares the first
    hidden layer of ``simple_reference`` (the model itself when omitted)
    with the final NM feature.
    """
    y = np.asarray(y).reshape(-1)
    classes = sorted(int(c) for c in np.unique(y))
    local = np.searchsorted(classes, y)
    cols = base_class_columns(state, classes)
    f, F = embed(state, x)
    branches = [("nm", f, state.trained_nm, state.W_nm.data)]
    if F is not None:
        branches.append(("pm", F, state.trained_pm, state.W_pm.data))
    rows: list[tuple[str, str, float]] = []
    relations: dict[str, np.ndarray] = {}
    for name, feats, trained, current in branches:
        # trained columns exist only for the base classes, which lead class_ids
        if trained is not None and max(cols) < trained.shape[1]:
            weights = _unit_columns(trained[:, cols])
        else:
            weights = _unit_columns(current[:, cols])
        protos = compute_prototypes(feats, y)[1].T
        k = top_k if top_k is not None else default_top_k(feats.shape[1])
        rows.append(("l1_sparsity", name, l1_sparsity(feats)))
        for source, Wc in (("weights", weights), ("protos", protos)):
            tag = f"{name}_{source}"
            rows.append(("mta", tag, mta(feats, local, Wc, k, magnitude)))
            rows.append(("transferability", tag, transferability(feats, local, Wc, k, magnitude)))
            A, flat = class_relation_matrix(Wc.T)
            rows.append(("relation_mean", tag, A.a_ave))
            relations[tag] = flat
        rows.append(("top_k", name, float(k)))
    ref = simple_reference if simple_reference is not None else state
    rows.append(("cka_simple", "nm", linear_cka(first_hidden_features(ref, x), f)))
    if F is not None:
        rows.append(("cka_simple", "pm", linear_cka(first_hidden_features(ref, x), F)))
    return ModelAnalysis(rows, relations)
