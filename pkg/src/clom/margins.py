"""Additive cosine-margin softmax losses and class-relation margin schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    DegenerateNormError,
    DegenerateRelationsError,
    DimensionError,
    LabelError,
)
from .numcore import NORM_FLOOR, Tensor, _emit, add, matmul, scale

DEFAULT_TAU = 16.0
RELATION_GUARD = 1e-6


@dataclass(frozen=True)
class MarginSpec:
    """Margin hyperparameters of one branch.

    ``m_ave`` is the margin at the average class relation (and the fixed
    margin when no relation mapping is used); ``m_upper`` is the margin for a
    pair of identical classes. ``lambda_pm`` weights the head branch in the
    combined objective and is ignored elsewhere.
    """

    m_ave: float = 0.0
    m_upper: float = 0.0
    tau: float = DEFAULT_TAU
    lambda_pm: float = 1.0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if not self.lambda_pm >= 0:
            raise ContractError(f"lambda_pm must be nonnegative, got {self.lambda_pm}")


@dataclass(frozen=True)
class AdjacencyMatrix:
    values: np.ndarray
    a_ave: float

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _labels(labels, n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise LabelError(f"{y.shape[0]} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    return y


def cosine_logits(features: Tensor, W: Tensor) -> Tensor:
    """Cosine similarities between unit-norm feature rows and unit-norm columns."""
    if features.cols != W.rows:
        raise DimensionError(f"feature width {features.cols} != classifier rows {W.rows}")
    return matmul(features, W)


def _offset_softmax_ce(logits: Tensor, y: np.ndarray, offsets: np.ndarray, tau: float) -> Tensor:
    """mean_i [ logsumexp_j tau*(z_ij + o_ij) - tau*(z_iy + o_iy) ]; offsets are constants."""
    n = logits.rows
    s = tau * (logits.data + offsets)
    smax = s.max(axis=1, keepdims=True)
    e = np.exp(s - smax)
    denom = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    per_row = np.log(denom[:, 0]) + smax[:, 0] - s[rows, y]
    p = e / denom

    def grad(g):
        d = p.copy()
        d[rows, y] -= 1.0
        return (d * (tau * g[0, 0] / n),)

    return _emit(np.array([[per_row.mean()]]), "margin_ce", (logits,), grad)


def fixed_margin_ce(logits: Tensor, labels, m: float, tau: float = DEFAULT_TAU) -> Tensor:
    """Cross-entropy with the ground-truth logit reduced by a fixed margin ``m``."""
    n, N = logits.shape
    if N < 2:
        raise ContractError("fixed_margin_ce needs at least two classes")
    y = _labels(labels, n, N)
    offsets = np.zeros((n, N))
    offsets[np.arange(n), y] = -m
    return _offset_softmax_ce(logits, y, offsets, tau)


def logit_margin_ce(logits: Tensor, labels, margins, tau: float = DEFAULT_TAU) -> Tensor:
    """Cross-entropy with ``margins[y][j]`` added to every non-target logit ``j``.

    ``margins`` may be an array or a Tensor; it is read as a constant either way.
    """
    n, N = logits.shape
    y = _labels(labels, n, N)
    M = margins.data if isinstance(margins, Tensor) else np.asarray(margins, dtype=np.float64)
    if M.ndim != 2 or M.shape[1] != N or M.shape[0] < N:
        raise ContractError(f"margin matrix of shape {M.shape} does not cover {N} classes")
    offsets = M[y].copy()
    offsets[np.arange(n), y] = 0.0
    return _offset_softmax_ce(logits, y, offsets, tau)


def relation_margin_map(a_ij, m_ave: float, m_upper: float, a_ave: float):
    """Linear map from a class relation to a margin.

    Anchored so that the average relation gives ``m_ave`` and a relation of 1
    gives ``m_upper``. Works elementwise on arrays.
    """
    if abs(1.0 - a_ave) < RELATION_GUARD:
        raise DegenerateRelationsError(f"average relation {a_ave} is within {RELATION_GUARD} of 1")
    value = m_ave + (m_upper - m_ave) / (1.0 - a_ave) * (np.asarray(a_ij, dtype=np.float64) - a_ave)
    return float(value) if value.ndim == 0 else value


def adjacency_from_unit_columns(Wn: np.ndarray) -> AdjacencyMatrix:
    N = Wn.shape[1]
    if N < 2:
        raise ContractError("class relations need at least two classes")
    A = Wn.T @ Wn
    A = 0.5 * (A + A.T)
    np.clip(A, -1.0, 1.0, out=A)
    np.fill_diagonal(A, 1.0)
    a_ave = float((A.sum() - N) / (N * (N - 1)))
    return AdjacencyMatrix(A, a_ave)


def adjacency_from_weights(W) -> AdjacencyMatrix:
    """Pairwise cosine similarities between the columns of ``W`` (d x N)."""
    Wd = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    norms = np.sqrt((Wd * Wd).sum(axis=0, keepdims=True))
    if (norms <= NORM_FLOOR).any():
        raise DegenerateNormError("adjacency_from_weights: a classifier column is near zero")
    return adjacency_from_unit_columns(Wd / norms)


def build_margin_matrix(A: AdjacencyMatrix, spec: MarginSpec) -> np.ndarray:
    M = relation_margin_map(A.values, spec.m_ave, spec.m_upper, A.a_ave)
    M = np.array(M, dtype=np.float64)
    np.fill_diagonal(M, 0.0)
    return M


def nm_pm_loss(f_logits: Tensor, F_logits: Tensor, labels, nm_spec: MarginSpec, pm_spec: MarginSpec) -> Tensor:
    """Fixed-margin loss on both branches: backbone with ``nm_spec.m_ave``, head with ``pm_spec.m_ave``."""
    lneg = fixed_margin_ce(f_logits, labels, nm_spec.m_ave, nm_spec.tau)
    lpos = fixed_margin_ce(F_logits, labels, pm_spec.m_ave, pm_spec.tau)
    return add(lneg, scale(lpos, pm_spec.lambda_pm))


def clom_loss(
    f_logits: Tensor,
    F_logits: Tensor,
    labels,
    A_nm: AdjacencyMatrix,
    A_pm: AdjacencyMatrix,
    nm_spec: MarginSpec,
    pm_spec: MarginSpec,
) -> Tensor:
    """Relation-mapped margin loss on both branches, head term weighted by ``pm_spec.lambda_pm``."""
    if f_logits.rows != F_logits.rows:
        raise DimensionError("branch logits disagree on batch size")
    lneg = logit_margin_ce(f_logits, labels, build_margin_matrix(A_nm, nm_spec), nm_spec.tau)
    lpos = logit_margin_ce(F_logits, labels, build_margin_matrix(A_pm, pm_spec), pm_spec.tau)
    return add(lneg, scale(lpos, pm_spec.lambda_pm))
