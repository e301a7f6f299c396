"""Base-session training, session absorption and per-session evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import (
    ContractError,
    DivergenceError,
    EmptyBatchError,
    FrozenStateError,
    LabelError,
    NonFiniteError,
    SplitError,
)
from .margins import (
    MarginSpec,
    adjacency_from_weights,
    clom_loss,
    cosine_logits,
    fixed_margin_ce,
    nm_pm_loss,
)
from .model import (
    ModelConfig,
    ModelState,
    compute_prototypes,
    embed,
    extend_classifier,
    forward_nm,
    forward_pm,
    init_model,
    predict,
)
from .numcore import SGD, SgdConfig, Tape, Tensor, make_rng

logger = logging.getLogger(__name__)

LOSS_MODES = ("baseline", "fixed_margin", "nm_pm", "nm_pm_relation")
DUAL_MODES = ("nm_pm", "nm_pm_relation")


@dataclass
class SessionSplit:
    base_classes: list[int]
    sessions: list[list[int]]
    shots: int
    train_idx: dict[int, np.ndarray]
    test_idx: dict[int, np.ndarray]

    @property
    def n_sessions(self) -> int:
        return len(self.sessions)

    def classes_up_to(self, k: int) -> list[int]:
        out = list(self.base_classes)
        for s in self.sessions[:k]:
            out += s
        return out

    def session_classes(self, k: int) -> list[int]:
        return list(self.base_classes) if k == 0 else list(self.sessions[k - 1])


@dataclass
class SessionReport:
    session: int
    overall_acc: float
    base_acc: float
    novel_acc: float | None
    n_classes: int
    n_test: int
    correct: dict[int, int] = field(default_factory=dict)
    total: dict[int, int] = field(default_factory=dict)


@dataclass
class TrainConfig:
    loss_mode: str = "baseline"
    nm_spec: MarginSpec = field(default_factory=MarginSpec)
    pm_spec: MarginSpec = field(default_factory=MarginSpec)
    epochs: int = 100
    batch_size: int = 64
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(decay_epochs=[60, 70]))
    seed: int = 0
    base_prototypes: bool = True

    def __post_init__(self) -> None:
        if self.loss_mode not in LOSS_MODES:
            raise ContractError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ContractError("epochs must be >= 0 and batch_size >= 2")

    @property
    def dual(self) -> bool:
        return self.loss_mode in DUAL_MODES


def split_sessions(
    train_labels,
    base_count: int,
    session_count: int,
    classes_per_session: int,
    shots: int,
    seed: int,
    test_labels=None,
) -> SessionSplit:
    """Base classes are the ``base_count`` lowest class ids; the seed assigns
    the remaining classes to sessions and picks their few-shot samples."""
    y = np.asarray(train_labels).reshape(-1)
    classes = sorted(int(c) for c in np.unique(y))
    need = base_count + session_count * classes_per_session
    if base_count < 1 or session_count < 0 or classes_per_session < 1 or shots < 1:
        raise SplitError("base_count, classes_per_session and shots must be positive")
    if need > len(classes):
        raise SplitError(f"split needs {need} classes, dataset has {len(classes)}")
    base = classes[:base_count]
    rng = make_rng(seed, "split")
    pool = np.array(classes[base_count:])
    novel = [int(c) for c in rng.permutation(pool)[: session_count * classes_per_session]]
    sessions = [sorted(novel[i * classes_per_session:(i + 1) * classes_per_session])
                for i in range(session_count)]
    train_idx = {c: np.flatnonzero(y == c) for c in base}
    for c in sorted(novel):
        idx = np.flatnonzero(y == c)
        if idx.size < shots:
            raise SplitError(f"class {c} has {idx.size} training samples, needs {shots}")
        train_idx[c] = np.sort(make_rng(seed, "shots", c).choice(idx, size=shots, replace=False))
    test_idx = {}
    if test_labels is not None:
        ty = np.asarray(test_labels).reshape(-1)
        test_idx = {c: np.flatnonzero(ty == c) for c in base + sorted(novel)}
    return SessionSplit(base, sessions, shots, train_idx, test_idx)


def session_train_data(ds: Dataset, split: SessionSplit, k: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.concatenate([split.train_idx[c] for c in split.session_classes(k)])
    return ds.train_x[idx], ds.train_y[idx]


def eval_data_up_to(ds: Dataset, split: SessionSplit, k: int) -> tuple[np.ndarray, np.ndarray]:
    if not split.test_idx:
        raise SplitError("split was built without test labels")
    idx = np.concatenate([split.test_idx[c] for c in split.classes_up_to(k)])
    return ds.test_x[idx], ds.test_y[idx]


# ---------------------------------------------------------------- training


def training_loss(state: ModelState, xb: Tensor, yb: np.ndarray, cfg: TrainConfig) -> Tensor:
    """Objective selected by ``cfg.loss_mode`` on one batch (train-mode forward)."""
    f = forward_nm(state, xb, "train")
    f_logits = cosine_logits(f, state.classifier_nm())
    if not cfg.dual:
        return fixed_margin_ce(f_logits, yb, cfg.nm_spec.m_ave, cfg.nm_spec.tau)
    F = forward_pm(state, f, "train")
    F_logits = cosine_logits(F, state.classifier_pm())
    if cfg.loss_mode == "nm_pm":
        return nm_pm_loss(f_logits, F_logits, yb, cfg.nm_spec, cfg.pm_spec)
    # margins follow a detached snapshot of the current classifier weights
    A_nm = adjacency_from_weights(state.W_nm.data)
    A_pm = adjacency_from_weights(state.W_pm.data)
    return clom_loss(f_logits, F_logits, yb, A_nm, A_pm, cfg.nm_spec, cfg.pm_spec)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    out = [order[i:i + batch_size] for i in range(0, order.size, batch_size)]
    # a single-sample batch has no batch variance
    if len(out) > 1 and out[-1].size == 1:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def train_base(state: ModelState, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> tuple[ModelState, list[float]]:
    """Train on base-session data and freeze. ``y`` holds class ids.

    Returns the frozen model and the per-epoch mean batch loss.
    """
    if state.frozen:
        raise FrozenStateError("train_base needs an unfrozen model")
    if (state.head is not None) != cfg.dual:
        raise ContractError(f"loss_mode {cfg.loss_mode!r} does not match the model's branches")
    if x.shape[0] == 0:
        raise EmptyBatchError("no base-session training data")
    col = {c: i for i, c in enumerate(state.class_ids)}
    try:
        local = np.array([col[int(c)] for c in y], dtype=np.int64)
    except KeyError as exc:
        raise LabelError(f"training label {exc} is not a registered class") from None
    missing = set(state.class_ids) - set(int(c) for c in np.unique(y))
    if missing:
        raise ContractError(f"no training data for base classes {sorted(missing)}")

    opt = SGD(state.parameters(), cfg.sgd)
    rng = make_rng(cfg.seed, "shuffle")
    curve = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(rng.permutation(x.shape[0]), cfg.batch_size)):
            try:
                with Tape() as tape:
                    loss = training_loss(state, Tensor(x[idx]), local[idx], cfg)
                opt.zero_grad()
                tape.backward(loss)
                opt.step(epoch)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite value at epoch {epoch} batch {b}: {exc}") from None
            total += loss.item() * idx.size
            count += idx.size
        curve.append(total / count)
        logger.debug("epoch %d loss %.6f", epoch, curve[-1])
    if cfg.epochs == 0:
        _seed_batchnorm_stats(state, x)
    state.freeze()
    if cfg.base_prototypes:
        rebase_classifier(state, x, y)
    return state, curve


def _seed_batchnorm_stats(state: ModelState, x: np.ndarray) -> None:
    """One full-batch train-mode pass so an untrained model can run in eval mode."""
    f = forward_nm(state, Tensor(x), "train")
    if state.head is not None:
        forward_pm(state, f, "train")


def rebase_classifier(state: ModelState, x: np.ndarray, y: np.ndarray) -> ModelState:
    """Replace the trained base columns by base-class prototypes.

    The trained (unit-normalized) columns are kept on ``state.trained_nm`` /
    ``state.trained_pm`` for analysis.
    """
    f, F = embed(state, x)
    renorm = state.config.renormalize_prototypes
    ids, nm = compute_prototypes(f, y, renorm)
    if ids != sorted(state.class_ids):
        raise ContractError("base data does not cover exactly the registered classes")
    state.trained_nm, state.W_nm = state.W_nm.data.copy(), Tensor(nm.T)
    if F is not None:
        state.trained_pm, state.W_pm = state.W_pm.data.copy(), Tensor(compute_prototypes(F, y, renorm)[1].T)
    state.class_ids = ids
    return state


# ---------------------------------------------------------------- incremental sessions


def absorb_session(state: ModelState, x: np.ndarray, y: np.ndarray) -> ModelState:
    """Register the classes in ``y`` using prototypes of their few-shot samples."""
    if not state.frozen:
        raise FrozenStateError("absorb_session needs a frozen model")
    if len(y) == 0:
        return state
    f, F = embed(state, x)
    renorm = state.config.renormalize_prototypes
    ids, nm = compute_prototypes(f, y, renorm)
    pm = compute_prototypes(F, y, renorm)[1] if F is not None else None
    return extend_classifier(state, ids, nm, pm)


def evaluate_session(
    state: ModelState, x: np.ndarray, y: np.ndarray, k: int, base_classes,
) -> SessionReport:
    """Accuracy over all registered classes, split into base and novel parts."""
    registered = set(state.class_ids)
    y = np.asarray(y).reshape(-1)
    unknown = set(int(c) for c in np.unique(y)) - registered
    if unknown:
        raise LabelError(f"test samples from unregistered classes {sorted(unknown)}")
    pred = predict(state, x) if len(y) else np.zeros(0, dtype=np.int64)
    hit = pred == y
    base_set = set(int(c) for c in base_classes)
    correct, total = {}, {}
    for c in sorted(registered):
        mask = y == c
        correct[c] = int(hit[mask].sum())
        total[c] = int(mask.sum())
    base_c = sum(correct[c] for c in correct if c in base_set)
    base_n = sum(total[c] for c in total if c in base_set)
    nov_c = sum(correct[c] for c in correct if c not in base_set)
    nov_n = sum(total[c] for c in total if c not in base_set)
    n = base_n + nov_n
    return SessionReport(
        session=k,
        overall_acc=(base_c + nov_c) / n if n else 0.0,
        base_acc=base_c / base_n if base_n else 0.0,
        novel_acc=nov_c / nov_n if nov_n else None,
        n_classes=len(registered),
        n_test=n,
        correct=correct,
        total=total,
    )


@dataclass
class ProtocolResult:
    reports: list[SessionReport]
    state: ModelState
    loss_curve: list[float]


def build_model(ds: Dataset, split: SessionSplit, model_cfg: ModelConfig, cfg: TrainConfig) -> ModelState:
    if model_cfg.dual != cfg.dual:
        model_cfg = replace(model_cfg, dual=cfg.dual)
    return init_model(model_cfg, split.base_classes, cfg.seed)


def run_protocol(ds: Dataset, split: SessionSplit, model_cfg: ModelConfig, cfg: TrainConfig) -> ProtocolResult:
    """Train on the base session, then absorb and evaluate each incremental session."""
    state = build_model(ds, split, model_cfg, cfg)
    bx, by = session_train_data(ds, split, 0)
    state, curve = train_base(state, bx, by, cfg)
    reports = [evaluate_session(state, *eval_data_up_to(ds, split, 0), 0, split.base_classes)]
    for k in range(1, split.n_sessions + 1):
        state = absorb_session(state, *session_train_data(ds, split, k))
        reports.append(evaluate_session(state, *eval_data_up_to(ds, split, k), k, split.base_classes))
    return ProtocolResult(reports, state, curve)
