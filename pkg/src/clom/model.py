"""Backbone/head network with dual cosine classifiers and prototype extension."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    ContractError,
    DimensionError,
    DuplicateClassError,
    FrozenStateError,
)
from .numcore import (
    NORM_FLOOR,
    BatchNormStats,
    Tensor,
    batchnorm,
    concat,
    dense,
    he_normal,
    l2_normalize,
    make_rng,
    relu,
    tanh,
)

_ACTIVATIONS = {"relu": relu, "tanh": tanh, "none": None}


@dataclass
class ModelConfig:
    """Network shape.

    ``hidden`` lists the widths of the backbone's hidden layers; the backbone
    ends in a layer of width ``d``. The head maps ``d -> d_pm``. With
    ``dual=False`` the head and its classifier are omitted (plain baseline).
    """

    in_dim: int
    hidden: list[int] = field(default_factory=lambda: [64])
    d: int = 32
    d_pm: int = 128
    dual: bool = True
    batchnorm: bool = True
    final_activation: str = "relu"
    head_activation: str = "relu"
    renormalize_prototypes: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.in_dim <= 0 or self.d <= 0 or self.d_pm <= 0 or any(h <= 0 for h in self.hidden):
            raise ContractError("layer widths must be positive")
        for act in (self.final_activation, self.head_activation):
            if act not in _ACTIVATIONS:
                raise ContractError(f"unknown activation {act!r}")


@dataclass
class Layer:
    W: Tensor
    b: Tensor
    activation: str
    gamma: Tensor | None = None
    beta: Tensor | None = None
    stats: BatchNormStats | None = None

    def params(self) -> list[Tensor]:
        out = [self.W, self.b]
        if self.gamma is not None:
            out += [self.gamma, self.beta]
        return out

    def __call__(self, x: Tensor, mode: str, eps: float, momentum: float) -> Tensor:
        h = dense(x, self.W, self.b)
        if self.gamma is not None:
            h = batchnorm(h, self.gamma, self.beta, self.stats, mode, eps, momentum)
        act = _ACTIVATIONS[self.activation]
        return act(h) if act is not None else h


def _make_layer(rng: np.random.Generator, fan_in: int, fan_out: int, use_bn: bool, activation: str) -> Layer:
    layer = Layer(
        W=Tensor(he_normal(rng, fan_in, fan_out), requires_grad=True),
        b=Tensor(np.zeros((1, fan_out)), requires_grad=True),
        activation=activation,
    )
    if use_bn:
        layer.gamma = Tensor(np.ones((1, fan_out)), requires_grad=True)
        layer.beta = Tensor(np.zeros((1, fan_out)), requires_grad=True)
        layer.stats = BatchNormStats.fresh(fan_out)
    return layer


@dataclass
class ModelState:
    config: ModelConfig
    backbone: list[Layer]
    head: Layer | None
    W_nm: Tensor
    W_pm: Tensor | None
    class_ids: list[int]
    frozen: bool = False
    trained_nm: np.ndarray | None = None
    trained_pm: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def parameters(self) -> list[Tensor]:
        out = [p for layer in self.backbone for p in layer.params()]
        if self.head is not None:
            out += self.head.params()
        out.append(self.W_nm)
        if self.W_pm is not None:
            out.append(self.W_pm)
        return out

    def feature_parameters(self) -> list[Tensor]:
        """Backbone and head parameters (everything except the classifiers)."""
        out = [p for layer in self.backbone for p in layer.params()]
        if self.head is not None:
            out += self.head.params()
        return out

    def classifier_nm(self) -> Tensor:
        return l2_normalize(self.W_nm, axis=0)

    def classifier_pm(self) -> Tensor:
        return l2_normalize(self.W_pm, axis=0)

    def freeze(self) -> None:
        """Stop training: normalize classifier columns and drop grad tracking."""
        self.W_nm = Tensor(_unit_columns(self.W_nm.data))
        if self.W_pm is not None:
            self.W_pm = Tensor(_unit_columns(self.W_pm.data))
        for p in self.feature_parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True


def _unit_columns(W: np.ndarray) -> np.ndarray:
    return W / np.sqrt((W * W).sum(axis=0, keepdims=True))


def init_model(config: ModelConfig, class_ids, seed: int) -> ModelState:
    """Randomly initialize a network whose classifiers cover ``class_ids``."""
    class_ids = [int(c) for c in class_ids]
    if len(set(class_ids)) != len(class_ids):
        raise DuplicateClassError("class ids must be unique")
    widths = [config.in_dim, *config.hidden, config.d]
    backbone = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        act = config.final_activation if i == len(widths) - 2 else "relu"
        backbone.append(_make_layer(make_rng(seed, "backbone", i), a, b, config.batchnorm, act))
    N = len(class_ids)
    W_nm = Tensor(make_rng(seed, "classifier_nm").standard_normal((config.d, N)), requires_grad=True)
    head = W_pm = None
    if config.dual:
        head = _make_layer(make_rng(seed, "head"), config.d, config.d_pm, config.batchnorm, config.head_activation)
        W_pm = Tensor(make_rng(seed, "classifier_pm").standard_normal((config.d_pm, N)), requires_grad=True)
    return ModelState(config, backbone, head, W_nm, W_pm, class_ids)


def _mode(state: ModelState, mode: str | None) -> str:
    return mode if mode is not None else ("eval" if state.frozen else "train")


def backbone_activations(state: ModelState, x: Tensor, mode: str | None = None) -> list[Tensor]:
    """Post-activation output of every backbone layer, before normalization."""
    if x.cols != state.config.in_dim:
        raise DimensionError(f"input width {x.cols} != model input width {state.config.in_dim}")
    mode = _mode(state, mode)
    outs = []
    h = x
    for layer in state.backbone:
        h = layer(h, mode, state.config.bn_eps, state.config.bn_momentum)
        outs.append(h)
    return outs


def forward_nm(state: ModelState, x: Tensor, mode: str | None = None) -> Tensor:
    """Unit-norm backbone feature f(x)."""
    return l2_normalize(backbone_activations(state, x, mode)[-1])


def forward_pm(state: ModelState, f_feat: Tensor, mode: str | None = None) -> Tensor:
    """Unit-norm head feature F(x) = g(f(x))."""
    if state.head is None:
        raise ContractError("model was built without a head branch")
    mode = _mode(state, mode)
    return l2_normalize(state.head(f_feat, mode, state.config.bn_eps, state.config.bn_momentum))


def concat_embedding(f_feat: Tensor, F_feat: Tensor) -> Tensor:
    return concat(f_feat, F_feat)


def embed(state: ModelState, x: np.ndarray | Tensor) -> tuple[np.ndarray, np.ndarray | None]:
    """Eval-mode (f, F) features as arrays; F is None for single-branch models."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    f = forward_nm(state, xt, "eval")
    F = forward_pm(state, f, "eval") if state.head is not None else None
    return f.data, (F.data if F is not None else None)


def compute_prototypes(features, labels, renormalize: bool = True) -> tuple[list[int], np.ndarray]:
    """Per-class mean feature, one row per class in ascending class id order."""
    F = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != F.shape[0]:
        raise DimensionError("features and labels disagree on sample count")
    ids = sorted(int(c) for c in np.unique(y))
    protos = np.zeros((len(ids), F.shape[1]))
    for i, c in enumerate(ids):
        protos[i] = F[y == c].mean(axis=0)
    if renormalize and ids:
        norms = np.sqrt((protos * protos).sum(axis=1, keepdims=True))
        if (norms <= NORM_FLOOR).any():
            raise ContractError("a class prototype averaged to zero")
        protos = protos / norms
    return ids, protos


def extend_classifier(state: ModelState, class_ids, nm_protos: np.ndarray, pm_protos: np.ndarray | None) -> ModelState:
    """Append prototype columns for new classes to both classifiers (in place)."""
    if not state.frozen:
        raise FrozenStateError("classifiers are only extended on a frozen model")
    class_ids = [int(c) for c in class_ids]
    if not class_ids:
        return state
    clash = set(class_ids) & set(state.class_ids)
    if clash or len(set(class_ids)) != len(class_ids):
        raise DuplicateClassError(f"class ids already registered: {sorted(clash)}")
    nm = np.asarray(nm_protos, dtype=np.float64)
    if nm.shape != (len(class_ids), state.config.d):
        raise DimensionError(f"NM prototypes have shape {nm.shape}")
    state.W_nm = Tensor(np.concatenate([state.W_nm.data, nm.T], axis=1))
    if state.W_pm is not None:
        pm = np.asarray(pm_protos, dtype=np.float64)
        if pm.shape != (len(class_ids), state.config.d_pm):
            raise DimensionError(f"PM prototypes have shape {pm.shape}")
        state.W_pm = Tensor(np.concatenate([state.W_pm.data, pm.T], axis=1))
    state.class_ids = state.class_ids + class_ids
    return state


def class_scores(state: ModelState, x) -> np.ndarray:
    """Dot product of the concatenated embedding with concatenated class columns.

    Equals the NM cosine plus the PM cosine for every (sample, class) pair.
    """
    f, F = embed(state, x)
    scores = f @ _unit_columns(state.W_nm.data)
    if F is not None:
        scores = scores + F @ _unit_columns(state.W_pm.data)
    return scores


def predict(state: ModelState, x) -> np.ndarray:
    """Highest-scoring class id per sample; exact ties go to the lower class id."""
    scores = class_scores(state, x)
    order = np.argsort(state.class_ids, kind="stable")
    ids = np.asarray(state.class_ids)[order]
    return ids[np.argmax(scores[:, order], axis=1)]


# ---------------------------------------------------------------- checkpoint

MAGIC = b"CLOM"
FORMAT_VERSION = 1
_ACT_CODES = {"none": 0.0, "relu": 1.0, "tanh": 2.0}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def state_tensors(state: ModelState) -> dict[str, np.ndarray]:
    """Every array needed to rebuild ``state``, keyed by a stable name."""
    c = state.config
    out: dict[str, np.ndarray] = {
        "meta.shape": np.array([[c.in_dim, c.d, c.d_pm, len(c.hidden)]], dtype=np.float64),
        "meta.hidden": np.array([c.hidden], dtype=np.float64).reshape(1, -1),
        "meta.flags": np.array([[
            float(c.dual), float(c.batchnorm), _ACT_CODES[c.final_activation],
            _ACT_CODES[c.head_activation], float(c.renormalize_prototypes), float(state.frozen),
        ]]),
        "meta.bn": np.array([[c.bn_eps, c.bn_momentum]]),
        "meta.class_ids": np.array([state.class_ids], dtype=np.float64).reshape(1, -1),
    }
    layers = [(f"backbone.{i}", l) for i, l in enumerate(state.backbone)]
    if state.head is not None:
        layers.append(("head", state.head))
    for prefix, layer in layers:
        out[f"{prefix}.W"] = layer.W.data
        out[f"{prefix}.b"] = layer.b.data
        if layer.gamma is not None:
            out[f"{prefix}.gamma"] = layer.gamma.data
            out[f"{prefix}.beta"] = layer.beta.data
            out[f"{prefix}.running_mean"] = layer.stats.mean
            out[f"{prefix}.running_var"] = layer.stats.var
            out[f"{prefix}.populated"] = np.array([[float(layer.stats.populated)]])
    out["W_nm"] = state.W_nm.data
    if state.W_pm is not None:
        out["W_pm"] = state.W_pm.data
    if state.trained_nm is not None:
        out["trained_nm"] = state.trained_nm
    if state.trained_pm is not None:
        out["trained_pm"] = state.trained_pm
    return out


def save_checkpoint(state: ModelState, path) -> None:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in state_tensors(state).items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        rows, cols = arr.shape
        key = name.encode()
        chunks.append(struct.pack("<I", len(key)) + key + struct.pack("<II", rows, cols))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos, out = 8, {}
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise CheckpointError(f"{path}: truncated record header")
        (klen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + klen + 8 > len(buf):
            raise CheckpointError(f"{path}: truncated record header")
        name = buf[pos:pos + klen].decode()
        pos += klen
        rows, cols = struct.unpack_from("<II", buf, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += nbytes
    return out


def load_checkpoint(path) -> ModelState:
    t = read_checkpoint_tensors(path)
    try:
        in_dim, d, d_pm, n_hidden = (int(v) for v in t["meta.shape"][0])
        hidden = [int(v) for v in t["meta.hidden"][0][:n_hidden]]
        dual, bn, fact, hact, renorm, frozen = t["meta.flags"][0]
        eps, momentum = t["meta.bn"][0]
        config = ModelConfig(
            in_dim=in_dim, hidden=hidden, d=d, d_pm=d_pm, dual=bool(dual), batchnorm=bool(bn),
            final_activation=_ACT_NAMES[fact], head_activation=_ACT_NAMES[hact],
            renormalize_prototypes=bool(renorm), bn_eps=float(eps), bn_momentum=float(momentum),
        )
        widths = [in_dim, *hidden, d]

        def layer(prefix: str, activation: str) -> Layer:
            lay = Layer(Tensor(t[f"{prefix}.W"]), Tensor(t[f"{prefix}.b"]), activation)
            if config.batchnorm:
                lay.gamma = Tensor(t[f"{prefix}.gamma"])
                lay.beta = Tensor(t[f"{prefix}.beta"])
                lay.stats = BatchNormStats(t[f"{prefix}.running_mean"], t[f"{prefix}.running_var"],
                                           bool(t[f"{prefix}.populated"][0, 0]))
            return lay

        backbone = [
            layer(f"backbone.{i}", config.final_activation if i == len(widths) - 2 else "relu")
            for i in range(len(widths) - 1)
        ]
        head = layer("head", config.head_activation) if config.dual else None
        state = ModelState(
            config, backbone, head, Tensor(t["W_nm"]), Tensor(t["W_pm"]) if config.dual else None,
            [int(c) for c in t["meta.class_ids"][0]] if t["meta.class_ids"].size else [],
            bool(frozen),
            t.get("trained_nm"),
            t.get("trained_pm"),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing tensor {exc}") from None
    if not state.frozen:
        for p in state.parameters():
            p.requires_grad = True
    return state
