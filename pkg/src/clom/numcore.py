"""Dense rank-2 tensors with tape-based reverse-mode autodiff and SGD.

Everything is float64. An operation is recorded on the innermost active
:class:`Tape` when at least one of its inputs requires grad; outside a tape
the same call is a plain numpy computation.

    >>> x = Tensor([[3.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    >>> tape.backward(loss)
    >>> float(x.grad[0, 0])
    6.0
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateNormError,
    DimensionError,
    EmptyBatchError,
    NonFiniteError,
)

NORM_FLOOR = 1e-12

_ACTIVE: list["Tape"] = []


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        raise DimensionError(f"tensors are rank <= 2, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    """A 2-D float64 array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _as_matrix(data)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        _check_finite(arr, op)
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), "detach")

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; consumed by a single backward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn) -> None:
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        self.nodes.append(_Node(out, inputs, fn))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by backward()")
    end = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].out is loss:
            end = i
            break
    if end is None:
        raise ContractError("loss was not produced on this tape")

    produced = {id(n.out) for n in tape.nodes[: end + 1]}
    pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes[: end + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            _check_finite(gi, "backward")
            key = id(inp)
            if key in produced:
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    tape.nodes.clear()
    tape.consumed = True


def _emit(arr: np.ndarray, op: str, inputs: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor._wrap(arr, op)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "add")
    return _emit(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "sub")
    return _emit(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(
        np.array([[x.data.sum()]]),
        "sum",
        (x,),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    return _emit(
        np.array([[x.data.mean()]]),
        "mean",
        (x,),
        lambda g: (np.full(shape, g[0, 0] / n),),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions {a.shape} x {b.shape} disagree")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` with ``b`` broadcast over rows."""
    if x.cols != W.rows:
        raise DimensionError(f"dense: input width {x.cols} != weight rows {W.rows}")
    if b.shape != (1, W.cols):
        raise DimensionError(f"dense: bias shape {b.shape} != (1, {W.cols})")
    xd, Wd = x.data, W.data
    return _emit(
        xd @ Wd + b.data,
        "dense",
        (x, W, b),
        lambda g: (g @ Wd.T, xd.T @ g, g.sum(axis=0, keepdims=True)),
    )


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two tensors with equal row counts."""
    if a.rows != b.rows:
        raise DimensionError(f"concat: row counts {a.rows} and {b.rows} differ")
    k = a.cols
    return _emit(
        np.concatenate([a.data, b.data], axis=1),
        "concat",
        (a, b),
        lambda g: (g[:, :k], g[:, k:]),
    )


def l2_normalize(v: Tensor, axis: int = 1, floor: float = NORM_FLOOR) -> Tensor:
    """Scale rows (axis=1) or columns (axis=0) to unit Euclidean norm."""
    norms = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if (norms <= floor).any():
        kind = "row" if axis == 1 else "column"
        raise DegenerateNormError(f"l2_normalize: a {kind} has norm <= {floor}")
    y = v.data / norms

    def grad(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norms,)

    return _emit(y, "l2_normalize", (v,), grad)


# ---------------------------------------------------------------- batchnorm


@dataclass
class BatchNormStats:
    """Running statistics of one batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray
    populated: bool = False

    @classmethod
    def fresh(cls, width: int) -> "BatchNormStats":
        return cls(np.zeros((1, width)), np.ones((1, width)), False)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Per-column standardization followed by an affine map.

    Train mode uses the biased batch variance and folds the batch statistics
    into ``stats`` as ``stats = momentum * stats + (1 - momentum) * batch``.
    The first train batch initializes ``stats`` directly.
    """
    n = x.rows
    if n == 0:
        raise EmptyBatchError("batchnorm on an empty batch")
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise DimensionError("batchnorm: gamma/beta must be 1 x width")
    gd = gamma.data
    if mode == "train":
        mu = x.data.mean(axis=0, keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=0, keepdims=True)
        if stats.populated:
            stats.mean = momentum * stats.mean + (1.0 - momentum) * mu
            stats.var = momentum * stats.var + (1.0 - momentum) * var
        else:
            stats.mean, stats.var, stats.populated = mu.copy(), var.copy(), True
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (x.data - mu) * inv
        _check_finite(xhat, "batchnorm")

        def grad(g):
            dxhat = g * gd
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
            return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    elif mode == "eval":
        if not stats.populated:
            raise ContractError("batchnorm eval mode before running statistics exist")
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean) * inv

        def grad(g):
            return g * gd * inv, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    else:
        raise ContractError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    return _emit(xhat * gd + beta.data, "batchnorm", (x, gamma, beta), grad)


# ---------------------------------------------------------------- optimization


@dataclass
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: list[int] = field(default_factory=list)
    decay_factor: float = 0.1

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")
        if not 0 < self.decay_factor <= 1:
            raise ContractError("decay_factor must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ContractError("decay_epochs must be strictly increasing")


def lr_at(cfg: SgdConfig, epoch: int) -> float:
    passed = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.learning_rate * cfg.decay_factor**passed


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: list[np.ndarray | None],
    cfg: SgdConfig,
    epoch: int,
) -> None:
    """In-place momentum SGD; ``state`` holds one velocity slot per parameter."""
    if not len(params) == len(grads) == len(state):
        raise DimensionError("params, grads and state lengths differ")
    lr = lr_at(cfg, epoch)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        step = g + cfg.weight_decay * p if cfg.weight_decay else g
        v = state[i]
        v = step.copy() if v is None else cfg.momentum * v + step
        state[i] = v
        p -= lr * v


class SGD:
    """Stateful wrapper around :func:`sgd_step` for a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, epoch: int) -> None:
        sgd_step([p.data for p in self.params], [p.grad for p in self.params],
                 self.state, self.cfg, epoch)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- gradient oracle


def finite_difference_grad(fn: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of ``x``.

    ``fn`` may return a float or a 1x1 Tensor. ``x.data`` is perturbed in place
    and restored afterwards.
    """
    if not h > 0:
        raise ContractError("finite difference step must be positive")

    def value() -> float:
        out = fn(x)
        return out.item() if isinstance(out, Tensor) else float(out)

    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = value()
        flat[i] = orig - h
        minus = value()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


# ---------------------------------------------------------------- randomness


def make_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Independent PCG64 stream for ``seed`` and a component path.

    Streams for different key paths are statistically independent; the same
    (seed, keys) always yields the same stream.
    """
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=spawn)))


def derive_seed(seed: int, *keys: str | int) -> int:
    """A 63-bit seed derived from ``seed`` and a key path, for independent sub-runs."""
    return int(make_rng(seed, "derive", *keys).integers(0, 2**63))


def he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
