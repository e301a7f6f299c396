import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clom import numcore as nc
from clom.errors import (
    ContractError,
    DegenerateNormError,
    DimensionError,
    EmptyBatchError,
    NonFiniteError,
)
from clom.numcore import BatchNormStats, SgdConfig, Tape, Tensor

from gradcheck import check_grads, randn

TOL = 1e-6


def project(out, rng):
    """Reduce a matrix output to a scalar through a fixed random weighting."""
    R = Tensor(rng.standard_normal(out.shape))
    return nc.sum_all(nc.mul(out, R))


# ---------------------------------------------------------------- tensor basics


def test_tensor_is_float64_rank2():
    t = Tensor([1, 2, 3])
    assert t.shape == (1, 3)
    assert t.data.dtype == np.float64
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 2, 2)))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([[np.nan]])


def test_ops_outside_tape_record_nothing():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    y = nc.mul(x, x)
    assert np.array_equal(y.data, [[1.0, 4.0]])
    with Tape() as tape:
        nc.mul(x, x)
    assert len(tape) == 1


def test_backward_of_square():
    x = Tensor([[3.0]], requires_grad=True)
    with Tape() as tape:
        loss = nc.sum_all(nc.mul(x, x))
    tape.backward(loss)
    assert x.grad[0, 0] == 6.0


def test_backward_needs_scalar_and_runs_once():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = nc.relu(x)
    with pytest.raises(ContractError):
        tape.backward(y)
    with Tape() as tape:
        loss = nc.sum_all(x)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_shared_input_accumulates():
    x = Tensor([[2.0, -1.0]], requires_grad=True)
    with Tape() as tape:
        loss = nc.sum_all(nc.add(nc.mul(x, x), nc.scale(x, 3.0)))
    tape.backward(loss)
    assert np.allclose(x.grad, 2 * x.data + 3)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.filterwarnings("ignore:overflow")
def test_overflow_raises_non_finite():
    with pytest.raises(NonFiniteError):
        nc.mul(Tensor([[1e200]]), Tensor([[1e200]]))


# ---------------------------------------------------------------- gradients


def _instances(n=100):
    return [np.random.default_rng(1000 + i) for i in range(n)]


class _Fixed:
    """Replays the same normal draws, so projections agree across evaluations."""

    def __init__(self, seed):
        self.seed = seed

    def standard_normal(self, shape):
        return np.random.default_rng(self.seed).standard_normal(shape)


UNARY = {"scale": lambda a: nc.scale(a, -1.7), "relu": nc.relu, "tanh": nc.tanh, "transpose": nc.transpose}
BINARY = {"add": nc.add, "sub": nc.sub, "mul": nc.mul, "concat": nc.concat}


@pytest.mark.parametrize("name", sorted(UNARY) + sorted(BINARY) + ["add_row", "matmul", "sum_all", "mean_all"])
def test_elementwise_and_linear_grads(name):
    worst = 0.0
    for rng in _instances():
        a, b = randn(rng, 3, 4), randn(rng, 3, 4)
        fixed = _Fixed(int(rng.integers(1 << 31)))
        if name in UNARY:
            fn, inputs = (lambda: project(UNARY[name](a), fixed)), [a]
        elif name in BINARY:
            fn, inputs = (lambda: project(BINARY[name](a, b), fixed)), [a, b]
        elif name == "add_row":
            row = randn(rng, 1, 4)
            fn, inputs = (lambda: project(nc.add(a, row), fixed)), [a, row]
        elif name == "matmul":
            m = randn(rng, 4, 2)
            fn, inputs = (lambda: project(nc.matmul(a, m), fixed)), [a, m]
        else:
            reduce = nc.sum_all if name == "sum_all" else nc.mean_all
            fn, inputs = (lambda: reduce(nc.mul(a, b))), [a, b]
        worst = max(worst, check_grads(fn, inputs))
    assert worst < TOL


def test_dense_grads():
    worst = 0.0
    for rng in _instances():
        x, W, b = randn(rng, 5, 3), randn(rng, 3, 4), randn(rng, 1, 4)
        fixed = _Fixed(int(rng.integers(1 << 31)))
        worst = max(worst, check_grads(lambda: project(nc.dense(x, W, b), fixed), [x, W, b]))
    assert worst < TOL


def test_l2_normalize_grads():
    worst = 0.0
    for rng in _instances():
        v = randn(rng, 4, 5)
        fixed = _Fixed(int(rng.integers(1 << 31)))
        worst = max(worst, check_grads(lambda: project(nc.l2_normalize(v), fixed), [v]))
    assert worst < TOL


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_grads(mode):
    worst = 0.0
    for rng in _instances():
        x = randn(rng, 6, 3)
        gamma = Tensor(1.0 + 0.3 * rng.standard_normal((1, 3)))
        beta = randn(rng, 1, 3)
        stats = BatchNormStats(rng.standard_normal((1, 3)), 0.5 + rng.random((1, 3)), True)
        fixed = _Fixed(int(rng.integers(1 << 31)))
        worst = max(worst, check_grads(lambda: project(nc.batchnorm(x, gamma, beta, stats, mode), fixed),
                                       [x, gamma, beta]))
    assert worst < TOL


# ---------------------------------------------------------------- l2 normalize


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
def test_l2_rows_have_unit_norm(a):
    if (np.linalg.norm(a, axis=1) < 1e-6).any():
        return
    out = nc.l2_normalize(Tensor(a))
    assert np.allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)


def test_l2_zero_row_raises():
    with pytest.raises(DegenerateNormError):
        nc.l2_normalize(Tensor([[0.0, 0.0], [1.0, 0.0]]))


def test_l2_scale_invariant():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((4, 6))
    assert np.allclose(nc.l2_normalize(Tensor(v)).data, nc.l2_normalize(Tensor(7.5 * v)).data, atol=1e-15)


# ---------------------------------------------------------------- batchnorm


def test_batchnorm_train_standardizes():
    rng = np.random.default_rng(0)
    x = Tensor(3.0 + 2.0 * rng.standard_normal((64, 5)))
    stats = BatchNormStats.fresh(5)
    y = nc.batchnorm(x, Tensor(np.ones((1, 5))), Tensor(np.zeros((1, 5))), stats, "train")
    assert np.allclose(y.data.mean(axis=0), 0.0, atol=1e-12)
    # biased variance, so the standardized output has variance var / (var + eps)
    var = x.data.var(axis=0)
    assert np.allclose(y.data.var(axis=0), var / (var + 1e-5), atol=1e-12)


def test_batchnorm_running_stats():
    x1 = Tensor([[0.0], [2.0]])
    x2 = Tensor([[4.0], [8.0]])
    g, b = Tensor([[1.0]]), Tensor([[0.0]])
    stats = BatchNormStats.fresh(1)
    nc.batchnorm(x1, g, b, stats, "train", momentum=0.9)
    assert stats.mean[0, 0] == 1.0 and stats.var[0, 0] == 1.0
    nc.batchnorm(x2, g, b, stats, "train", momentum=0.9)
    assert np.isclose(stats.mean[0, 0], 0.9 * 1.0 + 0.1 * 6.0)
    assert np.isclose(stats.var[0, 0], 0.9 * 1.0 + 0.1 * 4.0)


def test_batchnorm_eval_needs_stats_and_empty_batch_fails():
    g, b = Tensor([[1.0]]), Tensor([[0.0]])
    with pytest.raises(ContractError):
        nc.batchnorm(Tensor([[1.0]]), g, b, BatchNormStats.fresh(1), "eval")
    with pytest.raises(EmptyBatchError):
        nc.batchnorm(Tensor(np.zeros((0, 1))), g, b, BatchNormStats.fresh(1), "train")


def test_batchnorm_constant_column_is_finite():
    x = Tensor(np.ones((4, 2)))
    y = nc.batchnorm(x, Tensor([[1.0, 1.0]]), Tensor([[0.5, -0.5]]), BatchNormStats.fresh(2), "train")
    assert np.allclose(y.data, [[0.5, -0.5]] * 4)


# ---------------------------------------------------------------- SGD


def test_lr_schedule():
    cfg = SgdConfig(learning_rate=0.1, decay_epochs=[60, 70], decay_factor=0.1)
    assert nc.lr_at(cfg, 0) == 0.1
    assert np.isclose(nc.lr_at(cfg, 59), 0.1)
    assert np.isclose(nc.lr_at(cfg, 65), 0.01)
    assert np.isclose(nc.lr_at(cfg, 70), 0.001)


def test_sgd_momentum_and_weight_decay_by_hand():
    p = np.array([[1.0]])
    state = [None]
    cfg = SgdConfig(learning_rate=0.5, momentum=0.9, weight_decay=0.1)
    nc.sgd_step([p], [np.array([[2.0]])], state, cfg, 0)
    # v = 2 + 0.1 * 1 = 2.1 ; p = 1 - 0.5 * 2.1
    assert np.isclose(p[0, 0], -0.05)
    nc.sgd_step([p], [np.array([[0.0]])], state, cfg, 0)
    v = 0.9 * 2.1 + 0.1 * -0.05
    assert np.isclose(p[0, 0], -0.05 - 0.5 * v)


def test_sgd_minimizes_quadratic():
    w = Tensor(np.array([[5.0, -3.0]]), requires_grad=True)
    opt = nc.SGD([w], SgdConfig(learning_rate=0.1, momentum=0.5, weight_decay=0.0))
    for _ in range(200):
        with Tape() as tape:
            loss = nc.sum_all(nc.mul(w, w))
        opt.zero_grad()
        tape.backward(loss)
        opt.step(0)
    assert np.abs(w.data).max() < 1e-8


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"momentum": 1.0}, {"weight_decay": -1},
                                    {"decay_factor": 0}, {"decay_epochs": [5, 5]}])
def test_sgd_config_rejects(kwargs):
    with pytest.raises(ContractError):
        SgdConfig(**kwargs)


# ---------------------------------------------------------------- finite differences and RNG


def test_finite_difference_restores_input():
    x = Tensor([[0.3, -0.7]])
    before = x.data.copy()
    g = nc.finite_difference_grad(lambda t: float((t.data**3).sum()), x)
    assert np.array_equal(x.data, before)
    assert np.allclose(g, 3 * before**2, atol=1e-8)


def test_make_rng_streams():
    a = nc.make_rng(7, "x", 1).standard_normal(5)
    b = nc.make_rng(7, "x", 1).standard_normal(5)
    c = nc.make_rng(7, "x", 2).standard_normal(5)
    d = nc.make_rng(8, "x", 1).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c) and not np.allclose(a, d)


def test_derive_seed_is_stable_and_distinct():
    assert nc.derive_seed(3, "cell", 0, 1) == nc.derive_seed(3, "cell", 0, 1)
    seeds = {nc.derive_seed(3, "cell", i, j) for i in range(10) for j in range(10)}
    assert len(seeds) == 100
    assert all(0 <= s < 2**63 for s in seeds)
