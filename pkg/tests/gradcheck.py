"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from clom.numcore import Tape, Tensor, finite_difference_grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def grad_pairs(loss_fn, tensors, h=1e-5):
    """(analytic, numeric) gradient pairs for each tensor."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    out = []
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        out.append((analytic, finite_difference_grad(lambda _: loss_fn(), t, h)))
    return out


def check_grads(loss_fn, tensors, h=1e-5):
    """Largest relative error between tape gradients and central differences.

    ``loss_fn()`` must build a scalar Tensor from ``tensors`` (closed over).
    """
    return max(rel_error(a, n) for a, n in grad_pairs(loss_fn, tensors, h))


def randn(rng, *shape):
    return Tensor(rng.standard_normal(shape))
