"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, default_dtype


def numerical_grad(fn: Callable[[Sequence[np.ndarray]], float], inputs: Sequence[np.ndarray],
                   index: int, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. ``inputs[index]``, evaluated in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(arrays)
        flat[i] = orig - h
        down = fn(arrays)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op(build: Callable[..., Tensor], inputs: Sequence[np.ndarray], dtype=np.float64,
             h: float = 1e-6, seed: int = 0) -> list:
    """Compare analytic gradients of ``build`` against finite differences.

    ``build`` maps input tensors to an output tensor; the checked scalar is
    ``sum(output * R)`` for a fixed random projection ``R``. The analytic side
    runs in ``dtype``; the finite-difference side always runs in float64.

    Returns:
        One relative error per input.
    """
    with default_dtype(np.float64):
        probe = build(*[Tensor(a) for a in inputs])
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(arrays):
        with default_dtype(np.float64):
            out = build(*[Tensor(a) for a in arrays])
        return float(np.sum(out.data * proj))

    with default_dtype(dtype):
        tensors = [Tensor(a, requires_grad=True) for a in inputs]
        out = build(*tensors)
        out.backward(proj.astype(out.dtype))
    errors = []
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        errors.append(relative_error(analytic, numerical_grad(scalar, [t.data for t in tensors], i, h)))
    return errors
