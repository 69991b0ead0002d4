"""Central finite-difference gradient checking (run in 64-bit)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) taken over elements with any signal.

    The scale is the largest magnitude in the whole array, so entries that
    are tiny relative to the array do not dominate the error.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-4) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def grad_check(fn: Callable[..., Tensor], shapes: Sequence[tuple[int, ...]], seed: int = 0,
               h: float = 1e-4, inputs: Sequence[np.ndarray] | None = None) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` maps tensors built from ``shapes`` (unit-scale normal draws, or
    the explicit ``inputs``) to an output tensor; the scalar under test is
    ``sum(out * r)`` for a fixed random ``r`` so every output element matters.
    """
    with precision("float64"):
        rng = np.random.default_rng(seed)
        if inputs is None:
            arrays = [rng.standard_normal(s) for s in shapes]
        else:
            arrays = [np.array(a, dtype=np.float64) for a in inputs]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*tensors)
        weights = rng.standard_normal(out.shape)
        (out * Tensor(weights)).sum().backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def value() -> float:
            return float((fn(*[Tensor(a) for a in arrays]).data * weights).sum())

        worst = 0.0
        for arr, ga in zip(arrays, analytic):
            gn = numerical_grad(value, arr, h)
            worst = max(worst, relative_error(ga, gn))
        return worst
