"""Central finite-difference oracle for the analytic backward rules."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward

__all__ = ["grad_check", "numeric_grad"]


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                 indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of a scalar-valued tensor function at `x`.

    Perturbs `x.data` in place (restoring it) and re-runs `f` without a tape,
    so `f` must rebuild its graph from `x` on every call. When `indices` is
    given only those elements are estimated; the rest stay zero.
    """
    flat = x.data.reshape(-1)
    num = np.zeros_like(flat)
    if indices is None:
        idx = range(flat.size)
    else:
        idx = [np.ravel_multi_index(i, x.data.shape) for i in indices]
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = f(x).item()
        flat[i] = orig - h
        down = f(x).item()
        flat[i] = orig
        num[i] = (up - down) / (2.0 * h)
    return num.reshape(x.data.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               sample: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per element is |analytic - numeric| / max(1, |analytic|).
    With `sample` set, only that many randomly chosen elements of `x` are
    checked (the full analytic gradient is still computed).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            tape.watch(x)
            y = f(x)
            backward(y, tape)
        analytic = x.grad.copy()
    finally:
        x.requires_grad = was
    if sample is not None and sample < x.data.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = rng.choice(x.data.size, size=sample, replace=False)
        indices = [np.unravel_index(int(i), x.data.shape) for i in chosen]
    else:
        indices = None
    numeric = numeric_grad(f, x, h=h, indices=indices)
    if indices is not None:
        mask = np.zeros(x.data.shape, dtype=bool)
        for i in indices:
            mask[i] = True
        diff = np.abs(analytic - numeric)[mask]
        denom = np.maximum(1.0, np.abs(analytic))[mask]
    else:
        diff = np.abs(analytic - numeric)
        denom = np.maximum(1.0, np.abs(analytic))
    return float((diff / denom).max())
