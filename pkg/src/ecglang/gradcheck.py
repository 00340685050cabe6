"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


class NondeterministicError(RuntimeError):
    pass


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_coords: int = 20, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is re-evaluated with each sampled coordinate nudged by ``±h``.  The
    error for a coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    Parameters must be 64-bit.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step {h} outside [1e-6, 1e-4]")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, got {p.dtype} for {p.name!r}")

    first = f()
    again = f()
    if not np.array_equal(first.data, again.data):
        raise NondeterministicError("f returned different values on identical inputs")

    for p in params:
        p.grad = None
    loss = f()
    grads = backward(loss, params)
    analytic = [np.array(grads[p], dtype=np.float64) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(n, max_coords), replace=False) if n > max_coords else range(n)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = float(f().data)
            flat[c] = orig - h
            down = float(f().data)
            flat[c] = orig
            num = (up - down) / (2 * h)
            err = abs(ga.reshape(-1)[c] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
