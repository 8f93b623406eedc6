"""Central finite-difference gradient checking."""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               max_elements: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the input tensors to a scalar tensor. The error per element is
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``. With ``max_elements`` only a
    seeded random subset of each input's entries is probed. Returns ``inf`` if
    ``f`` produces a non-finite value anywhere.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        return math.inf
    tape.backward(out)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f(*inputs).data)
            flat[k] = orig - h
            fm = float(f(*inputs).data)
            flat[k] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return math.inf
            g_fd = (fp - fm) / (2.0 * h)
            ga = float(g_ad.reshape(-1)[k])
            err = abs(ga - g_fd) / max(1e-8, abs(ga) + abs(g_fd))
            worst = max(worst, err)
    return worst
