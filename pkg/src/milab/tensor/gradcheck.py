"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the inputs to a scalar tensor. Every element of every input is
    perturbed. Relative error is |a - n| / max(|a|, |n|, 1e-12).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    for t in leaves:
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check inputs must be finite")
    with Tape() as tape:
        out = fn(*leaves)
    if not out.requires_grad:
        return 0.0
    analytic = tape.gradient(out, leaves)

    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        a_flat = a.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*leaves).item()
            flat[i] = orig - step
            lo = fn(*leaves).item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * step)
            denom = max(abs(a_flat[i]), abs(num), 1e-12)
            worst = max(worst, abs(a_flat[i] - num) / denom)
    return worst
