"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np


def grad_check(fn, arrays: list[np.ndarray], eps: float = 1e-4) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn(arrays) -> (loss, grads)`` must build a fresh forward/backward from
    the given arrays and return the scalar loss plus one gradient per input
    array.  The relative error is |a - fd| / max(|a|, |fd|, 1e-8); callers
    are responsible for keeping inputs away from activation kinks.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    _, grads = fn([a.copy() for a in arrays])
    if len(grads) != len(arrays):
        raise ValueError("fn returned a gradient count different from its input count")
    worst = 0.0
    for a_idx, base in enumerate(arrays):
        grad = np.zeros_like(base) if grads[a_idx] is None else np.asarray(grads[a_idx], dtype=np.float64)
        if grad.shape != base.shape:
            raise ValueError(f"gradient {a_idx} has shape {grad.shape}, expected {base.shape}")
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus, _ = fn([a.copy() for a in arrays])
            flat[i] = orig - eps
            minus, _ = fn([a.copy() for a in arrays])
            flat[i] = orig
            fd = (plus - minus) / (2.0 * eps)
            a = grad.reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst
