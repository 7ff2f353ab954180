from __future__ import annotations

import numpy as np


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_entries(loss_fn, tensor, analytic: np.ndarray, idx, delta: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences at flat indices ``idx``."""
    worst = 0.0
    flat = tensor.data.reshape(-1)
    for i in idx:
        old = flat[i]
        flat[i] = old + delta
        up = loss_fn()
        flat[i] = old - delta
        down = loss_fn()
        flat[i] = old
        numeric = (up - down) / (2 * delta)
        worst = max(worst, rel_error(float(analytic.reshape(-1)[i]), numeric))
    return worst
