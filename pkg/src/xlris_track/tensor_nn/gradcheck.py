"""Central-difference gradient checking."""

import numpy as np

from .tensor import backward


def gradient_check(loss_fn, tensors, epsilon: float = 1e-4) -> float:
    """Max relative error between analytic and numeric gradients.

    ``loss_fn()`` must rebuild the graph from the current ``tensors`` values
    and return a scalar. Relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    backward(loss_fn())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn().data)
            flat[i] = orig - epsilon
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
