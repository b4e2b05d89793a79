"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(fn(*[Tensor(a) for a in arrays]))
            flat[i] = orig - eps
            fm = _scalar(fn(*[Tensor(a) for a in arrays]))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if out.size != 1:
        raise ValueError(f"gradient check needs a scalar closure, got shape {out.shape}")
    out.backward()
    return [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max over all input entries of ``|analytic - numeric| / max(|numeric|, 1e-8)``.

    ``fn`` maps Tensors to a scalar Tensor; ``inputs`` should be float64.
    """
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in inputs]
    ana = analytic_grad(fn, arrays)
    num = numeric_grad(fn, arrays, eps)
    worst = 0.0
    for a, n in zip(ana, num):
        rel = np.abs(a - n) / np.maximum(np.abs(n), 1e-8)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


def _scalar(t: Tensor) -> float:
    return float(np.asarray(t.data).reshape(-1)[0])
