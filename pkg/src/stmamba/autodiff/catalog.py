"""Gradient-check cases for every differentiable primitive.

Each case builder takes a generator and returns ``(closure, inputs)`` where
the closure reduces the op output to a scalar with a fixed random weighting,
so no gradient entry is trivially zero.
"""
from __future__ import annotations

import numpy as np

from . import functional as F
from . import tensor as T


def _weighted(out: T.Tensor, rng: np.random.Generator) -> T.Tensor:
    w = rng.normal(size=out.shape)
    return (out * T.Tensor(w)).sum()


def _case(op, *shapes, positive=False, lo=None):
    def build(rng):
        inputs = []
        for s in shapes:
            x = rng.normal(size=s)
            if positive:
                x = np.abs(x) + 0.5
            inputs.append(x)
        wrng = np.random.default_rng(int(rng.integers(1 << 31)))
        probe = op(*[T.Tensor(a) for a in inputs])
        w = T.Tensor(wrng.normal(size=probe.shape))
        return (lambda *ts: (op(*ts) * w).sum()), inputs
    return build


def _perm_case(rng):
    x = rng.normal(size=(5, 3))
    perm = rng.permutation(5)
    w = T.Tensor(rng.normal(size=(5, 3)))
    return (lambda t: (T.scatter(T.take(t, perm, 0), perm, 0) * w).sum()), [x]


def _ce_case(rng):
    logits = rng.normal(size=(4, 6))
    labels = rng.integers(0, 6, size=4)
    onehot = np.eye(6)[labels]
    return (lambda t: -(F.log_softmax(t) * T.Tensor(onehot)).sum() / 4), [logits]


def _clip_case(rng):
    x = rng.uniform(-0.8, 0.8, size=(3, 4))
    x[np.abs(x) < 0.05] = 0.3
    x[np.abs(np.abs(x) - 0.5) < 0.05] = 0.2
    w = T.Tensor(rng.normal(size=(3, 4)))
    return (lambda t: (T.clip(t, -0.5, 0.5) * w).sum()), [x]


def _relu_case(rng):
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 0.1] = 0.5
    w = T.Tensor(rng.normal(size=(3, 4)))
    return (lambda t: (T.relu(t) * w).sum()), [x]


def _fft_mag_case(rng):
    x = rng.normal(size=(2, 6, 5))
    y = rng.normal(size=(2, 6, 5))

    def fn(a):
        d = F.fft2(a - T.Tensor(y))
        return (d * d).sum(axis=-1).sqrt().sum()
    return fn, [x]


CASES = {
    "add": _case(lambda a, b: a + b, (3, 4), (4,)),
    "sub": _case(lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": _case(lambda a, b: a * b, (2, 3, 4), (3, 4)),
    "div": _case(lambda a, b: a / b, (3, 4), (3, 4), positive=True),
    "power": _case(lambda a: a ** 3, (3, 4)),
    "exp": _case(T.exp, (3, 4)),
    "log": _case(T.log, (3, 4), positive=True),
    "sqrt": _case(T.sqrt, (3, 4), positive=True),
    "sigmoid": _case(T.sigmoid, (3, 4)),
    "tanh": _case(T.tanh, (3, 4)),
    "softplus": _case(T.softplus, (3, 4)),
    "silu": _case(T.silu, (3, 4)),
    "gelu": _case(T.gelu, (3, 4)),
    "relu": _relu_case,
    "clip": _clip_case,
    "matmul": _case(lambda a, b: a @ b, (4, 5), (5, 3)),
    "batched_matmul": _case(lambda a, b: a @ b, (2, 4, 5), (5, 3)),
    "einsum": _case(lambda a, b, c: T.einsum("bij,bjk,k->bik", a, b, c), (2, 3, 4), (2, 4, 5), (5,)),
    "einsum_reduce": _case(lambda a, b: T.einsum("ijk,j->i", a, b), (3, 4, 2), (4,)),
    "sum": _case(lambda a: T.sum_(a, axis=1, keepdims=True), (3, 4, 2)),
    "mean": _case(lambda a: T.mean(a, axis=(0, 2)), (3, 4, 2)),
    "cumsum": _case(lambda a: T.cumsum(a, axis=1), (3, 5)),
    "reshape": _case(lambda a: T.reshape(a, (2, 6)), (3, 4)),
    "transpose": _case(lambda a: T.transpose(a, (2, 0, 1)), (2, 3, 4)),
    "broadcast_to": _case(lambda a: T.broadcast_to(a, (2, 3, 4)), (3, 1)),
    "getitem": _case(lambda a: a[1:, ::2], (3, 4)),
    "getitem_fancy": _case(lambda a: a[np.array([0, 2, 2])], (3, 4)),
    "take": _case(lambda a: T.take(a, np.array([[2, 0], [1, 1]]), axis=1), (2, 3)),
    "scatter": _case(lambda a: T.scatter(a, np.array([3, 0, 1]), axis=0, size=4), (3, 2)),
    "gather_scatter_perm": _perm_case,
    "concat": _case(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2)),
    "stack": _case(lambda a, b: T.stack([a, b], axis=1), (2, 3), (2, 3)),
    "pad": _case(lambda a: T.pad(a, ((1, 0), (2, 1))), (2, 3)),
    "repeat": _case(lambda a: T.repeat(a, 2, axis=1), (2, 3)),
    "flip": _case(lambda a: T.flip(a, 1), (2, 3)),
    "where": _case(lambda a, b: T.where(np.array([[True, False, True]]), a, b), (2, 3), (2, 3)),
    "maximum": _case(lambda a, b: T.maximum(a, b), (2, 3), (2, 3)),
    "softmax": _case(lambda a: F.softmax(a), (3, 5)),
    "log_softmax": _case(lambda a: F.log_softmax(a), (3, 5)),
    "softmax_cross_entropy": _ce_case,
    "layer_norm": _case(lambda a: F.layer_norm(a), (3, 6)),
    "rms_norm": _case(lambda a: F.rms_norm(a), (3, 6)),
    "conv2d": _case(lambda x, w: F.conv2d(x, w, 1, 1), (2, 5, 4, 3), (3, 3, 3, 2)),
    "conv2d_stride": _case(lambda x, w: F.conv(x, w, (2, 2), ((0, 1), (1, 1))), (1, 6, 5, 2), (3, 3, 2, 3)),
    "causal_conv3d": _case(lambda x, w: F.causal_conv3d(x, w), (1, 3, 4, 4, 2), (3, 3, 3, 2, 2)),
    "causal_conv3d_stride": _case(lambda x, w: F.causal_conv3d(x, w, (2, 2, 2)), (1, 4, 4, 4, 2), (3, 3, 3, 2, 2)),
    "channel_projection_1x1": _case(lambda x, w: F.conv(x, w), (2, 3, 3, 4), (1, 1, 4, 2)),
    "resize_first_axis": _case(lambda a: F.resize_first_axis(a, 7), (4, 3)),
    "upsample_nearest": _case(lambda a: F.upsample_nearest(a, (2, 2)), (1, 2, 3, 2)),
    "fft2": _case(lambda a: F.fft2(a), (2, 4, 6)),
    "fft2_unnormalized": _case(lambda a: F.fft2(a, norm="backward"), (3, 5)),
    "fft_magnitude_loss": _fft_mag_case,
}


def run_catalog(seeds=(0, 1, 2), eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per op over ``seeds``."""
    from .gradcheck import grad_check
    results = {}
    for name, build in CASES.items():
        worst = 0.0
        for s in seeds:
            fn, inputs = build(np.random.default_rng(s))
            worst = max(worst, grad_check(fn, inputs, eps))
        results[name] = worst
    return results
