"""Numpy-backed tensors with reverse-mode differentiation."""
from . import counters, functional
from .functional import (causal_conv3d, conv, conv2d, dropout, fft2, layer_norm, linear,
                         log_softmax, resize_first_axis, rms_norm, softmax, upsample_nearest)
from .gradcheck import grad_check
from .nn import Linear, Module, Parameter
from .optim import AdamW, clip_grad_norm, global_grad_norm
from .serialization import load_tensors, save_tensors
from .tensor import (ShapeError, Tensor, abs_, add, as_tensor, broadcast_to, clip, concat, cumsum, div,
                     einsum, exp, flip, gelu, getitem, log, matmul, maximum, mean, moveaxis, mul, neg,
                     no_grad, pad, power, relu, repeat, reshape, scatter, sigmoid, silu, softplus, sqrt,
                     stack, sub, sum_, swapaxes, take, tanh, transpose, where)
