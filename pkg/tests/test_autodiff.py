import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmamba.autodiff import (ShapeError, Tensor, causal_conv3d, fft2, grad_check, matmul, no_grad,
                              scatter, sigmoid, softmax, take)
from stmamba.autodiff.catalog import CASES
from stmamba.autodiff.functional import dft2_direct, resize_first_axis
from stmamba.autodiff.serialization import FormatError, dumps_tensors, load_tensors, loads_tensors, save_tensors


def test_matmul_shape():
    out = Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 4)))
    assert out.shape == (2, 4)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 4\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))


def test_broadcast_error_is_descriptive():
    with pytest.raises(ShapeError, match="not broadcast-compatible"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_softmax_constant_row_is_uniform():
    out = softmax(Tensor(np.full((2, 5), 3.7)))
    np.testing.assert_allclose(out.data, 0.2)


def test_causal_conv3d_frame0_ignores_future():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 4, 5, 5, 2))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    y0 = causal_conv3d(Tensor(x), Tensor(w)).data
    x2 = x.copy()
    x2[:, 1:] = rng.normal(size=x2[:, 1:].shape)
    y1 = causal_conv3d(Tensor(x2), Tensor(w)).data
    np.testing.assert_array_equal(y0[:, 0], y1[:, 0])
    assert not np.allclose(y0[:, 1:], y1[:, 1:])


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_without_graph_raises():
    with pytest.raises(RuntimeError):
        Tensor(np.ones(3)).sum().backward()


def test_seed_shape_mismatch_raises():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward(np.ones((3,)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad


def test_matmul_adjoint_vs_finite_differences():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    w = Tensor(rng.normal(size=(4, 3)))
    err = grad_check(lambda x, y: ((x @ y) * w).sum(), [a, b])
    assert err <= 1e-6


def test_sigmoid_at_zero():
    err = grad_check(lambda x: sigmoid(x).sum(), [np.zeros(6)])
    assert err <= 1e-7


def test_softmax_cross_entropy_composite():
    fn, inputs = CASES["softmax_cross_entropy"](np.random.default_rng(3))
    assert grad_check(fn, inputs) <= 1e-6


def test_fft_magnitude_loss():
    fn, inputs = CASES["fft_magnitude_loss"](np.random.default_rng(4))
    assert grad_check(fn, inputs) <= 1e-5


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_catalog_op_passes_grad_check(name, seed):
    fn, inputs = CASES[name](np.random.default_rng(seed))
    assert grad_check(fn, inputs) <= 1e-4


@pytest.mark.parametrize("shape", [(4, 8), (5, 6), (3, 7)])
def test_fft_matches_direct_dft(shape):
    x = np.random.default_rng(5).normal(size=(2,) + shape)
    out = fft2(Tensor(x)).data
    ref = dft2_direct(x)
    np.testing.assert_allclose(out[..., 0], ref.real, atol=1e-12)
    np.testing.assert_allclose(out[..., 1], ref.imag, atol=1e-12)


def test_resize_identity_and_round_trip():
    t = np.linspace(0, 1, 32)
    x = np.stack([np.sin(2 * np.pi * t), np.cos(np.pi * t)], axis=1)
    np.testing.assert_array_equal(resize_first_axis(Tensor(x), 32).data, x)
    up = resize_first_axis(Tensor(x), 64)
    back = resize_first_axis(up, 32).data
    assert np.linalg.norm(back - x) / np.linalg.norm(x) <= 1e-2


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(0, 10_000))
def test_gather_then_inverse_scatter_is_identity(n, m, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, m))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    np.testing.assert_array_equal(take(take(Tensor(x), perm, 0), inv, 0).data, x)
    np.testing.assert_array_equal(scatter(take(Tensor(x), perm, 0), perm, 0).data, x)


def test_deterministic_forward_backward():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(6, 7)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(7, 5)).astype(np.float32), requires_grad=True)
        y = softmax(x @ w).sum(axis=0)
        loss = (y * y).sum()
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()
    assert run() == run()


def test_serialization_round_trip(tmp_path):
    tensors = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "scalar": np.array([1.5], np.float32),
               "ünï": np.zeros((2, 1, 3), np.float32)}
    path = tmp_path / "x.msra"
    save_tensors(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"MSRA"
    assert int.from_bytes(raw[4:8], "little") == 1
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    assert dumps_tensors(back) == raw


def test_serialization_rejects_bad_magic():
    with pytest.raises(FormatError):
        loads_tensors(b"XXXX" + b"\0" * 8)
