import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmamba.attention import LocalAttention, full_attention_oracle, window_indices, window_mask
from stmamba.autodiff import Tensor, grad_check

from .helpers import rel_err


def make(d=8, heads=2, window=8, seed=0):
    return LocalAttention(d, heads, window, rng=np.random.default_rng(seed), dtype=np.float64).eval()


def test_window_first_token():
    # 0-based token 0 of 16 with w=8 covers tokens 0..4
    assert window_indices(0, 16, 8) == [0, 1, 2, 3, 4]


def test_window_radius_one():
    assert window_indices(7, 16, 2) == [6, 7, 8]


def test_window_saturates():
    assert all(window_indices(i, 5, 10) == list(range(5)) for i in range(5))


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        LocalAttention(10, 3)


@pytest.mark.parametrize("l", [8, 32, 64])
@pytest.mark.parametrize("w", [2, 8, None])
def test_matches_dense_masked_attention(l, w):
    w = 2 * l if w is None else w
    layer = make(window=w, seed=l)
    x = np.random.default_rng(l + w).normal(size=(3, l, 8))
    out = layer(x).data
    assert rel_err(out, full_attention_oracle(x, layer, window_mask(l, w))) <= 1e-6


def test_saturated_window_equals_plain_attention():
    layer = make(window=64)
    x = np.random.default_rng(1).normal(size=(2, 16, 8))
    assert rel_err(layer(x).data, full_attention_oracle(x, layer, np.ones((16, 16), bool))) <= 1e-6


def test_single_token_outputs_projected_value():
    layer = make()
    x = np.random.default_rng(2).normal(size=(1, 1, 8))
    v = x @ layer.v.weight.data + layer.v.bias.data
    np.testing.assert_allclose(layer(x).data, v @ layer.o.weight.data + layer.o.bias.data)


def test_diagonal_mask_oracle():
    layer = make()
    x = np.random.default_rng(3).normal(size=(1, 5, 8))
    v = x @ layer.v.weight.data + layer.v.bias.data
    np.testing.assert_allclose(full_attention_oracle(x, layer, np.eye(5, dtype=bool)),
                               v @ layer.o.weight.data + layer.o.bias.data)
    assert rel_err(make(window=1)(x).data, v @ layer.o.weight.data + layer.o.bias.data) <= 1e-12


def test_equal_tokens_give_uniform_window_weights():
    layer = make(window=4)
    x = np.tile(np.random.default_rng(4).normal(size=(1, 1, 8)), (1, 10, 1))
    layer(x)
    wts = layer.last_weights                             # (1, h, l, win)
    lens = window_mask(10, 4).sum(axis=1)
    nonzero = wts > 0
    np.testing.assert_array_equal(nonzero.sum(-1)[0, 0], lens)
    for i, n in enumerate(lens):
        np.testing.assert_allclose(wts[0, :, i][nonzero[0, :, i]], 1.0 / n)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 20), st.integers(0, 1000))
def test_rows_sum_to_one(l, w, seed):
    layer = make(window=w, seed=seed)
    layer(np.random.default_rng(seed).normal(size=(2, l, 8)))
    np.testing.assert_allclose(layer.last_weights.sum(-1), 1.0, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 30), st.integers(1, 12), st.data())
def test_locality(l, w, data):
    j = data.draw(st.integers(0, l - 1))
    layer = make(window=w)
    x = np.random.default_rng(l).normal(size=(1, l, 8))
    y0 = layer(x).data
    x[0, j] += 1.0
    y1 = layer(x).data
    changed = ~np.all(np.isclose(y0, y1, rtol=0, atol=1e-13), axis=-1)[0]
    allowed = window_mask(l, w)[:, j]
    assert not np.any(changed & ~allowed)
    assert changed[j]


def test_gradients_without_dropout():
    layer = make(window=3)
    x = np.random.default_rng(5).normal(size=(2, 7, 8))
    wt = Tensor(np.random.default_rng(6).normal(size=(2, 7, 8)))
    assert grad_check(lambda t: (layer(t) * wt).sum(), [x]) <= 1e-4


def test_dropout_only_in_training():
    layer = make(window=3)
    layer.dropout = 0.5
    x = np.random.default_rng(7).normal(size=(1, 6, 8))
    ref = layer(x).data
    layer.train()
    a = layer(x, rng=np.random.default_rng(0)).data
    b = layer(x, rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, ref)
    layer.eval()
    np.testing.assert_array_equal(layer(x).data, ref)
