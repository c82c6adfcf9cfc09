import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from modmachine import autodiff as ad
from modmachine.autodiff import Adam, DiagnosticsError, ParamStore, Tensor, gradcheck, no_grad


def rng(seed=0):
    return np.random.default_rng(seed)


def test_conv1d_zero_input_gives_bias():
    w, b = rng().standard_normal((3, 4, 3)), np.array([1.0, -2.0, 0.5])
    out = ad.conv1d(Tensor(np.zeros((4, 6))), Tensor(w), Tensor(b))
    assert out.shape == (3, 6)
    assert np.allclose(out.data, b[:, None])


def test_conv1d_matches_direct_correlation():
    r = rng(1)
    x, w, b = r.standard_normal((2, 5)), r.standard_normal((3, 2, 3)), r.standard_normal(3)
    pad = np.pad(x, ((0, 0), (1, 1)))
    want = np.array([[np.sum(w[o] * pad[:, i:i + 3]) + b[o] for i in range(5)] for o in range(3)])
    assert np.allclose(ad.conv1d(Tensor(x), Tensor(w), Tensor(b)).data, want)


def test_conv1d_length_one_and_batched():
    r = rng(2)
    w = r.standard_normal((2, 3, 3))
    x = r.standard_normal((3, 1))
    single = ad.conv1d(Tensor(x), Tensor(w)).data
    assert np.allclose(single[:, 0], w[:, :, 1] @ x[:, 0])
    batched = ad.conv1d(Tensor(np.stack([x, x])), Tensor(w)).data
    assert np.allclose(batched[0], single) and np.allclose(batched[1], single)


def test_conv1d_channel_mismatch():
    with pytest.raises(ValueError):
        ad.conv1d(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4, 3))))


def test_conv1d_gradcheck_example():
    r = rng(3)
    err = gradcheck(lambda t: ad.conv1d(t[0], t[1], t[2]),
                    [r.standard_normal((4, 7)), r.standard_normal((3, 4, 3)), r.standard_normal(3)])
    assert err < 1e-6


def test_attention_saturation_and_symmetry():
    q = np.array([[1.0, 0.0, 0.0, 0.0]]) * 100
    keys = np.array([[0.0, 1, 0, 0], [1.0, 0, 0, 0], [0.0, 0, 1, 0]])
    _, w = ad.softmax_attention(Tensor(q), Tensor(keys), Tensor(np.eye(3)))
    assert w.data[0, 1] == pytest.approx(1.0)
    same = np.ones((5, 4))
    out, w = ad.softmax_attention(Tensor(rng().standard_normal((2, 4))), Tensor(same), Tensor(np.eye(5)))
    assert np.allclose(w.data, 0.2) and np.allclose(out.data, 0.2)


def test_attention_rejects_empty_width():
    with pytest.raises(ValueError):
        ad.softmax_attention(Tensor(np.zeros((2, 0))), Tensor(np.zeros((3, 0))), Tensor(np.zeros((3, 1))))


def test_attention_gradcheck_example():
    r = rng(4)

    def build(t):
        out, w = ad.softmax_attention(t[0], t[1], t[2])
        return ad.concat([ad.reshape(out, (-1,)), ad.reshape(w, (-1,))])

    err = gradcheck(build, [r.standard_normal((2, 4)), r.standard_normal((5, 4)), r.standard_normal((5, 3))])
    assert err < 1e-6


def test_uniform_logprob_and_dense_identity():
    logits = Tensor(np.full(7, 0.3))
    for i in range(7):
        assert ad.categorical_logprob(logits, i).data == pytest.approx(-math.log(7))
    with pytest.raises(IndexError):
        ad.categorical_logprob(logits, 7)
    x = rng().standard_normal((3, 4))
    assert np.array_equal(ad.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)


@settings(max_examples=60)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 30)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_row_softmax_is_distribution(x):
    p = ad.row_softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)


def test_bilstm_shapes():
    r = rng(5)
    C, H = 3, 4

    def params():
        return (Tensor(r.standard_normal((C, 4 * H))), Tensor(r.standard_normal((H, 4 * H))),
                Tensor(np.zeros(4 * H)))

    fwd, bwd = params(), params()
    for L in (1, 6, 40):
        assert ad.bilstm(Tensor(r.standard_normal((C, L))), fwd, bwd).shape == (2 * H,)
    # at L=1 each direction runs one cell on the same column
    x = Tensor(r.standard_normal((C, 1)))
    out = ad.bilstm(x, fwd, fwd).data
    assert np.allclose(out[:H], out[H:])


def test_bilstm_gradcheck_example():
    r = rng(6)
    C, H = 2, 3
    arrays_ = [r.standard_normal((C, 6))]
    for _ in range(2):
        arrays_ += [0.5 * r.standard_normal((C, 4 * H)), 0.5 * r.standard_normal((H, 4 * H)),
                    0.5 * r.standard_normal(4 * H)]
    err = gradcheck(lambda t: ad.bilstm(t[0], t[1:4], t[4:7]), arrays_)
    assert err < 1e-5


def test_backward_accumulates_shared_inputs():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = ad.reduce_sum(ad.mul(x, x) + x)
    y.backward()
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ad.relu(x)
    assert not y.requires_grad


def _store(values):
    return ParamStore({"w": Tensor(np.array(values, dtype=np.float64), requires_grad=True)})


def test_adam_zero_gradient_leaves_params():
    store = _store([1.0, -2.0])
    opt = Adam(store, lr=0.1)
    store["w"].grad = np.zeros(2)
    opt.step()
    assert np.array_equal(store["w"].data, [1.0, -2.0])
    assert opt.t == 1 and store["w"].grad is None


def test_adam_constant_gradient_moves_lr_per_step():
    store = _store([0.0, 0.0])
    opt = Adam(store, lr=1e-3)
    g = np.array([3.0, -0.2])
    for _ in range(500):
        before = store["w"].data.copy()
        store["w"].grad = g.copy()
        opt.step()
    step = store["w"].data - before
    assert np.allclose(step, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_quadratic_bowl():
    store = _store(rng(7).standard_normal(5))
    opt = Adam(store, lr=1e-2)
    for _ in range(2000):
        w = store["w"]
        ad.reduce_sum(ad.square(w)).backward()
        opt.step()
    assert np.linalg.norm(store["w"].data) < 1e-3


def test_adam_rejects_nan():
    store = _store([1.0])
    store["w"].grad = np.array([np.nan])
    with pytest.raises(DiagnosticsError):
        Adam(store).step()


def test_adam_clipping_scales_gradient():
    a, b = _store([0.0]), _store([0.0])
    a["w"].grad = np.array([100.0])
    b["w"].grad = np.array([100.0])
    Adam(a, lr=1.0).step()
    Adam(b, lr=1.0, max_grad_norm=1.0).step()
    # the first Adam step is sign-like either way
    assert a["w"].data == pytest.approx(b["w"].data)


def test_max_rel_error():
    assert ad.max_rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert ad.max_rel_error(np.array([1.0, 0.0]), np.array([0.5, 0.0])) == pytest.approx(0.5)
    assert ad.max_rel_error(np.zeros(0), np.zeros(0)) == 0.0
