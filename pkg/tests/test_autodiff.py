import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from affect_e2e.autodiff import functional as F
from affect_e2e.autodiff.optim import Adam, AdamState, adam_step, clip_grad_norm
from affect_e2e.autodiff.serialization import decode_tensor, encode_tensor, load_tensor, save_tensor
from affect_e2e.autodiff.tensor import Tape, Tensor, backward, grad_enabled, no_grad
from affect_e2e.errors import ContractError, DataError, DimensionError, ParameterError

from conftest import fd_errors


# ---------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------

def conv1d_loops(x, w, stride, left, right):
    n, c, t = x.shape
    o, _, k = w.shape
    xp = np.zeros((n, c, t + left + right))
    xp[:, :, left : left + t] = x
    t_out = (xp.shape[2] - k) // stride + 1
    out = np.zeros((n, o, t_out))
    for b in range(n):
        for oc in range(o):
            for i in range(t_out):
                acc = 0.0
                for ic in range(c):
                    for m in range(k):
                        acc += w[oc, ic, m] * xp[b, ic, i * stride + m]
                out[b, oc, i] = acc
    return out


def conv2d_loops(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    (pt, pb), (pl, pr) = pad
    xp = np.zeros((n, c, h + pt + pb, wd + pl + pr))
    xp[:, :, pt : pt + h, pl : pl + wd] = x
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, oc, i, j] = np.sum(patch * w[oc])
    return out


def max_pool2d_loops(x, size, stride, pad):
    n, c, h, w = x.shape
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - size) // stride + 1
    wo = (w + 2 * pad - size) // stride + 1
    out = np.empty((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = xp[:, :, i * stride : i * stride + size, j * stride : j * stride + size].max(axis=(2, 3))
    return out


# ---------------------------------------------------------------------
# graph mechanics
# ---------------------------------------------------------------------

def test_tape_is_topological():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = a * 3.0
    c = b + a
    d = F.sum(c * b)
    tape = Tape.record(d)
    position = {id(t): i for i, t in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            if id(parent) in position:
                assert position[id(parent)] < position[id(node)]
    assert tape.nodes[-1] is d


def test_gradient_accumulates_over_shared_subgraph():
    a = Tensor([1.5, -2.0], requires_grad=True)
    b = a * a
    loss = F.sum(b + b)
    backward(loss)
    np.testing.assert_allclose(a.grad, 4 * a.data)


def test_backward_accumulates_into_existing_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    backward(F.sum(a * 2.0))
    backward(F.sum(a * 2.0))
    np.testing.assert_array_equal(a.grad, [4.0, 4.0])


def test_backward_contract_errors():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(a * 2.0)
    with pytest.raises(ContractError):
        backward(F.sum(Tensor([1.0, 2.0])))


def test_no_grad_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    with no_grad():
        assert not grad_enabled()
        b = a * 2.0
    assert grad_enabled()
    assert not b.requires_grad and b.is_leaf


def test_non_leaf_tensors_keep_no_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = a * 2.0
    backward(F.sum(b * b))
    assert b.grad is None
    np.testing.assert_allclose(a.grad, 8 * a.data)


def test_long_chain_does_not_overflow_recursion():
    a = Tensor(1.0, requires_grad=True)
    out = a
    for _ in range(5000):
        out = out * 1.0
    backward(out)
    assert a.grad == 1.0


# ---------------------------------------------------------------------
# finite-difference checks of elementwise and shape ops
# ---------------------------------------------------------------------

@pytest.mark.parametrize(
    "name, build",
    [
        ("add_broadcast", lambda a, b: a + F.sum(b, axis=0, keepdims=True)),
        ("sub", lambda a, b: a - b),
        ("mul", lambda a, b: a * b),
        ("div", lambda a, b: a / (b * b + 1.0)),
        ("power", lambda a, b: (a * a + 1.0) ** 1.5),
        ("tanh", lambda a, b: F.tanh(a) * b),
        ("sigmoid", lambda a, b: F.sigmoid(a - b)),
        ("rectify", lambda a, b: F.half_wave_rectify(a) * b),
        ("matmul", lambda a, b: a @ F.transpose(b)),
        ("mean_axis", lambda a, b: F.mean(a * b, axis=1)),
        ("reshape_transpose", lambda a, b: F.transpose(F.reshape(a, (4, 3)), (1, 0)) * 2.0),
        ("getitem_fancy", lambda a, b: a[np.array([0, 0, 2]), 1:] * b[1, 0]),
        ("concat", lambda a, b: F.concat([a, b * 2.0], axis=0)),
    ],
)
def test_elementwise_and_shape_ops_match_finite_differences(name, build):
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    errors = fd_errors(lambda: build(a, b), [a, b], rng)
    assert max(errors) < 1e-6, (name, errors)


def test_linear_batched_input():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    out = F.linear(x, w, b)
    np.testing.assert_allclose(out.data, x.data @ w.data + b.data, rtol=1e-12)
    assert max(fd_errors(lambda: F.linear(x, w, b), [x, w, b], rng)) < 1e-6


# ---------------------------------------------------------------------
# convolutions against nested loops
# ---------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    o=st.integers(1, 3),
    t=st.integers(6, 30),
    k=st.integers(1, 6),
    stride=st.integers(1, 3),
    padding=st.sampled_from(["valid", "same", 2]),
    seed=st.integers(0, 2**16),
)
def test_conv1d_direct_matches_loops(n, c, o, t, k, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, t))
    w = rng.normal(size=(o, c, k))
    left, right = F._pad_amounts(t, k, stride, padding)
    got = F.conv1d(x, w, stride=stride, padding=padding, method="direct").data
    np.testing.assert_allclose(got, conv1d_loops(x, w, stride, left, right), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(c=st.integers(1, 3), o=st.integers(1, 3), t=st.integers(70, 160), k=st.integers(2, 70), seed=st.integers(0, 2**16))
def test_conv1d_fft_matches_direct(c, o, t, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, c, t))
    w = rng.normal(size=(o, c, k))
    fft = F.conv1d(x, w, padding="same", method="fft").data
    direct = F.conv1d(x, w, padding="same", method="direct").data
    np.testing.assert_allclose(fft, direct, atol=1e-10)


def test_conv1d_same_padding_puts_extra_sample_right():
    assert F._pad_amounts(10, 4, 1, "same") == (1, 2)
    assert F._pad_amounts(96000, 80, 1, "same") == (39, 40)


def test_conv1d_unbatched_and_errors():
    x = np.arange(10.0).reshape(1, 10)
    w = np.ones((1, 1, 3))
    np.testing.assert_allclose(F.conv1d(x, w).data, [[3, 6, 9, 12, 15, 18, 21, 24]])
    with pytest.raises(DimensionError):
        F.conv1d(np.ones((2, 10)), np.ones((1, 3, 3)))
    with pytest.raises(ParameterError):
        F.conv1d(np.ones((1, 10)), np.ones((1, 1, 3)), stride=0)
    with pytest.raises(ParameterError):
        F.conv1d(np.ones((1, 10)), np.ones((1, 1, 3)), stride=2, method="fft")


@settings(max_examples=25, deadline=None)
@given(
    c=st.integers(1, 3),
    o=st.integers(1, 3),
    h=st.integers(5, 11),
    k=st.sampled_from([1, 3, 5]),
    stride=st.integers(1, 2),
    padding=st.sampled_from(["valid", "same"]),
    seed=st.integers(0, 2**16),
)
def test_conv2d_matches_loops(c, o, h, k, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, c, h, h + 1))
    w = rng.normal(size=(o, c, k, k))
    pad = (F._pad_amounts(h, k, stride, padding), F._pad_amounts(h + 1, k, stride, padding))
    got = F.conv2d(x, w, stride=stride, padding=padding).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, stride, pad), atol=1e-11)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(3, 12), w=st.integers(3, 12), seed=st.integers(0, 2**16))
def test_max_pool2d_matches_loops(h, w, seed):
    x = np.random.default_rng(seed).normal(size=(2, 3, h, w))
    np.testing.assert_array_equal(F.max_pool2d(x, 3, 2, 1).data, max_pool2d_loops(x, 3, 2, 1))


def test_max_pool_time_and_channels():
    x = np.array([[[1.0, 3.0, 2.0, 0.0, 5.0]]])
    np.testing.assert_array_equal(F.max_pool_time(x, 2).data, [[[3.0, 2.0]]])
    y = np.arange(12.0).reshape(1, 6, 2)
    np.testing.assert_array_equal(F.max_pool_channels(y, 3).data, [[[4.0, 5.0], [10.0, 11.0]]])
    with pytest.raises(ParameterError):
        F.max_pool_channels(y, 4)


def test_max_pool_routes_gradient_to_first_maximum():
    x = Tensor(np.array([[[2.0, 2.0, 1.0, 0.0]]]), requires_grad=True)
    backward(F.sum(F.max_pool_time(x, 2)))
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0, 1.0, 0.0]]])


def test_global_average_pool():
    x = np.arange(24.0).reshape(1, 2, 3, 4)
    np.testing.assert_allclose(F.global_avg_pool2d(x).data, x.mean(axis=(2, 3)))


# ---------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------

def test_dropout_modes():
    x = np.ones((200, 200))
    assert F.dropout(x, 0.5, training=False).data is not None
    np.testing.assert_array_equal(F.dropout(x, 0.5, training=False).data, x)
    np.testing.assert_array_equal(F.dropout(x, 0.0, training=True, rng=np.random.default_rng(0)).data, x)
    out = F.dropout(x, 0.5, training=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.02
    with pytest.raises(ParameterError):
        F.dropout(x, 1.0, training=True, rng=np.random.default_rng(0))


def test_dropout_gradient_uses_same_mask():
    x = Tensor(np.ones((50,)), requires_grad=True)
    out = F.dropout(x, 0.3, training=True, rng=np.random.default_rng(5))
    backward(F.sum(out))
    np.testing.assert_array_equal(x.grad, out.data)


# ---------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------

def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
    return theta


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(7)]
    params = [theta.copy()]
    state = AdamState.zeros_like(params)
    for g in grads:
        adam_step(params, [g], state, lr=1e-2)
    np.testing.assert_allclose(params[0], adam_reference(theta, grads, 1e-2), rtol=1e-13, atol=1e-15)
    assert state.step == 7


def test_adam_first_step_moves_by_learning_rate():
    params = [np.array([1.0, -1.0])]
    adam_step(params, [np.array([3.0, -0.01])], AdamState.zeros_like(params), lr=1e-4)
    np.testing.assert_allclose(params[0], [1.0 - 1e-4, -1.0 + 1e-4], rtol=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step([np.zeros(3)], [np.zeros(4)], AdamState.zeros_like([np.zeros(3)]))


def test_clip_grad_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose([g[0] for g in grads], [0.6, 0.8])
    small = [np.array([0.1])]
    clip_grad_norm(small, 1.0)
    assert small[0][0] == 0.1


def test_adam_wrapper_minimises_quadratic():
    w = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        backward(F.sum(w * w))
        opt.step()
    assert np.all(np.abs(w.data) < 1e-2)


# ---------------------------------------------------------------------
# tensor container
# ---------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_tensor_container_round_trip(array):
    back = decode_tensor(encode_tensor(array))
    assert back.shape == array.shape
    np.testing.assert_array_equal(back.view(np.uint64), np.ascontiguousarray(array).view(np.uint64))


def test_tensor_container_layout():
    blob = encode_tensor(np.array([[1.0, 2.0]]))
    assert blob[:4] == b"TNSR"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 2
    assert len(blob) == 12 + 2 * 8 + 2 * 8


def test_tensor_container_errors_name_offsets(tmp_path):
    blob = encode_tensor(np.arange(6.0))
    with pytest.raises(DataError, match="@ byte 0"):
        decode_tensor(b"XXXX" + blob[4:], path="t.tnsr")
    with pytest.raises(DataError, match="@ byte 4"):
        decode_tensor(blob[:4] + b"\x09" + blob[5:], path="t.tnsr")
    with pytest.raises(DataError) as info:
        decode_tensor(blob[:-3], path="t.tnsr")
    assert "t.tnsr" in str(info.value)
    path = tmp_path / "a.tnsr"
    save_tensor(path, np.eye(2))
    np.testing.assert_array_equal(load_tensor(path), np.eye(2))
    with pytest.raises(DataError):
        load_tensor(tmp_path / "missing.tnsr")
