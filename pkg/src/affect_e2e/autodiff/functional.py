"""Differentiable operations on :class:`~affect_e2e.autodiff.tensor.Tensor`.

Every function takes tensors (or array-likes, treated as constants) and
returns a new tensor whose backward closure produces the vector-Jacobian
product for each input.  Batched variants accept an optional leading batch
axis: ``conv1d`` works on ``(C, T)`` or ``(N, C, T)``; ``conv2d`` on
``(C, H, W)`` or ``(N, C, H, W)``.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.fft as sfft

from affect_e2e.autodiff.tensor import Tensor, as_tensor
from affect_e2e.errors import DimensionError, ParameterError

# Kernels at least this long use the FFT route (stride 1 only).
FFT_KERNEL_THRESHOLD = 64
# conv2d builds im2col columns in blocks of about this size.
COLUMN_BLOCK_BYTES = 4 << 20


def fft_workers() -> int:
    value = os.environ.get("AFFECT_E2E_THREADS")
    if not value:
        return 1
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor.from_op(a.data**exponent, (a,), backward, "pow")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def half_wave_rectify(a) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


relu = half_wave_rectify


# ---------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor.from_op(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return Tensor.from_op(out, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return Tensor.from_op(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return Tensor.from_op(out, tensors, backward, "concat")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``(in, out)``."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------

def _pad_amounts(size: int, kernel: int, stride: int, padding) -> tuple[int, int]:
    if padding == "valid" or padding == 0:
        return 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return total // 2, total - total // 2
    if isinstance(padding, (int, np.integer)) and padding >= 0:
        return int(padding), int(padding)
    if isinstance(padding, tuple) and len(padding) == 2:
        return int(padding[0]), int(padding[1])
    raise ParameterError(f"unsupported padding {padding!r}")


def _conv1d_direct(xp, w, stride, t_out):
    out = np.zeros((xp.shape[0], w.shape[0], t_out))
    span = stride * (t_out - 1) + 1
    for m in range(w.shape[2]):
        out += w[:, :, m] @ xp[:, :, m : m + span : stride]
    return out


def _conv1d_direct_backward(g, xp, w, stride):
    t_out = g.shape[2]
    span = stride * (t_out - 1) + 1
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for m in range(w.shape[2]):
        seg = xp[:, :, m : m + span : stride]
        gw[:, :, m] = np.einsum("not,nct->oc", g, seg)
        gxp[:, :, m : m + span : stride] += np.swapaxes(w[:, :, m], 0, 1) @ g
    return gxp, gw


def _spectral_mix(xf, wf):
    """out[n, o, f] = sum_c xf[n, c, f] * wf[o, c, f]."""
    out = np.empty((xf.shape[0], wf.shape[0], xf.shape[2]), dtype=np.complex128)
    for o in range(wf.shape[0]):
        out[:, o] = (xf * wf[o]).sum(axis=1)
    return out


def conv1d(x, kernels, stride: int = 1, padding="valid", method: str = "auto") -> Tensor:
    """1-d cross-correlation of ``x`` (``(C, T)`` or ``(N, C, T)``).

    ``output[c, t] = sum_k sum_m kernels[c, k, m] * x[k, t*stride + m - pad_left]``.
    ``padding`` is ``"valid"``, ``"same"`` (zeros, extra sample on the right)
    or an int.  ``method`` picks ``"direct"``, ``"fft"`` or ``"auto"``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    w = kernels.data
    if xd.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d expects (N,)C,T input and O,C,K kernels, got {x.shape}, {kernels.shape}")
    n, c_in, t = xd.shape
    c_out, c_k, k = w.shape
    if c_in != c_k:
        raise DimensionError(f"input has {c_in} channels but kernels expect {c_k}")
    left, right = _pad_amounts(t, k, stride, padding)
    tp = t + left + right
    if k > tp:
        raise DimensionError(f"kernel length {k} exceeds padded input length {tp}")
    t_out = (tp - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right))) if left or right else xd
    use_fft = method == "fft" or (method == "auto" and stride == 1 and k >= FFT_KERNEL_THRESHOLD)
    if use_fft and stride != 1:
        raise ParameterError("FFT convolution supports stride 1 only")

    if use_fft:
        nfft = sfft.next_fast_len(tp, real=True)
        workers = fft_workers()
        xf = sfft.rfft(xp, nfft, axis=-1, workers=workers)
        wf = sfft.rfft(w, nfft, axis=-1, workers=workers)
        out = sfft.irfft(_spectral_mix(xf, np.conj(wf)), nfft, axis=-1, workers=workers)[..., :t_out]

        def raw_backward(g):
            gf = sfft.rfft(g, nfft, axis=-1, workers=workers)
            gxp = gw = None
            if x.requires_grad:
                gxp = sfft.irfft(
                    _spectral_mix(gf, np.swapaxes(wf, 0, 1)), nfft, axis=-1, workers=workers
                )[..., :tp]
            if kernels.requires_grad:
                mixed = np.einsum("ncf,nof->ocf", xf, np.conj(gf))
                gw = sfft.irfft(mixed, nfft, axis=-1, workers=workers)[..., :k]
            return gxp, gw
    else:
        out = _conv1d_direct(xp, w, stride, t_out)

        def raw_backward(g):
            return _conv1d_direct_backward(g, xp, w, stride)

    def backward(g):
        g = g[None] if unbatched else g
        gxp, gw = raw_backward(np.ascontiguousarray(g))
        gx = None
        if gxp is not None and x.requires_grad:
            gx = gxp[:, :, left : left + t]
            gx = gx[0] if unbatched else gx
        return gx, gw

    return Tensor.from_op(out[0] if unbatched else out, (x, kernels), backward, "conv1d")


def conv2d(x, kernels, stride: int = 1, padding="valid") -> Tensor:
    """2-d cross-correlation of ``(C, H, W)`` or ``(N, C, H, W)`` input."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    w = kernels.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects (N,)C,H,W input and O,C,Kh,Kw kernels, got {x.shape}, {kernels.shape}")
    n, c_in, h, wd = xd.shape
    c_out, c_k, kh, kw = w.shape
    if c_in != c_k:
        raise DimensionError(f"input has {c_in} channels but kernels expect {c_k}")
    top, bottom = _pad_amounts(h, kh, stride, padding)
    lft, rgt = _pad_amounts(wd, kw, stride, padding)
    hp, wp = h + top + bottom, wd + lft + rgt
    if kh > hp or kw > wp:
        raise DimensionError("kernel does not fit within the padded input")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    if kh == kw == 1 and not (top or bottom or lft or rgt):
        return _conv2d_pointwise(x, kernels, stride, unbatched)
    xp = np.pad(xd, ((0, 0), (0, 0), (top, bottom), (lft, rgt))) if (top or bottom or lft or rgt) else xd
    sh = stride * (h_out - 1) + 1
    sw = stride * (w_out - 1) + 1
    w2 = w.reshape(c_out, c_in * kh * kw)

    rows = h_out * w_out
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, :sh:stride, :sw:stride].transpose(0, 2, 3, 1, 4, 5)
    block = max(1, COLUMN_BLOCK_BYTES // (rows * c_in * kh * kw * 8))

    def column_blocks():
        # a few images at a time through one reused buffer; a single
        # full-size column matrix spends most of its time in page faults
        buf = np.empty((min(block, n), h_out, w_out, c_in, kh, kw))
        for i in range(0, n, block):
            part = buf[: min(block, n - i)]
            np.copyto(part, win[i : i + block])
            yield slice(i * rows, (i + len(part)) * rows), part.reshape(-1, c_in * kh * kw)

    out = np.empty((n * rows, c_out))
    for span, cols in column_blocks():
        np.matmul(cols, w2.T, out=out[span])
    out = np.ascontiguousarray(out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2))

    def backward(g):
        g = (g[None] if unbatched else g).transpose(0, 2, 3, 1).reshape(n * rows, c_out)
        gw = None
        if kernels.requires_grad:
            gw = np.zeros_like(w2)
            for span, cols in column_blocks():
                gw += g[span].T @ cols
            gw = gw.reshape(w.shape)
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for b in range(0, n, block):
                part = gxp[b : b + block]
                gcols = (g[b * rows : (b + len(part)) * rows] @ w2).reshape(len(part), h_out, w_out, c_in, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        part[:, :, i : i + sh : stride, j : j + sw : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, top : top + h, lft : lft + wd]
            gx = gx[0] if unbatched else gx
        return gx, gw

    return Tensor.from_op(out[0] if unbatched else out, (x, kernels), backward, "conv2d")


def _conv2d_pointwise(x: Tensor, kernels: Tensor, stride: int, unbatched: bool) -> Tensor:
    # 1x1 kernels: a channel-mixing matmul over the (sub-sampled) pixels
    xd = x.data[None] if unbatched else x.data
    n, c_in, h, wd = xd.shape
    w2 = kernels.data.reshape(kernels.shape[0], c_in)
    xs = np.ascontiguousarray(xd[:, :, ::stride, ::stride])
    h_out, w_out = xs.shape[2:]
    flat = xs.reshape(n, c_in, h_out * w_out)
    out = (w2 @ flat).reshape(n, -1, h_out, w_out)

    def backward(g):
        g = (g[None] if unbatched else g).reshape(n, -1, h_out * w_out)
        gw = np.einsum("nop,ncp->oc", g, flat).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            gx[:, :, ::stride, ::stride] = (w2.T @ g).reshape(n, c_in, h_out, w_out)
            gx = gx[0] if unbatched else gx
        return gx, gw

    return Tensor.from_op(out[0] if unbatched else out, (x, kernels), backward, "conv2d")


# ---------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------

def max_pool_time(x, pool: int) -> Tensor:
    """Non-overlapping max pooling along the last (time) axis.

    Trailing samples that do not fill a window are dropped.  The gradient
    goes to the first maximum of each window.
    """
    x = as_tensor(x)
    if pool <= 0:
        raise ParameterError("pool must be positive")
    t = x.shape[-1]
    if t < pool:
        raise DimensionError(f"time axis {t} shorter than pool {pool}")
    t_out = t // pool
    windows = x.data[..., : t_out * pool].reshape(*x.shape[:-1], t_out, pool)
    idx = np.argmax(windows, axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(windows.shape)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        full = np.zeros(x.shape)
        full[..., : t_out * pool] = gw.reshape(*x.shape[:-1], t_out * pool)
        return (full,)

    return Tensor.from_op(out, (x,), backward, "max_pool_time")


def max_pool_channels(x, pool: int) -> Tensor:
    """Max over disjoint groups of ``pool`` channels: ``(.., C, T) -> (.., C/pool, T)``."""
    x = as_tensor(x)
    if pool <= 0:
        raise ParameterError("pool must be positive")
    c = x.shape[-2]
    if c % pool:
        raise ParameterError(f"{c} channels not divisible by pool {pool}")
    grouped = x.data.reshape(*x.shape[:-2], c // pool, pool, x.shape[-1])
    idx = np.argmax(grouped, axis=-2)[..., None, :]
    out = np.take_along_axis(grouped, idx, axis=-2)[..., 0, :]

    def backward(g):
        gg = np.zeros(grouped.shape)
        np.put_along_axis(gg, idx, g[..., None, :], axis=-2)
        return (gg.reshape(x.shape),)

    return Tensor.from_op(out, (x,), backward, "max_pool_channels")


def max_pool2d(x, size: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Overlapping spatial max pooling on ``(.., H, W)`` with -inf padding."""
    x = as_tensor(x)
    if size <= 0 or stride <= 0:
        raise ParameterError("pool size and stride must be positive")
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    xp = np.pad(x.data, pad, constant_values=-np.inf)
    h_out = (h + 2 * padding - size) // stride + 1
    w_out = (w + 2 * padding - size) // stride + 1
    sh, sw = stride * (h_out - 1) + 1, stride * (w_out - 1) + 1
    best = np.full(x.shape[:-2] + (h_out, w_out), -np.inf)
    arg = np.zeros(best.shape, dtype=np.int64)
    for i in range(size):
        for j in range(size):
            seg = xp[..., i : i + sh : stride, j : j + sw : stride]
            better = seg > best
            np.copyto(best, seg, where=better)
            arg[better] = i * size + j

    def backward(g):
        gxp = np.zeros(xp.shape)
        for i in range(size):
            for j in range(size):
                gxp[..., i : i + sh : stride, j : j + sw : stride] += np.where(arg == i * size + j, g, 0.0)
        return (gxp[..., padding : padding + h, padding : padding + w],)

    return Tensor.from_op(best, (x,), backward, "max_pool2d")


def global_avg_pool2d(x) -> Tensor:
    """Average over the two trailing spatial axes."""
    return mean(x, axis=(-2, -1))


# ---------------------------------------------------------------------
# regularisation
# ---------------------------------------------------------------------

def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("training-mode dropout needs a seeded rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
