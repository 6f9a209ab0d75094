"""Finite-difference checks of every differentiable network op at small shapes.

Each case draws fresh random inputs per trial; the result maps the op name
to the worst relative error seen over all trials and parameters.
"""

import numpy as np

from affect_e2e.autodiff import functional as F
from affect_e2e.autodiff.tensor import Tensor
from affect_e2e.lstm import LstmLayer, OutputHead, lstm_forward

from conftest import fd_errors


def _t(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _conv1d_direct(rng):
    x, w = _t(rng, 2, 2, 9), _t(rng, 3, 2, 4)
    stride = int(rng.integers(1, 3))
    return (lambda: F.conv1d(x, w, stride=stride, padding="same", method="direct")), [x, w]


def _conv1d_fft(rng):
    x, w = _t(rng, 2, 2, 80), _t(rng, 2, 2, 70)
    return (lambda: F.conv1d(x, w, padding="same", method="fft")), [x, w]


def _conv2d(rng):
    x, w = _t(rng, 1, 2, 6, 5), _t(rng, 3, 2, 3, 3)
    stride = int(rng.integers(1, 3))
    return (lambda: F.conv2d(x, w, stride=stride, padding="same")), [x, w]


def _conv2d_pointwise(rng):
    x, w = _t(rng, 2, 3, 5, 6), _t(rng, 4, 3, 1, 1)
    stride = int(rng.integers(1, 3))
    return (lambda: F.conv2d(x, w, stride=stride, padding="same")), [x, w]


def _max_pool_time(rng):
    x = _t(rng, 2, 3, 11)
    return (lambda: F.max_pool_time(x, 2)), [x]


def _max_pool_channels(rng):
    x = _t(rng, 2, 6, 5)
    return (lambda: F.max_pool_channels(x, 3)), [x]


def _max_pool2d(rng):
    x = _t(rng, 1, 2, 7, 6)
    return (lambda: F.max_pool2d(x, 3, 2, 1)), [x]


def _rectify(rng):
    x = _t(rng, 4, 5)
    return (lambda: F.half_wave_rectify(x)), [x]


def _lstm(rng):
    layer = LstmLayer(3, 4, rng)
    layer.bias.data[...] = rng.normal(size=layer.bias.shape) * 0.5
    x = _t(rng, 2, 5, 3)
    h0, c0 = _t(rng, 2, 4), _t(rng, 2, 4)
    return (lambda: lstm_forward(x, layer, (h0, c0))[0]), [x, layer.weight, layer.bias, h0, c0]


def _output_head(rng):
    head = OutputHead(4, 2, rng)
    head.bias.data[...] = rng.normal(size=2)
    h = _t(rng, 4, 4)
    return (lambda: head.forward(h)), [h, head.weight, head.bias]


# Convolutions are affine in every single coordinate, so central differences
# are exact for any step; a larger step keeps FFT round-off out of the probe.
CASES = {
    "conv1d (direct)": (_conv1d_direct, 1e-3),
    "conv1d (fft)": (_conv1d_fft, 1e-3),
    "conv2d": (_conv2d, 1e-3),
    "conv2d (1x1)": (_conv2d_pointwise, 1e-3),
    "max_pool_time": (_max_pool_time, 1e-6),
    "max_pool_channels": (_max_pool_channels, 1e-6),
    "max_pool2d": (_max_pool2d, 1e-6),
    "half_wave_rectify": (_rectify, 1e-6),
    "lstm": (_lstm, 1e-6),
    "output_head": (_output_head, 1e-6),
}


def run_suite(trials: int = 20, seed: int = 0) -> dict[str, float]:
    worst = {}
    for index, (name, (make, step)) in enumerate(CASES.items()):
        rng = np.random.default_rng([seed, index])
        errs = []
        for _ in range(trials):
            fn, params = make(rng)
            errs.extend(fd_errors(fn, params, rng, step=step))
        worst[name] = max(errs)
    return worst
