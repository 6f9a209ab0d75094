import numpy as np
import pytest

from affect_e2e.autodiff.tensor import Tensor
from affect_e2e.errors import ConfigurationError, DataError, DegenerateInputError, DimensionError
from affect_e2e.speech import (
    SpeechNet,
    SpeechNetConfig,
    frame_count,
    normalize_segment,
    read_wav,
    split_segments,
    write_wav,
)

from conftest import fd_errors


def test_full_config_arithmetic():
    cfg = SpeechNetConfig()
    assert (cfg.segment_length, cfg.kernel_1, cfg.kernel_2) == (96000, 80, 4000)
    assert cfg.pooled_length == 48000 and cfg.steps_per_frame == 320
    assert cfg.features_per_frame == 1280 and frame_count(cfg) == 150


def test_full_forward_shape(rng):
    net = SpeechNet(SpeechNetConfig(), rng)
    seg = normalize_segment(rng.normal(size=96000))
    frames, pooled = net.forward(seg, return_intermediate=True)
    assert frames.shape == (150, 1280)
    assert pooled.shape == (1, 20, 48000)


def test_tiny_keeps_timing():
    cfg = SpeechNetConfig.tiny()
    assert cfg.features_per_frame == 320 and frame_count(cfg) == 150
    net = SpeechNet(cfg, np.random.default_rng(0))
    out = net.forward(normalize_segment(np.random.default_rng(1).normal(size=(2, 96000))[0]))
    assert out.shape == (150, 320)


def test_bad_configs():
    with pytest.raises(ConfigurationError):
        SpeechNetConfig(filters_2=15)
    with pytest.raises(ConfigurationError):
        SpeechNetConfig(segment_seconds=0.1)
    with pytest.raises(ConfigurationError):
        SpeechNetConfig(dropout_p=1.0)


def test_normalize_segment(rng):
    x = normalize_segment(3.0 + 2.0 * rng.normal(size=96000))
    assert abs(x.mean()) < 1e-12 and abs(x.std() - 1.0) < 1e-12
    with pytest.raises(DegenerateInputError):
        normalize_segment(np.zeros(96000))
    with pytest.raises(DimensionError):
        normalize_segment(np.ones(100))


def test_split_segments():
    cfg = SpeechNetConfig()
    assert split_segments(np.zeros(96000 * 2 + 10), cfg).shape == (2, 96000)
    with pytest.raises(DataError):
        split_segments(np.zeros(1000), cfg)


def test_zero_kernels_give_zero_features(rng):
    net = SpeechNet(SpeechNetConfig.tiny(), rng)
    net.conv1.data[...] = 0.0
    out = net.forward(normalize_segment(rng.normal(size=96000)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_frame_shift_covariance(rng):
    """Delaying the input by one frame delays interior features by one frame."""
    cfg = SpeechNetConfig.tiny()
    net = SpeechNet(cfg, rng)
    x = rng.normal(size=96000 + 640)
    a = net.forward(x[640:]).data
    b = net.forward(x[:96000]).data
    np.testing.assert_allclose(a[20:-20], b[21:-19], atol=1e-9)


def test_dropout_only_in_training(rng):
    net = SpeechNet(SpeechNetConfig.tiny(), rng)
    seg = normalize_segment(rng.normal(size=96000))
    np.testing.assert_array_equal(net.forward(seg).data, net.forward(seg).data)
    dropped = net.forward(seg, training=True, rng=np.random.default_rng(0)).data
    assert np.mean(dropped == 0.0) > np.mean(net.forward(seg).data == 0.0) + 0.2


def test_short_variant_gradients(rng):
    cfg = SpeechNetConfig(segment_seconds=0.12, filters_1=3, filters_2=4, channel_pool=2, kernel_1_ms=2.0, kernel_2_ms=6.0)
    net = SpeechNet(cfg, rng)
    x = Tensor(rng.normal(size=(1, 1920)), requires_grad=True)
    errs = fd_errors(lambda: net.forward(x), [x, net.conv1, net.conv2], rng, probes=40)
    assert max(errs) < 1e-4


def test_wav_round_trip(tmp_path, rng):
    x = np.clip(rng.normal(scale=0.3, size=16000), -1, 1)
    write_wav(tmp_path / "a.wav", x)
    back = read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(back - x)) <= 1 / 32768
    with pytest.raises(DataError):
        read_wav(tmp_path / "a.wav", expected_rate=8000)
    (tmp_path / "junk.wav").write_bytes(b"RIFF....")
    with pytest.raises(DataError):
        read_wav(tmp_path / "junk.wav")
