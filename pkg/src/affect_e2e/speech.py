"""Raw-waveform speech front-end.

Pipeline for one 6 s segment at 16 kHz (96000 samples)::

    conv1d(F filters, 5 ms) -> half-wave rectify -> max-pool time by 2 (8 kHz)
    -> conv1d(M filters, 500 ms) -> max-pool channels by 10 -> dropout
    -> 150 frames of 40 ms

At 8 kHz a 40 ms frame spans 320 steps, so with the default M = 40 the
four surviving channels give 4 * 320 = 1280 features per frame.
"""

from __future__ import annotations

import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from affect_e2e.autodiff import functional as F
from affect_e2e.autodiff.module import Module, he_normal
from affect_e2e.autodiff.tensor import Tensor, as_tensor
from affect_e2e.errors import ConfigurationError, DataError, DegenerateInputError, DimensionError


@dataclass(frozen=True)
class SpeechNetConfig:
    sample_rate: int = 16000
    segment_seconds: float = 6.0
    filters_1: int = 20
    kernel_1_ms: float = 5.0
    time_pool: int = 2
    filters_2: int = 40
    kernel_2_ms: float = 500.0
    channel_pool: int = 10
    dropout_p: float = 0.5
    frame_ms: float = 40.0

    @classmethod
    def tiny(cls, **overrides) -> "SpeechNetConfig":
        """Fewer filters, same timing: 10 / 10 = one channel of 320 features."""
        params = dict(filters_1=8, filters_2=10)
        params.update(overrides)
        return cls(**params)

    def __post_init__(self):
        if self.filters_2 % self.channel_pool:
            raise ConfigurationError("filters_2 must be divisible by channel_pool")
        for name in ("sample_rate", "filters_1", "filters_2", "time_pool", "channel_pool"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0, 1)")
        if not float(self.segment_length).is_integer() or not float(self.steps_per_frame).is_integer():
            raise ConfigurationError("segment and frame lengths must be whole samples")
        frame_count(self)

    @property
    def segment_length(self) -> int:
        return int(round(self.sample_rate * self.segment_seconds))

    @property
    def kernel_1(self) -> int:
        return int(round(self.sample_rate * self.kernel_1_ms / 1000.0))

    @property
    def pooled_rate(self) -> float:
        return self.sample_rate / self.time_pool

    @property
    def kernel_2(self) -> int:
        return int(round(self.pooled_rate * self.kernel_2_ms / 1000.0))

    @property
    def pooled_length(self) -> int:
        return self.segment_length // self.time_pool

    @property
    def steps_per_frame(self) -> float:
        return self.pooled_rate * self.frame_ms / 1000.0

    @property
    def output_channels(self) -> int:
        return self.filters_2 // self.channel_pool

    @property
    def features_per_frame(self) -> int:
        return self.output_channels * int(self.steps_per_frame)

    @property
    def samples_per_frame(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    def to_dict(self) -> dict:
        return asdict(self)


def frame_count(config: SpeechNetConfig) -> int:
    """Number of 40 ms annotation frames in one segment (150 for 6 s)."""
    frames = config.segment_seconds * 1000.0 / config.frame_ms
    if abs(frames - round(frames)) > 1e-9:
        raise ConfigurationError(f"{config.segment_seconds} s is not a whole number of {config.frame_ms} ms frames")
    return int(round(frames))


def normalize_segment(raw, length: int | None = 96000) -> np.ndarray:
    """Zero mean, unit (population) variance."""
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("a segment is a 1-d sample sequence")
    if length is not None and x.size != length:
        raise DimensionError(f"segment must have {length} samples, got {x.size}")
    std = x.std()
    if std == 0.0:
        raise DegenerateInputError("cannot normalise a constant segment")
    return (x - x.mean()) / std


def split_segments(audio, config: SpeechNetConfig) -> np.ndarray:
    """Tile audio into consecutive whole segments; a final partial one is dropped."""
    audio = np.asarray(audio, dtype=np.float64)
    seg = config.segment_length
    count = audio.size // seg
    if count == 0:
        raise DataError(f"audio of {audio.size} samples is shorter than one {config.segment_seconds} s segment")
    return audio[: count * seg].reshape(count, seg)


class SpeechNet(Module):
    def __init__(self, config: SpeechNetConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or SpeechNetConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg = self.config
        self.conv1 = he_normal(rng, (cfg.filters_1, 1, cfg.kernel_1), cfg.kernel_1)
        self.conv2 = he_normal(rng, (cfg.filters_2, cfg.filters_1, cfg.kernel_2), cfg.filters_1 * cfg.kernel_2)

    @property
    def features_per_frame(self) -> int:
        return self.config.features_per_frame

    def forward(self, segments, training: bool = False, rng: np.random.Generator | None = None, return_intermediate: bool = False):
        """Map normalised segments ``(L,)`` or ``(N, L)`` to ``(.., frames, features)``."""
        cfg = self.config
        x = as_tensor(segments)
        unbatched = x.ndim == 1
        if unbatched:
            x = F.reshape(x, (1, x.shape[0]))
        if x.ndim != 2:
            raise DimensionError(f"expected (N, samples) segments, got {x.shape}")
        n, length = x.shape
        x = F.reshape(x, (n, 1, length))
        h = F.conv1d(x, self.conv1, padding="same")
        h = F.half_wave_rectify(h)
        pooled = F.max_pool_time(h, cfg.time_pool)
        h = F.conv1d(pooled, self.conv2, padding="same")
        h = F.max_pool_channels(h, cfg.channel_pool)
        h = F.dropout(h, cfg.dropout_p, training, rng)
        frames = _frame_features(h, int(cfg.steps_per_frame))
        if unbatched:
            frames = F.reshape(frames, frames.shape[1:])
        if return_intermediate:
            return frames, pooled
        return frames


def _frame_features(h: Tensor, steps: int) -> Tensor:
    """(N, C, T) -> (N, T/steps, C*steps), channel-major within a frame."""
    n, c, t = h.shape
    if t % steps:
        raise DimensionError(f"time axis {t} is not a whole number of {steps}-step frames")
    frames = t // steps
    h = F.reshape(h, (n, c, frames, steps))
    h = F.transpose(h, (0, 2, 1, 3))
    return F.reshape(h, (n, frames, c * steps))


# ---------------------------------------------------------------------
# RIFF/WAVE audio, mono 16-bit PCM
# ---------------------------------------------------------------------

PCM_SCALE = 32768.0


def quantize_pcm(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * PCM_SCALE), -32768, 32767).astype("<i2")


def write_wav(path, samples, sample_rate: int = 16000) -> None:
    pcm = quantize_pcm(samples)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with wave.open(str(tmp), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())
    tmp.replace(path)


def read_wav(path, expected_rate: int | None = 16000) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError("audio file not found", path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate, count = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
            raw = fh.readframes(count)
    except (wave.Error, EOFError) as exc:
        raise DataError(f"malformed WAVE file: {exc}", path, 0) from exc
    if channels != 1 or width != 2:
        raise DataError(f"expected mono 16-bit PCM, got {channels} channel(s) of {8 * width} bits", path, 22)
    if expected_rate is not None and rate != expected_rate:
        raise DataError(f"expected {expected_rate} Hz audio, got {rate} Hz", path, 24)
    if len(raw) != 2 * count:
        raise DataError("truncated PCM data", path, 44 + len(raw))
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE


def load_segments(path, config: SpeechNetConfig | None = None) -> np.ndarray:
    """Read a WAVE file into normalised ``(count, 96000)`` segments.

    Audio shorter than one segment is rejected; a trailing partial segment
    is dropped.
    """
    config = config or SpeechNetConfig()
    audio = read_wav(path, config.sample_rate)
    return np.stack([normalize_segment(s, config.segment_length) for s in split_segments(audio, config)])
