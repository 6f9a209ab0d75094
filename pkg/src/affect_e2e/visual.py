"""Residual visual network and frame augmentation.

Topology: 7x7 stem convolution (stride 2) -> 3x3 max pool (stride 2) ->
four stages of bottleneck blocks -> global average pool -> linear
projection to 640 features.  A bottleneck block computes
``y = F(x) + h(x)`` where ``F`` is 1x1 -> 3x3 -> 1x1 convolution with
rectification in between and ``h`` is the identity, or a 1x1 projection
when the channel count or stride changes.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from affect_e2e.autodiff import functional as F
from affect_e2e.autodiff.module import Module, glorot_uniform, he_normal
from affect_e2e.autodiff.serialization import write_atomic
from affect_e2e.autodiff.tensor import Tensor, as_tensor
from affect_e2e.errors import ConfigurationError, DataError, DimensionError

FRAME_SIZE = 96
RESIZE_TO = 110


@dataclass(frozen=True)
class BottleneckSpec:
    replication: int
    feature_maps: tuple[int, int, int]

    def __post_init__(self):
        if self.replication < 1 or len(self.feature_maps) != 3 or min(self.feature_maps) < 1:
            raise ConfigurationError(f"invalid bottleneck spec {self}")


RESNET50_STAGES = (
    BottleneckSpec(3, (64, 64, 256)),
    BottleneckSpec(4, (128, 128, 512)),
    BottleneckSpec(6, (256, 256, 1024)),
    BottleneckSpec(3, (512, 512, 2048)),
)

TINY_STAGES = (
    BottleneckSpec(1, (4, 4, 16)),
    BottleneckSpec(1, (8, 8, 32)),
    BottleneckSpec(1, (8, 8, 32)),
    BottleneckSpec(1, (16, 16, 64)),
)


@dataclass(frozen=True)
class VisualNetConfig:
    input_size: int = FRAME_SIZE
    channels: int = 3
    stem_channels: int = 64
    stem_kernel: int = 7
    stem_pool: int = 3
    stages: tuple[BottleneckSpec, ...] = RESNET50_STAGES
    output_features: int = 640
    scale: str = "full"

    @classmethod
    def full(cls) -> "VisualNetConfig":
        return cls()

    @classmethod
    def tiny(cls, stem_channels: int = 8, **overrides) -> "VisualNetConfig":
        return cls(stem_channels=stem_channels, stages=TINY_STAGES, scale="tiny", **overrides)

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigurationError("the network has exactly four bottleneck stages")
        if self.scale not in ("full", "tiny"):
            raise ConfigurationError(f"unknown scale {self.scale!r}")
        if self.stem_channels < 1 or self.output_features < 1:
            raise ConfigurationError("channel counts must be positive")

    @property
    def pooled_features(self) -> int:
        return self.stages[-1].feature_maps[2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [[s.replication, list(s.feature_maps)] for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VisualNetConfig":
        d = dict(d)
        d["stages"] = tuple(BottleneckSpec(r, tuple(m)) for r, m in d["stages"])
        return cls(**d)


class Bottleneck(Module):
    def __init__(self, in_channels: int, maps: tuple[int, int, int], stride: int, rng):
        a, b, c = maps
        self.stride = stride
        self.w1 = he_normal(rng, (a, in_channels, 1, 1), in_channels)
        self.b1 = Tensor(np.zeros((a, 1, 1)), requires_grad=True)
        self.w2 = he_normal(rng, (b, a, 3, 3), 9 * a)
        self.b2 = Tensor(np.zeros((b, 1, 1)), requires_grad=True)
        # small last layer keeps the un-normalised residual sum well scaled
        self.w3 = Tensor(rng.normal(0.0, 0.5 * np.sqrt(2.0 / b), size=(c, b, 1, 1)), requires_grad=True)
        self.b3 = Tensor(np.zeros((c, 1, 1)), requires_grad=True)
        if in_channels != c or stride != 1:
            self.proj = glorot_uniform(rng, (c, in_channels, 1, 1), in_channels, c)
        else:
            self.proj = None

    @property
    def has_projection(self) -> bool:
        return self.proj is not None

    def forward(self, x) -> Tensor:
        return residual_block(x, self)


def residual_block(x, block: Bottleneck) -> Tensor:
    """``F(x) + h(x)`` for one bottleneck block."""
    x = as_tensor(x)
    in_channels = block.proj.shape[1] if block.proj is not None else block.w1.shape[1]
    if x.shape[-3] != in_channels:
        raise DimensionError(f"block expects {in_channels} channels, got {x.shape[-3]}")
    h = F.relu(F.conv2d(x, block.w1) + block.b1)
    h = F.relu(F.conv2d(h, block.w2, stride=block.stride, padding="same") + block.b2)
    h = F.conv2d(h, block.w3) + block.b3
    if block.proj is None:
        shortcut = x
    else:
        shortcut = F.conv2d(x, block.proj, stride=block.stride, padding="same" if block.stride > 1 else "valid")
    if shortcut.shape != h.shape:
        raise DimensionError(f"residual shapes differ: {h.shape} vs {shortcut.shape}")
    return h + shortcut


class VisualNet(Module):
    def __init__(self, config: VisualNetConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or VisualNetConfig.full()
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg = self.config
        k = cfg.stem_kernel
        self.stem = he_normal(rng, (cfg.stem_channels, cfg.channels, k, k), cfg.channels * k * k)
        self.stem_bias = Tensor(np.zeros((cfg.stem_channels, 1, 1)), requires_grad=True)
        self.blocks = []
        channels = cfg.stem_channels
        for stage_index, spec in enumerate(cfg.stages):
            for rep in range(spec.replication):
                stride = 2 if (stage_index > 0 and rep == 0) else 1
                self.blocks.append(Bottleneck(channels, spec.feature_maps, stride, rng))
                channels = spec.feature_maps[2]
        self.proj = glorot_uniform(rng, (channels, cfg.output_features), channels, cfg.output_features)
        self.proj_bias = Tensor(np.zeros(cfg.output_features), requires_grad=True)

    @property
    def features_per_frame(self) -> int:
        return self.config.output_features

    def stage_audit(self) -> list[tuple[int, tuple[int, int, int]]]:
        """(replication, (1x1, 3x3, 1x1) maps) per stage, read from the weights."""
        audit = []
        index = 0
        for spec in self.config.stages:
            maps = set()
            for block in self.blocks[index : index + spec.replication]:
                maps.add((block.w1.shape[0], block.w2.shape[0], block.w3.shape[0]))
            index += spec.replication
            (only,) = maps
            audit.append((spec.replication, only))
        return audit

    def pooled(self, frames) -> Tensor:
        """Stem + stages + global average pool: ``(N, 3, H, W) -> (N, C_last)``."""
        x = as_tensor(frames)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.input_size, cfg.input_size):
            raise DimensionError(
                f"expected (N, {cfg.channels}, {cfg.input_size}, {cfg.input_size}) frames, got {x.shape}"
            )
        h = F.relu(F.conv2d(x, self.stem, stride=2, padding="same") + self.stem_bias)
        h = F.max_pool2d(h, size=cfg.stem_pool, stride=2, padding=cfg.stem_pool // 2)
        for block in self.blocks:
            h = block.forward(h)
        return F.global_avg_pool2d(h)

    def forward(self, frames, training: bool = False, rng=None, chunk: int = 64) -> Tensor:
        """Frames ``(N, H, W, 3)`` in [0, 1] -> features ``(N, 640)``.

        Frames are processed in chunks of ``chunk`` to bound peak memory.
        """
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 3:
            return F.reshape(self.forward(frames[None], training, rng, chunk), (self.features_per_frame,))
        if frames.ndim != 4 or frames.shape[-1] != self.config.channels:
            raise DimensionError(f"expected (N, H, W, {self.config.channels}) frames, got {frames.shape}")
        chw = np.ascontiguousarray(frames.transpose(0, 3, 1, 2))
        parts = [self.pooled(chw[i : i + chunk]) for i in range(0, len(chw), chunk)]
        pooled = parts[0] if len(parts) == 1 else F.concat(parts, axis=0)
        return F.linear(pooled, self.proj, self.proj_bias)

    def forward_frame(self, frame, training: bool = False, rng=None) -> np.ndarray:
        return self.forward(np.asarray(frame)[None], training, rng).data[0]


def build_network(config: VisualNetConfig, rng=None) -> VisualNet:
    return VisualNet(config, rng)


# ---------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    resize_to: int = RESIZE_TO
    brightness: float = 0.125
    saturation: tuple[float, float] = (0.5, 1.5)


@dataclass(frozen=True)
class AugmentParams:
    top: int
    left: int
    brightness: float
    saturation: float

    @classmethod
    def identity(cls, config: AugmentConfig = AugmentConfig(), size: int = FRAME_SIZE) -> "AugmentParams":
        offset = (config.resize_to - size) // 2
        return cls(offset, offset, 0.0, 1.0)

    @classmethod
    def sample(cls, rng, config: AugmentConfig = AugmentConfig(), size: int = FRAME_SIZE) -> "AugmentParams":
        span = config.resize_to - size
        return cls(
            int(rng.integers(0, span + 1)),
            int(rng.integers(0, span + 1)),
            float(rng.uniform(-config.brightness, config.brightness)),
            float(rng.uniform(*config.saturation)),
        )


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of ``(.., H, W, C)`` images with half-pixel centres."""
    h, w = image.shape[-3:-1]

    def coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, size)
    x0, x1, fx = coords(w, size)
    rows = image[..., y0, :, :] * (1 - fy)[:, None, None] + image[..., y1, :, :] * fy[:, None, None]
    return rows[..., x0, :] * (1 - fx)[:, None] + rows[..., x1, :] * fx[:, None]


def apply_augment(frames: np.ndarray, params: AugmentParams, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    size = frames.shape[-2]
    big = resize_bilinear(frames, config.resize_to)
    out = big[..., params.top : params.top + size, params.left : params.left + size, :]
    out = out + params.brightness
    gray = out.mean(axis=-1, keepdims=True)
    out = gray + params.saturation * (out - gray)
    return np.clip(out, 0.0, 1.0)


def augment(frames, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Resize to 110x110, random 96x96 crop, brightness and saturation jitter.

    ``frames`` is one ``(96, 96, 3)`` frame or a stack; a stack shares one
    draw of the random parameters so a sequence stays temporally coherent.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-3:] != (FRAME_SIZE, FRAME_SIZE, 3):
        raise DimensionError(f"augmentation expects 96x96x3 frames, got {frames.shape}")
    return apply_augment(frames, AugmentParams.sample(rng, config), config)


# ---------------------------------------------------------------------
# FRMS frame container
# ---------------------------------------------------------------------

FRMS_MAGIC = b"FRMS"
FRMS_VERSION = 1
_FRMS_HEADER = struct.Struct("<4sIIIII")


def encode_frames(frames) -> bytes:
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        frames = np.clip(np.round(np.asarray(frames, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if frames.ndim != 4:
        raise DimensionError("frames must be (count, H, W, C)")
    n, h, w, c = frames.shape
    return _FRMS_HEADER.pack(FRMS_MAGIC, FRMS_VERSION, n, h, w, c) + np.ascontiguousarray(frames).tobytes()


def decode_frames(blob: bytes, path=None) -> np.ndarray:
    """Parse an FRMS blob into ``uint8`` frames ``(count, H, W, C)``."""
    if len(blob) < _FRMS_HEADER.size:
        raise DataError("truncated FRMS header", path, len(blob))
    magic, version, n, h, w, c = _FRMS_HEADER.unpack_from(blob, 0)
    if magic != FRMS_MAGIC:
        raise DataError("not an FRMS container (bad magic)", path, 0)
    if version != FRMS_VERSION:
        raise DataError(f"unsupported FRMS version {version}", path, 4)
    expected = n * h * w * c
    body = len(blob) - _FRMS_HEADER.size
    if body != expected:
        raise DataError(f"expected {expected} pixel bytes, found {body}", path, _FRMS_HEADER.size + min(body, expected))
    return np.frombuffer(blob, dtype=np.uint8, offset=_FRMS_HEADER.size).reshape(n, h, w, c)


def write_frames(path, frames) -> None:
    write_atomic(path, encode_frames(frames))


def read_frames(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError("frame file not found", path)
    return decode_frames(path.read_bytes(), path)


def to_unit(frames_u8: np.ndarray) -> np.ndarray:
    return np.asarray(frames_u8, dtype=np.float64) / 255.0
