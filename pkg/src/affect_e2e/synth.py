"""Deterministic synthetic recordings shaped like the annotated corpus.

A latent arousal/valence trajectory at 25 Hz drives two renderers:

* audio: a two-harmonic tone whose RMS level and fundamental frequency rise
  with arousal, plus noise 30 dB below the tone;
* video: a schematic face whose brightness and mouth curvature follow
  valence.

The gold annotation is the latent trajectory itself.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from affect_e2e.autodiff.serialization import write_atomic
from affect_e2e.errors import DataError, ParameterError
from affect_e2e.speech import read_wav, write_wav
from affect_e2e.visual import FRAME_SIZE, read_frames, write_frames

SAMPLE_RATE = 16000
FRAME_RATE = 25
FRAME_SECONDS = 1.0 / FRAME_RATE
SEGMENT_SECONDS = 6
CLAMP = 0.9

F0_LOW, F0_SPAN = 120.0, 80.0
AMP_LOW, AMP_SPAN = 0.1, 0.4
HARMONICS = (1.0, 0.3)
NOISE_DB = -30.0


@dataclass
class AffectTrajectory:
    arousal: np.ndarray
    valence: np.ndarray
    duration_s: float

    def __len__(self) -> int:
        return len(self.arousal)

    @property
    def gold(self) -> np.ndarray:
        """``(T, 2)`` array of (arousal, valence)."""
        return np.stack([self.arousal, self.valence], axis=1)


@dataclass
class SyntheticRecording:
    id: str
    trajectory: AffectTrajectory
    audio: np.ndarray
    frames: np.ndarray  # uint8 (T, 96, 96, 3)
    seed: int

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]

    def __post_init__(self):
        ids = self.train + self.validation + self.test
        if len(ids) != len(set(ids)):
            raise ParameterError("dataset splits must be disjoint")

    def __getitem__(self, name: str) -> list[str]:
        key = {"val": "validation", "dev": "validation"}.get(name, name)
        if key not in ("train", "validation", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, key)

    def to_dict(self) -> dict:
        return {"train": self.train, "validation": self.validation, "test": self.test}


def recording_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(dataset_seed), int(index)]).generate_state(1)[0])


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


# ---------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------

def gen_trajectory(seed: int, duration_s: float) -> AffectTrajectory:
    """Two independent smoothed mean-reverting walks clamped to [-0.9, 0.9]."""
    if duration_s <= 0 or abs(duration_s / SEGMENT_SECONDS - round(duration_s / SEGMENT_SECONDS)) > 1e-9:
        raise ParameterError(f"duration must be a positive multiple of {SEGMENT_SECONDS} s, got {duration_s}")
    n = int(round(duration_s * FRAME_RATE))
    rng = _rng(seed, 0)
    theta, sigma = 0.03, 0.06  # reversion per frame, innovation scale
    stationary = sigma / np.sqrt(2 * theta - theta * theta)
    tracks = []
    for _ in range(2):
        eps = rng.normal(size=n)
        x = np.empty(n)
        x[0] = rng.normal() * stationary
        for t in range(1, n):
            x[t] = (1.0 - theta) * x[t - 1] + sigma * eps[t]
        x = gaussian_filter1d(x, sigma=4.0, mode="nearest")
        tracks.append(np.clip(1.2 * x, -CLAMP, CLAMP))
    return AffectTrajectory(tracks[0], tracks[1], float(duration_s))


def _per_sample(track: np.ndarray, n_samples: int) -> np.ndarray:
    frame_times = np.arange(len(track)) * FRAME_SECONDS
    return np.interp(np.arange(n_samples) / SAMPLE_RATE, frame_times, track)


def tone_amplitude(arousal):
    return AMP_LOW + AMP_SPAN * (np.asarray(arousal) + 1.0) / 2.0


def tone_f0(arousal):
    return F0_LOW + F0_SPAN * (np.asarray(arousal) + 1.0) / 2.0


def render_audio(traj: AffectTrajectory, seed: int) -> np.ndarray:
    """16 kHz samples; RMS and F0 are affine in arousal."""
    rng = _rng(seed, 1)
    n = int(round(traj.duration_s * SAMPLE_RATE))
    arousal = _per_sample(traj.arousal, n)
    amp = tone_amplitude(arousal)
    phase = 2.0 * np.pi * np.cumsum(tone_f0(arousal)) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi)
    weights = np.asarray(HARMONICS)
    tone = sum(w * np.sin((k + 1) * phase) for k, w in enumerate(weights))
    tone /= np.sqrt(np.sum(weights**2) / 2.0)  # unit RMS
    noise = rng.normal(size=n) * 10.0 ** (NOISE_DB / 20.0)
    return np.clip(amp * (tone + noise), -1.0, 32767.0 / 32768.0)


def mouth_curvature(valence) -> np.ndarray:
    """Corner lift in pixels; positive values curve the mouth into a smile."""
    return 8.0 * np.asarray(valence)


def face_brightness(valence) -> np.ndarray:
    return 0.45 + 0.35 * (np.asarray(valence) + 1.0) / 2.0


MOUTH_Y, MOUTH_HALF_WIDTH = 66.0, 16.0


def render_video(traj: AffectTrajectory, seed: int) -> np.ndarray:
    """``uint8`` frames ``(T, 96, 96, 3)`` of a schematic face."""
    rng = _rng(seed, 2)
    n = len(traj)
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)
    jitter = np.clip(np.cumsum(rng.normal(scale=0.15, size=(n, 2)), axis=0), -1.5, 1.5)
    skin = np.array([0.95, 0.75, 0.6])
    frames = np.empty((n, FRAME_SIZE, FRAME_SIZE, 3), dtype=np.uint8)
    for t in range(n):
        cx, cy = 48.0 + jitter[t, 0], 48.0 + jitter[t, 1]
        img = np.full((FRAME_SIZE, FRAME_SIZE, 3), 0.15)
        face = ((xx - cx) / 30.0) ** 2 + ((yy - cy) / 38.0) ** 2 <= 1.0
        img[face] = skin * face_brightness(traj.valence[t])
        for ex in (-12.0, 12.0):
            eye = (xx - cx - ex) ** 2 + (yy - cy + 10.0) ** 2 <= 9.0
            img[eye] = 0.05
        dx = (xx - cx) / MOUTH_HALF_WIDTH
        curve = cy + (MOUTH_Y - 48.0) - mouth_curvature(traj.valence[t]) * (dx * dx - 0.5)
        mouth = (np.abs(dx) <= 1.0) & (np.abs(yy - curve) <= 1.5)
        img[mouth] = 0.05
        img += rng.normal(scale=0.01, size=img.shape)
        frames[t] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return frames


def generate_recording(rec_id: str, seed: int, duration_s: float) -> SyntheticRecording:
    traj = gen_trajectory(seed, duration_s)
    return SyntheticRecording(rec_id, traj, render_audio(traj, seed), render_video(traj, seed), int(seed))


@dataclass
class Dataset:
    """Recordings plus their train/validation/test split.

    Directory-backed datasets load recordings on demand (with a small cache),
    so a full-size corpus never has to sit in memory.
    """

    split: DatasetSplit
    seed: int = 0
    duration_s: float = 60.0
    seeds: dict[str, int] = field(default_factory=dict)
    recordings: dict[str, SyntheticRecording] = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        self._loader = lru_cache(maxsize=16)(self._load)

    @property
    def ids(self) -> list[str]:
        return self.split.train + self.split.validation + self.split.test

    def __getitem__(self, rec_id: str) -> SyntheticRecording:
        if rec_id in self.recordings:
            return self.recordings[rec_id]
        if self.root is None:
            raise DataError(f"unknown recording {rec_id!r}")
        return self._loader(rec_id)

    def split_recordings(self, name: str) -> list[SyntheticRecording]:
        ids = self.split[name]
        if not ids:
            raise DataError(f"split {name!r} is empty")
        return [self[i] for i in ids]

    def _load(self, rec_id: str) -> SyntheticRecording:
        root = self.root
        labels = read_labels(root / "labels" / f"{rec_id}.csv")
        audio = read_wav(root / "audio" / f"{rec_id}.wav", SAMPLE_RATE)
        frames = read_frames(root / "video" / f"{rec_id}.frms")
        duration = len(labels) * FRAME_SECONDS
        traj = AffectTrajectory(labels[:, 0].copy(), labels[:, 1].copy(), round(duration, 9))
        if len(frames) != len(traj):
            raise DataError(f"{len(frames)} frames but {len(traj)} annotation rows", root / "video" / f"{rec_id}.frms")
        return SyntheticRecording(rec_id, traj, audio, frames, self.seeds.get(rec_id, 0))


def generate_dataset(
    seed: int = 0,
    n_train: int = 16,
    n_validation: int = 15,
    n_test: int = 15,
    duration_s: float = 60.0,
) -> Dataset:
    counts = {"train": n_train, "validation": n_validation, "test": n_test}
    ids: dict[str, list[str]] = {}
    recordings = {}
    seeds = {}
    index = 0
    for name, count in counts.items():
        ids[name] = []
        for _ in range(count):
            rec_id = f"rec_{index:03d}"
            rec_seed = recording_seed(seed, index)
            recordings[rec_id] = generate_recording(rec_id, rec_seed, duration_s)
            seeds[rec_id] = rec_seed
            ids[name].append(rec_id)
            index += 1
    split = DatasetSplit(ids["train"], ids["validation"], ids["test"])
    return Dataset(split, seed, float(duration_s), seeds, recordings)


# ---------------------------------------------------------------------
# on-disk layout: manifest.json, audio/<id>.wav, video/<id>.frms, labels/<id>.csv
# ---------------------------------------------------------------------

MANIFEST = "manifest.json"


def write_labels(path, trajectory: AffectTrajectory) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["time_s", "arousal", "valence"])
    for i, (a, v) in enumerate(zip(trajectory.arousal, trajectory.valence)):
        writer.writerow([repr(round(i * FRAME_SECONDS, 6)), repr(float(a)), repr(float(v))])
    write_atomic(path, buf.getvalue().encode())


def read_labels(path) -> np.ndarray:
    """``(T, 2)`` arousal/valence rows from an annotation CSV."""
    path = Path(path)
    if not path.exists():
        raise DataError("annotation file not found", path)
    blob = path.read_bytes()
    offset = 0
    rows = []
    for lineno, line in enumerate(blob.split(b"\n")):
        text = line.decode("utf-8", errors="replace").strip()
        if lineno == 0:
            if text.split(",") != ["time_s", "arousal", "valence"]:
                raise DataError("expected header time_s,arousal,valence", path, 0)
        elif text:
            parts = text.split(",")
            try:
                if len(parts) != 3:
                    raise ValueError
                rows.append((float(parts[1]), float(parts[2])))
            except ValueError:
                raise DataError(f"malformed annotation row {lineno}", path, offset) from None
        offset += len(line) + 1
    if not rows:
        raise DataError("annotation file has no rows", path, len(blob))
    return np.asarray(rows, dtype=np.float64)


def write_dataset(dataset: Dataset, directory) -> Path:
    root = Path(directory)
    for sub in ("audio", "video", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for rec_id in dataset.ids:
        rec = dataset[rec_id]
        write_wav(root / "audio" / f"{rec_id}.wav", rec.audio, SAMPLE_RATE)
        write_frames(root / "video" / f"{rec_id}.frms", rec.frames)
        write_labels(root / "labels" / f"{rec_id}.csv", rec.trajectory)
    manifest = {
        "format": "affect-e2e-dataset",
        "version": 1,
        "seed": dataset.seed,
        "duration_s": dataset.duration_s,
        "sample_rate": SAMPLE_RATE,
        "frame_rate": FRAME_RATE,
        "recordings": [{"id": i, "seed": dataset.seeds.get(i, 0)} for i in dataset.ids],
        "splits": dataset.split.to_dict(),
    }
    write_atomic(root / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return root


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    path = root / MANIFEST
    if not path.exists():
        raise DataError("dataset manifest not found", path)
    try:
        manifest = json.loads(path.read_text())
        splits = manifest["splits"]
        split = DatasetSplit(list(splits["train"]), list(splits["validation"]), list(splits["test"]))
        seeds = {r["id"]: int(r["seed"]) for r in manifest["recordings"]}
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc.msg}", path, exc.pos) from exc
    except (KeyError, TypeError) as exc:
        raise DataError(f"manifest missing field {exc}", path) from exc
    return Dataset(split, int(manifest.get("seed", 0)), float(manifest.get("duration_s", 0.0)), seeds, {}, root)
