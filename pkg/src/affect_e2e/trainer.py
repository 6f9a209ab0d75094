"""Unimodal pretraining, multimodal fusion training, prediction and ablation.

Data flow for one training example ("window")::

    speech: W frames of audio -> W/150 normalised 6 s segments -> SpeechNet
    visual: W frames (96x96x3) -> VisualNet, one feature vector per frame
    fusion: both, concatenated per 40 ms frame

The ``(B, W, D)`` feature block is cut into ``W / L`` chunks of
``L = sequence_length`` frames, each fed to a fresh two-layer LSTM state,
and the loss is averaged over chunks and over arousal/valence.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from affect_e2e import metrics
from affect_e2e.autodiff import functional as F
from affect_e2e.autodiff.module import Module
from affect_e2e.autodiff.optim import Adam
from affect_e2e.autodiff.serialization import load_tensor, save_tensor, write_atomic
from affect_e2e.autodiff.tensor import Tensor, backward, no_grad
from affect_e2e.errors import ConfigurationError, DataError, DimensionError
from affect_e2e.lstm import HIDDEN_SIZE, LstmStack, OutputHead
from affect_e2e.speech import SpeechNet, SpeechNetConfig, normalize_segment
from affect_e2e.visual import VisualNet, VisualNetConfig, augment, to_unit

logger = logging.getLogger(__name__)

MODALITIES = ("speech", "visual", "fusion")
OBJECTIVES = ("ccc", "mse")
DIMENSIONS = ("arousal", "valence")
FRAMES_PER_SEGMENT = 150
SAMPLES_PER_FRAME = 640


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    audio_batch: int = 25
    video_batch: int = 2
    epochs: int = 60
    sequence_length: int = 150
    objective: str = "ccc"
    seed: int = 0
    clip_norm: float | None = 5.0
    max_steps: int | None = None
    target_rho: float | None = None
    augment: bool = True
    freeze_extractors: bool = False
    eval_splits: tuple[str, ...] = ("train", "validation")
    eval_every: int = 1
    hidden_size: int = HIDDEN_SIZE

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}")
        if self.learning_rate <= 0 or self.epochs < 0:
            raise ConfigurationError("learning rate must be positive and epochs non-negative")
        if self.audio_batch < 1 or self.video_batch < 1 or self.eval_every < 1:
            raise ConfigurationError("batch sizes must be positive")
        window_frames("speech", self.sequence_length)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_splits"] = list(self.eval_splits)
        return d


def window_frames(modality: str, sequence_length: int) -> int:
    """Frames per training window for ``modality``.

    Audio enters the speech network in whole 150-frame segments, so speech
    and fusion windows span ``max(L, 150)`` frames; ``L`` must divide 150 or
    be a multiple of it.
    """
    L = int(sequence_length)
    if L < 2:
        raise ConfigurationError("sequence length must be at least 2 frames")
    if FRAMES_PER_SEGMENT % L and L % FRAMES_PER_SEGMENT:
        raise ConfigurationError(f"sequence length {L} must divide 150 or be a multiple of 150")
    if modality == "visual":
        return L
    if modality not in MODALITIES:
        raise ConfigurationError(f"unknown modality {modality!r}")
    return max(L, FRAMES_PER_SEGMENT)


# ---------------------------------------------------------------------
# model
# ---------------------------------------------------------------------

class AffectModel(Module):
    """Feature extractor(s) + two-layer LSTM + tanh output head."""

    def __init__(
        self,
        modality: str,
        speech: SpeechNet | None = None,
        visual: VisualNet | None = None,
        hidden_size: int = HIDDEN_SIZE,
        sequence_length: int = 150,
        rng: np.random.Generator | None = None,
    ):
        if modality not in MODALITIES:
            raise ConfigurationError(f"unknown modality {modality!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.modality = modality
        self.speech = speech if modality in ("speech", "fusion") else None
        self.visual = visual if modality in ("visual", "fusion") else None
        if modality in ("speech", "fusion") and self.speech is None:
            raise ConfigurationError(f"{modality} model needs a speech network")
        if modality in ("visual", "fusion") and self.visual is None:
            raise ConfigurationError(f"{modality} model needs a visual network")
        self.sequence_length = int(sequence_length)
        self.stack = LstmStack(self.input_width, hidden_size, 2, rng)
        self.head = OutputHead(hidden_size, 2, rng)

    @property
    def input_width(self) -> int:
        width = 0
        if self.speech is not None:
            width += self.speech.features_per_frame
        if self.visual is not None:
            width += self.visual.features_per_frame
        return width

    def extractor_parameters(self) -> list[Tensor]:
        params = []
        for net in (self.speech, self.visual):
            if net is not None:
                params.extend(net.parameters())
        return params

    def features(self, segments, frames, training: bool = False, rngs=None) -> Tensor:
        """Per-frame features ``(B, W, D)`` for a batch of windows.

        ``segments`` is ``(B, W/150, 96000)`` normalised audio and ``frames``
        ``(B, W, 96, 96, 3)`` in [0, 1]; either may be ``None`` when the
        modality does not use it.
        """
        rngs = rngs or {}
        parts = []
        if self.speech is not None:
            if segments is None:
                raise DataError("audio stream missing for a model that needs speech")
            b, nseg, length = segments.shape
            feats = self.speech.forward(segments.reshape(b * nseg, length), training, rngs.get("dropout"))
            parts.append(F.reshape(feats, (b, nseg * feats.shape[1], feats.shape[2])))
        if self.visual is not None:
            if frames is None:
                raise DataError("video stream missing for a model that needs visual frames")
            b, w = frames.shape[:2]
            feats = self.visual.forward(frames.reshape((b * w,) + frames.shape[2:]), training, rngs.get("dropout"))
            parts.append(F.reshape(feats, (b, w, feats.shape[1])))
        if len(parts) == 2 and parts[0].shape[1] != parts[1].shape[1]:
            raise DimensionError("speech and visual feature sequences have different lengths")
        fused = parts[0] if len(parts) == 1 else F.concat(parts, axis=-1)
        if fused.shape[-1] != self.stack.input_size:
            raise DimensionError(f"feature width {fused.shape[-1]} != LSTM input {self.stack.input_size}")
        return fused

    def sequence_outputs(self, feats: Tensor, return_traces: bool = False):
        """Chunk ``(B, W, D)`` into ``L``-frame sequences and run LSTM + head."""
        b, w, d = feats.shape
        L = self.sequence_length
        if w % L:
            raise DimensionError(f"window of {w} frames is not a multiple of sequence length {L}")
        chunks = F.reshape(feats, (b * (w // L), L, d))
        hidden, traces = self.stack.forward(chunks, return_traces=True)
        out = F.reshape(self.head.forward(hidden), (b, w, 2))
        return (out, traces) if return_traces else out

    def forward(self, segments, frames, training: bool = False, rngs=None) -> Tensor:
        return self.sequence_outputs(self.features(segments, frames, training, rngs))

    def describe(self) -> dict:
        d = {"modality": self.modality, "sequence_length": self.sequence_length, "hidden_size": self.stack.hidden_size}
        if self.speech is not None:
            d["speech"] = self.speech.config.to_dict()
        if self.visual is not None:
            d["visual"] = self.visual.config.to_dict()
        return d


def build_model(modality: str, speech_config=None, visual_config=None, sequence_length=150, hidden_size=HIDDEN_SIZE, seed=0) -> AffectModel:
    ss = np.random.SeedSequence(seed)
    speech_rng, visual_rng, lstm_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    speech = SpeechNet(speech_config or SpeechNetConfig.tiny(), speech_rng) if modality != "visual" else None
    visual = VisualNet(visual_config or VisualNetConfig.tiny(), visual_rng) if modality != "speech" else None
    return AffectModel(modality, speech, visual, hidden_size, sequence_length, lstm_rng)


# ---------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------

@dataclass
class Window:
    recording: str
    start: int  # first frame
    frames: int


def _check_streams(rec, modality: str) -> None:
    if modality in ("speech", "fusion") and getattr(rec, "audio", None) is None:
        raise DataError(f"recording {rec.id} is missing its audio stream")
    if modality in ("visual", "fusion") and getattr(rec, "frames", None) is None:
        raise DataError(f"recording {rec.id} is missing its video stream")


def recording_windows(rec, modality: str, sequence_length: int) -> list[Window]:
    w = window_frames(modality, sequence_length)
    n = rec.n_frames
    if n % w or n % sequence_length:
        raise ConfigurationError(f"recording {rec.id} has {n} frames, not a multiple of the {w}-frame window")
    return [Window(rec.id, s, w) for s in range(0, n, w)]


class WindowSource:
    """Slices windows out of recordings, caching normalised audio segments."""

    def __init__(self, recordings, modality: str):
        self.recordings = {r.id: r for r in recordings}
        self.modality = modality
        self._segments: dict[str, np.ndarray] = {}
        for r in recordings:
            _check_streams(r, modality)

    def segments(self, rec_id: str) -> np.ndarray:
        if rec_id not in self._segments:
            rec = self.recordings[rec_id]
            n_seg = rec.n_frames // FRAMES_PER_SEGMENT
            audio = np.asarray(rec.audio, dtype=np.float64)[: n_seg * FRAMES_PER_SEGMENT * SAMPLES_PER_FRAME]
            if audio.size != n_seg * FRAMES_PER_SEGMENT * SAMPLES_PER_FRAME:
                raise DataError(f"recording {rec_id} has too little audio for its annotation frames")
            self._segments[rec_id] = np.stack(
                [normalize_segment(s, None) for s in audio.reshape(n_seg, FRAMES_PER_SEGMENT * SAMPLES_PER_FRAME)]
            )
        return self._segments[rec_id]

    def batch(self, windows: list[Window], training: bool = False, augment_rng=None, do_augment: bool = False):
        segs = frames = None
        gold = np.stack([self.recordings[w.recording].trajectory.gold[w.start : w.start + w.frames] for w in windows])
        if self.modality in ("speech", "fusion"):
            segs = np.stack(
                [
                    self.segments(w.recording)[w.start // FRAMES_PER_SEGMENT : (w.start + w.frames) // FRAMES_PER_SEGMENT]
                    for w in windows
                ]
            )
        if self.modality in ("visual", "fusion"):
            stacks = []
            for w in windows:
                f = to_unit(self.recordings[w.recording].frames[w.start : w.start + w.frames])
                if training and do_augment:
                    f = augment(f, augment_rng)
                stacks.append(f)
            frames = np.stack(stacks)
        return segs, frames, gold


# ---------------------------------------------------------------------
# prediction and evaluation
# ---------------------------------------------------------------------

def predict(model: AffectModel, recording, batch: int = 4) -> np.ndarray:
    """Evaluation-mode ``(T, 2)`` arousal/valence predictions, one per 40 ms."""
    _check_streams(recording, model.modality)
    source = WindowSource([recording], model.modality)
    windows = recording_windows(recording, model.modality, model.sequence_length)
    out = np.empty((recording.n_frames, 2))
    with no_grad():
        for i in range(0, len(windows), batch):
            group = windows[i : i + batch]
            segs, frames, _ = source.batch(group)
            pred = model.forward(segs, frames, training=False).data
            for w, p in zip(group, pred):
                out[w.start : w.start + w.frames] = p
    return out


def split_rho(predictions: dict[str, np.ndarray], recordings) -> dict[str, float]:
    """ρc per dimension over the concatenation of all recordings in a split."""
    pred = np.concatenate([predictions[r.id] for r in recordings])
    gold = np.concatenate([r.trajectory.gold for r in recordings])
    return {dim: metrics.ccc(pred[:, k], gold[:, k]) for k, dim in enumerate(DIMENSIONS)}


def evaluate(model: AffectModel, recordings) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    preds = {r.id: predict(model, r) for r in recordings}
    return split_rho(preds, recordings), preds


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: AffectModel
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    epochs: int = 0

    def last(self, split: str = "validation") -> dict[str, float]:
        for row in reversed(self.history):
            if f"{split}_arousal" in row:
                return {d: row[f"{split}_{d}"] for d in DIMENSIONS}
        return {}

    def metrics_csv(self) -> str:
        columns = ["epoch", "step", "loss"]
        for split in self.config.eval_splits:
            columns += [f"{split}_{d}" for d in DIMENSIONS]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in self.history:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])
        return buf.getvalue()


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def monitored_dimensions(modality: str) -> tuple[str, ...]:
    """Dimensions each modality is expected to carry on the synthetic data."""
    return {"speech": ("arousal",), "visual": ("valence",), "fusion": DIMENSIONS}[modality]


def _loss(pred: Tensor, gold: np.ndarray, objective: str) -> Tensor:
    if objective == "ccc":
        return metrics.concordance_loss(pred, gold)
    return metrics.mse_loss(pred, gold)


def train(model: AffectModel, dataset, config: TrainConfig, train_split: str = "train") -> TrainResult:
    """Optimise ``model`` on ``dataset[train_split]`` with Adam.

    Stops after ``config.epochs`` epochs, ``config.max_steps`` optimizer
    steps, or as soon as the end-of-epoch training ρc reaches
    ``config.target_rho`` on the modality's monitored dimensions.
    """
    if model.sequence_length != config.sequence_length:
        model.sequence_length = config.sequence_length
    train_recs = dataset.split_recordings(train_split)
    source = WindowSource(train_recs, model.modality)
    windows = [w for r in train_recs for w in recording_windows(r, model.modality, config.sequence_length)]
    batch_size = config.audio_batch if model.modality == "speech" else config.video_batch
    ss = np.random.SeedSequence([config.seed, 1])
    order_rng, dropout_rng, augment_rng = (np.random.default_rng(s) for s in ss.spawn(3))

    params = model.parameters()
    if config.freeze_extractors:
        frozen = {id(p) for p in model.extractor_parameters()}
        params = [p for p in params if id(p) not in frozen]
    optimizer = Adam(params, lr=config.learning_rate, clip_norm=config.clip_norm)
    result = TrainResult(model, config)
    eval_sets = {s: (train_recs if s == train_split else dataset.split_recordings(s)) for s in config.eval_splits}
    monitored = monitored_dimensions(model.modality)

    def record(epoch: int, loss: float) -> dict:
        row = {"epoch": epoch, "step": result.steps, "loss": loss}
        for split, recs in eval_sets.items():
            rho, _ = evaluate(model, recs)
            for dim in DIMENSIONS:
                row[f"{split}_{dim}"] = rho[dim]
        result.history.append(row)
        logger.info("epoch %d step %d loss %.4f %s", epoch, result.steps, loss, row)
        return row

    def reached(row: dict) -> bool:
        if config.target_rho is None or f"{train_split}_arousal" not in row:
            return False
        return all(row[f"{train_split}_{d}"] >= config.target_rho for d in monitored)

    row = record(0, float("nan"))
    if reached(row):
        return result
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(windows))
        losses = []
        for i in range(0, len(order), batch_size):
            group = [windows[j] for j in order[i : i + batch_size]]
            segs, frames, gold = source.batch(group, training=True, augment_rng=augment_rng, do_augment=config.augment)
            optimizer.zero_grad()
            model.zero_grad()
            pred = model.forward(segs, frames, training=True, rngs={"dropout": dropout_rng})
            loss = _loss(pred, gold, config.objective)
            backward(loss)
            optimizer.step()
            losses.append(loss.item())
            result.steps += 1
            if config.max_steps is not None and result.steps >= config.max_steps:
                break
        result.epochs = epoch
        out_of_steps = config.max_steps is not None and result.steps >= config.max_steps
        if epoch % config.eval_every and epoch != config.epochs and not out_of_steps:
            result.history.append({"epoch": epoch, "step": result.steps, "loss": float(np.mean(losses))})
            continue
        row = record(epoch, float(np.mean(losses)))
        if reached(row) or out_of_steps:
            break
    return result


def pretrain_speech(dataset, config: TrainConfig, speech_config: SpeechNetConfig | None = None) -> TrainResult:
    model = build_model("speech", speech_config=speech_config, sequence_length=config.sequence_length,
                        hidden_size=config.hidden_size, seed=config.seed)
    return train(model, dataset, config)


def pretrain_visual(dataset, config: TrainConfig, visual_config: VisualNetConfig | None = None) -> TrainResult:
    model = build_model("visual", visual_config=visual_config, sequence_length=config.sequence_length,
                        hidden_size=config.hidden_size, seed=config.seed)
    return train(model, dataset, config)


def train_multimodal(dataset, speech: SpeechNet, visual: VisualNet, config: TrainConfig) -> TrainResult:
    """Fresh two-layer LSTM on concatenated (speech, visual) features.

    The unimodal LSTMs are not reused; the extractors are fine-tuned unless
    ``config.freeze_extractors`` is set.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    model = AffectModel("fusion", speech, visual, config.hidden_size, config.sequence_length, rng)
    return train(model, dataset, config)


def ablate_sequence_length(
    dataset,
    config: TrainConfig,
    lengths=(75, 150, 300),
    modalities=("visual", "speech"),
    speech_config=None,
    visual_config=None,
) -> list[dict]:
    """Train one unimodal model per (modality, length); report validation ρc."""
    rows = []
    for modality in modalities:
        for L in lengths:
            window_frames(modality, L)
            cfg = replace(config, sequence_length=int(L), eval_splits=("validation",), target_rho=None)
            model = build_model(modality, speech_config, visual_config, int(L), cfg.hidden_size, cfg.seed)
            result = train(model, dataset, cfg)
            rho = result.last("validation")
            rows.append({"modality": modality, "sequence_length": int(L), **rho})
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["modality", "sequence_length", "arousal", "valence"])
    for r in rows:
        writer.writerow([r["modality"], r["sequence_length"], repr(float(r["arousal"])), repr(float(r["valence"]))])
    return buf.getvalue()


# ---------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + one TNSR file per parameter
# ---------------------------------------------------------------------

def save_checkpoint(model: AffectModel, directory, metadata: dict | None = None) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, p in model.named_parameters():
        filename = f"{name}.tnsr"
        save_tensor(root / filename, p.data)
        tensors.append({"name": name, "file": filename, "shape": list(p.shape)})
    manifest = {
        "format": "affect-e2e-checkpoint",
        "version": 1,
        "model": model.describe(),
        "tensors": tensors,
        "metadata": metadata or {},
    }
    write_atomic(root / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return root


def load_checkpoint(directory) -> tuple[AffectModel, dict]:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.exists():
        raise DataError("checkpoint manifest not found", path)
    try:
        manifest = json.loads(path.read_text())
        desc = manifest["model"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"unreadable checkpoint manifest: {exc}", path) from exc
    speech_cfg = SpeechNetConfig(**desc["speech"]) if "speech" in desc else None
    visual_cfg = VisualNetConfig.from_dict(desc["visual"]) if "visual" in desc else None
    model = build_model(desc["modality"], speech_cfg, visual_cfg, desc["sequence_length"], desc["hidden_size"])
    state = {t["name"]: load_tensor(root / t["file"]) for t in manifest["tensors"]}
    model.load_state_dict(state)
    return model, manifest.get("metadata", {})
