"""Acoustic descriptors and recurrent-cell correlation reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from affect_e2e.autodiff.serialization import write_atomic
from affect_e2e.autodiff.tensor import no_grad
from affect_e2e.errors import DataError

SAMPLE_RATE = 16000
FRAME_RATE = 25
LOUDNESS_REF = 1e-3
RANGE_SECONDS = 1.0
F0_BAND = (80.0, 400.0)
VOICING_THRESHOLD = 0.3
DESCRIPTORS = ("rms_energy", "rms_range", "loudness", "f0")


@dataclass
class AcousticDescriptors:
    """Per-40 ms descriptor tracks; ``voiced`` marks frames with their own F0."""

    rms_energy: np.ndarray
    rms_range: np.ndarray
    loudness: np.ndarray
    f0: np.ndarray
    voiced: np.ndarray

    def __len__(self) -> int:
        return self.rms_energy.size

    def track(self, name: str) -> np.ndarray:
        if name not in DESCRIPTORS:
            raise KeyError(name)
        return getattr(self, name)


def frame_audio(audio, sample_rate: int = SAMPLE_RATE, frame_rate: int = FRAME_RATE) -> np.ndarray:
    x = np.asarray(audio, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DataError("descriptor extraction needs non-empty mono audio")
    hop = sample_rate // frame_rate
    n = x.size // hop
    if n == 0:
        raise DataError(f"audio of {x.size} samples is shorter than one {hop}-sample frame")
    return x[: n * hop].reshape(n, hop)


def sliding_range(track: np.ndarray, window: int) -> np.ndarray:
    """max - min over a centred window, shrunk at the ends."""
    half = window // 2
    out = np.empty_like(track)
    for t in range(track.size):
        seg = track[max(0, t - half) : t + half + 1]
        out[t] = seg.max() - seg.min()
    return out


def frame_f0(frame: np.ndarray, sample_rate: int = SAMPLE_RATE, band=F0_BAND) -> tuple[float, float]:
    """(F0 in Hz, peak normalised autocorrelation) for one frame.

    The earliest local maximum within 90% of the best in-band peak is taken,
    which avoids locking onto multiples of the period.
    """
    x = frame - frame.mean()
    n = x.size
    lo = int(np.floor(sample_rate / band[1]))
    hi = min(int(np.ceil(sample_rate / band[0])), n - 2)
    if hi <= lo + 1 or not np.any(x):
        return float("nan"), 0.0
    r = np.zeros(hi + 2)
    for k in range(lo - 1, hi + 2):
        a, b = x[: n - k], x[k:]
        denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
        r[k] = np.dot(a, b) / denom if denom > 0 else 0.0
    lags = np.arange(lo, hi + 1)
    vals = r[lags]
    best = vals.max()
    if best < VOICING_THRESHOLD:
        return float("nan"), float(best)
    peaks = [k for k in lags if r[k] >= r[k - 1] and r[k] >= r[k + 1] and r[k] >= 0.9 * best]
    k = peaks[0] if peaks else int(lags[np.argmax(vals)])
    left, mid, right = r[k - 1], r[k], r[k + 1]
    curvature = left - 2 * mid + right
    offset = 0.5 * (left - right) / curvature if curvature < 0 else 0.0
    return sample_rate / (k + offset), float(mid)


def compute_descriptors(audio, sample_rate: int = SAMPLE_RATE, frame_rate: int = FRAME_RATE) -> AcousticDescriptors:
    frames = frame_audio(audio, sample_rate, frame_rate)
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    rms_range = sliding_range(rms, int(round(RANGE_SECONDS * frame_rate)))
    loudness = np.log1p(rms / LOUDNESS_REF)
    f0 = np.full(len(frames), np.nan)
    voiced = np.zeros(len(frames), dtype=bool)
    last = np.nan
    for t, frame in enumerate(frames):
        estimate, _ = frame_f0(frame, sample_rate)
        if np.isfinite(estimate):
            last = estimate
            voiced[t] = True
        f0[t] = last
    return AcousticDescriptors(rms, rms_range, loudness, f0, voiced)


# ---------------------------------------------------------------------
# cell correlation
# ---------------------------------------------------------------------

def hidden_traces(model, recording, batch: int = 4) -> list[np.ndarray]:
    """Evaluation-mode hidden outputs ``(T, H)`` of each recurrent layer.

    Windows and sequence chunks are the same as in prediction, so the LSTM
    state resets every ``model.sequence_length`` frames.
    """
    from affect_e2e.trainer import WindowSource, recording_windows

    source = WindowSource([recording], model.modality)
    windows = recording_windows(recording, model.modality, model.sequence_length)
    per_layer: list[list[np.ndarray]] = [[] for _ in model.stack.layers]
    with no_grad():
        for i in range(0, len(windows), batch):
            group = windows[i : i + batch]
            segs, frames, _ = source.batch(group)
            feats = model.features(segs, frames, training=False)
            _, traces = model.sequence_outputs(feats, return_traces=True)
            for layer, trace in enumerate(traces):
                per_layer[layer].append(trace.hidden.reshape(-1, trace.hidden.shape[-1]))
    return [np.concatenate(parts) for parts in per_layer]


@dataclass
class CellCorrelation:
    layer: int
    cell: int
    descriptor: str
    rho: float
    degenerate: bool


@dataclass
class GateCorrelationReport:
    rows: list[CellCorrelation]
    traces: list[np.ndarray]
    descriptors: AcousticDescriptors
    frame_seconds: float = 1.0 / FRAME_RATE

    def max_abs(self, descriptor: str, layer: int | None = None) -> float:
        vals = [abs(r.rho) for r in self.rows if r.descriptor == descriptor and not r.degenerate and (layer is None or r.layer == layer)]
        return max(vals) if vals else float("nan")

    def top(self, descriptor: str, k: int = 3) -> list[CellCorrelation]:
        return [r for r in self.rows if r.descriptor == descriptor and not r.degenerate][:k]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "cell", "descriptor", "rho", "degenerate"])
        for r in self.rows:
            writer.writerow([r.layer, r.cell, r.descriptor, "" if r.degenerate else repr(float(r.rho)), int(r.degenerate)])
        return buf.getvalue()

    def plot_csv(self, descriptor: str, k: int = 3) -> str:
        """Descriptor and its top-``k`` cells over time, each rescaled to [0, 1]."""
        cells = self.top(descriptor, k)
        columns = [_unit_range(self.descriptors.track(descriptor))]
        names = [f"{descriptor}_norm"]
        for r in cells:
            columns.append(_unit_range(self.traces[r.layer][:, r.cell]))
            names.append(f"layer{r.layer}_cell{r.cell:03d}_norm")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time_s"] + names)
        for t in range(len(columns[0])):
            writer.writerow([repr(round(t * self.frame_seconds, 6))] + [_cell(c[t]) for c in columns])
        return buf.getvalue()

    def write(self, directory, k: int = 3) -> list[Path]:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        paths = [root / "gate_correlations.csv"]
        write_atomic(paths[0], self.to_csv().encode())
        for name in DESCRIPTORS:
            path = root / f"gate_plot_{name}.csv"
            write_atomic(path, self.plot_csv(name, k).encode())
            paths.append(path)
        return paths


def _cell(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def _unit_range(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(x)
    if not finite.any():
        return x
    lo, hi = x[finite].min(), x[finite].max()
    return np.where(finite, (x - lo) / (hi - lo), np.nan) if hi > lo else np.where(finite, 0.0, np.nan)


def _pearson_columns(traces: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson ρ of every column of ``traces`` with ``target``; NaN-free frames only."""
    keep = np.isfinite(target)
    h = traces[keep]
    y = target[keep]
    hc = h - h.mean(axis=0)
    yc = y - y.mean()
    sh = np.sqrt(np.sum(hc * hc, axis=0))
    sy = np.sqrt(np.sum(yc * yc))
    degenerate = sh <= 1e-12 * max(1.0, float(np.abs(h).max(initial=0.0)))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (hc.T @ yc) / (sh * sy)
    if sy == 0.0 or keep.sum() < 2:
        degenerate = np.ones_like(degenerate)
    rho = np.where(degenerate, np.nan, np.clip(rho, -1.0, 1.0))
    return rho, degenerate


def gate_correlation(model, recording) -> GateCorrelationReport:
    """Pearson ρ between every cell's hidden output and each descriptor, for both layers.

    Constant cells are flagged degenerate and carry no ρ.  Rows are sorted
    by |ρ| (degenerate rows last), ties by layer, cell and descriptor.
    """
    if getattr(recording, "audio", None) is None:
        raise DataError(f"recording {recording.id} has no audio for descriptor extraction")
    traces = hidden_traces(model, recording)
    desc = compute_descriptors(recording.audio)
    n = min(len(desc), traces[0].shape[0])
    traces = [t[:n] for t in traces]
    rows = []
    for name in DESCRIPTORS:
        target = desc.track(name)[:n]
        for layer, h in enumerate(traces):
            rho, degenerate = _pearson_columns(h, target)
            rows.extend(CellCorrelation(layer, c, name, float(rho[c]), bool(degenerate[c])) for c in range(h.shape[1]))
    order = {name: i for i, name in enumerate(DESCRIPTORS)}
    rows.sort(key=lambda r: (r.degenerate, -abs(r.rho) if not r.degenerate else 0.0, r.layer, r.cell, order[r.descriptor]))
    return GateCorrelationReport(rows, traces, desc)
