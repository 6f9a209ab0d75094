"""Validation-fitted prediction post-processing.

Four steps are tried greedily in a fixed order (median filter, centring,
scaling, time shift).  Each is kept only when it strictly raises ρc on the
validation pair, and the kept steps are then replayed unchanged on new
predictions.  Chains are fitted per affect dimension.

A "track" is a 1-d array at 25 Hz.  Every function also accepts a list of
tracks (one per recording): filtering and shifting act per recording while
ρc, means and deviations are pooled over the concatenation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from affect_e2e import metrics
from affect_e2e.autodiff.serialization import write_atomic
from affect_e2e.errors import DataError, DegenerateInputError, ParameterError

FRAME_RATE = 25
STEP_ORDER = ("median", "center", "scale", "shift")
MEDIAN_SECONDS = (0.4, 0.8, 1.6, 3.2, 6.4, 12.8, 20.0)
MAX_MEDIAN_FRAMES = 500
MAX_SHIFT_FRAMES = 250
MIN_GAIN = 1e-12


def median_window_frames(seconds: float, frame_rate: int = FRAME_RATE) -> int:
    """Odd window length closest to ``seconds`` (rounded up, or down at the 500-frame cap)."""
    frames = int(round(seconds * frame_rate))
    odd = frames if frames % 2 else frames + 1
    if odd > MAX_MEDIAN_FRAMES:
        odd = frames - 1 if frames % 2 == 0 else frames - 2
    return max(odd, 3)


DEFAULT_MEDIAN_WINDOWS = tuple(median_window_frames(s) for s in MEDIAN_SECONDS)
DEFAULT_SHIFTS = tuple(range(1, MAX_SHIFT_FRAMES + 1))


def _track(pred) -> np.ndarray:
    x = np.asarray(pred, dtype=np.float64)
    if x.ndim != 1:
        raise ParameterError(f"a track is 1-d, got shape {x.shape}")
    return x


def _tracks(pred) -> list[np.ndarray]:
    if isinstance(pred, (list, tuple)) and pred and np.ndim(pred[0]) == 1:
        return [_track(p) for p in pred]
    return [_track(pred)]


def _like(original, tracks: list[np.ndarray]):
    return tracks if isinstance(original, (list, tuple)) and original and np.ndim(original[0]) == 1 else tracks[0]


def _concat(pred) -> np.ndarray:
    return np.concatenate(_tracks(pred))


# ---------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------

def median_filter(pred, window: int):
    """Centred sliding median; near the ends the window shrinks to fit."""
    if isinstance(window, bool) or int(window) != window:
        raise ParameterError("median window must be an integer")
    window = int(window)
    if window < 3 or window % 2 == 0:
        raise ParameterError(f"median window must be odd and >= 3, got {window}")
    out = []
    for x in _tracks(pred):
        if window > x.size:
            raise ParameterError(f"median window {window} exceeds track length {x.size}")
        half = window // 2
        y = np.empty_like(x)
        y[half : x.size - half] = np.median(np.lib.stride_tricks.sliding_window_view(x, window), axis=1)
        for t in list(range(half)) + list(range(x.size - half, x.size)):
            y[t] = np.median(x[max(0, t - half) : t + half + 1])
        out.append(y)
    return _like(pred, out)


def center(pred, bias: float):
    return _like(pred, [x + float(bias) for x in _tracks(pred)])


def scale(pred, ratio: float):
    """Stretch deviations from the (pooled) prediction mean by ``ratio``."""
    if not ratio > 0:
        raise ParameterError(f"scale ratio must be positive, got {ratio}")
    tracks = _tracks(pred)
    mu = np.concatenate(tracks).mean()
    return _like(pred, [mu + ratio * (x - mu) for x in tracks])


def time_shift(pred, k: int):
    """Delay by ``k`` frames: ``out[t] = pred[t - k]``; the first ``k`` frames hold ``pred[0]``."""
    if isinstance(k, bool) or int(k) != k:
        raise ParameterError("shift must be an integer number of frames")
    k = int(k)
    out = []
    for x in _tracks(pred):
        if not 0 <= k < x.size:
            raise ParameterError(f"shift {k} outside [0, {x.size})")
        y = np.empty_like(x)
        y[:k] = x[0]
        y[k:] = x[: x.size - k]
        out.append(y)
    return _like(pred, out)


def fit_bias(pred, gold) -> float:
    return float(_concat(gold).mean() - _concat(pred).mean())


def fit_ratio(pred, gold) -> float:
    sp = _concat(pred).std()
    if sp == 0.0:
        raise DegenerateInputError("cannot fit a scale ratio to a constant prediction")
    return float(_concat(gold).std() / sp)


# ---------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------

@dataclass
class ChainStep:
    name: str
    parameter: float | int | None
    kept: bool
    rho_before: float
    rho_after: float


@dataclass
class PostProcessChain:
    steps: list[ChainStep] = field(default_factory=list)

    def kept(self) -> list[ChainStep]:
        return [s for s in self.steps if s.kept]

    def parameter(self, name: str):
        for s in self.steps:
            if s.name == name and s.kept:
                return s.parameter
        return None

    @property
    def median_window(self):
        return self.parameter("median")

    @property
    def center_bias(self):
        return self.parameter("center")

    @property
    def scale_ratio(self):
        return self.parameter("scale")

    @property
    def shift_frames(self):
        return self.parameter("shift")

    @property
    def trace(self) -> list[float]:
        """Validation ρc before fitting, then after each step (kept or not)."""
        if not self.steps:
            return []
        rho = [self.steps[0].rho_before]
        for s in self.steps:
            rho.append(s.rho_after if s.kept else rho[-1])
        return rho

    def to_dict(self) -> dict:
        return {"order": list(STEP_ORDER), "steps": [asdict(s) for s in self.steps]}

    @classmethod
    def from_dict(cls, d: dict) -> "PostProcessChain":
        steps = []
        for s in d.get("steps", []):
            if s["name"] not in STEP_ORDER:
                raise DataError(f"unknown post-processing step {s['name']!r}")
            steps.append(ChainStep(s["name"], s["parameter"], bool(s["kept"]), float(s["rho_before"]), float(s["rho_after"])))
        return cls(steps)


def _apply_step(name: str, pred, parameter):
    if name == "median":
        return median_filter(pred, int(parameter))
    if name == "center":
        return center(pred, parameter)
    if name == "scale":
        return scale(pred, parameter)
    if name == "shift":
        return time_shift(pred, int(parameter))
    raise ParameterError(f"unknown step {name!r}")


def _rho(pred, gold) -> float:
    return metrics.ccc(_concat(pred), _concat(gold))


def fit_chain(
    val_pred,
    val_gold,
    median_windows=DEFAULT_MEDIAN_WINDOWS,
    shifts=DEFAULT_SHIFTS,
    min_gain: float = MIN_GAIN,
) -> PostProcessChain:
    """Greedy keep-if-improves search over the four steps.

    A step is kept when it raises ρc by more than ``min_gain``, which only
    screens out floating-point noise.  Ties between grid candidates go to
    the smallest parameter.  Candidates that do not fit the shortest track
    are skipped.
    """
    gold = _like(val_pred, _tracks(val_gold))
    if len(_tracks(val_pred)) != len(_tracks(gold)) or any(
        p.shape != g.shape for p, g in zip(_tracks(val_pred), _tracks(gold))
    ):
        raise ParameterError("prediction and gold tracks must have matching lengths")
    current = val_pred
    rho = _rho(current, gold)
    shortest = min(x.size for x in _tracks(val_pred))
    chain = PostProcessChain()

    for name in STEP_ORDER:
        if name == "median":
            candidates = sorted(w for w in median_windows if w <= shortest)
        elif name == "center":
            candidates = [fit_bias(current, gold)]
        elif name == "scale":
            candidates = [fit_ratio(current, gold)]
        else:
            candidates = sorted(k for k in shifts if 0 < k < shortest)
        best_param, best_rho, best_pred = None, -np.inf, None
        for param in candidates:
            trial = _apply_step(name, current, param)
            r = _rho(trial, gold)
            if r > best_rho:
                best_param, best_rho, best_pred = param, r, trial
        kept = best_param is not None and best_rho > rho + min_gain
        after = best_rho if best_param is not None else rho
        param = None if best_param is None else (int(best_param) if name in ("median", "shift") else float(best_param))
        chain.steps.append(ChainStep(name, param, bool(kept), float(rho), float(after)))
        if kept:
            current, rho = best_pred, best_rho
    return chain


def apply_chain(chain: PostProcessChain, pred):
    out = pred
    for step in chain.steps:
        if step.kept:
            out = _apply_step(step.name, out, step.parameter)
    return out


def fit_chains(val_pred: dict[str, object], val_gold: dict[str, object], **grids) -> dict[str, PostProcessChain]:
    """One independent chain per affect dimension."""
    return {dim: fit_chain(val_pred[dim], val_gold[dim], **grids) for dim in val_pred}


def save_chains(path, chains: dict[str, PostProcessChain]) -> None:
    body = {dim: chain.to_dict() for dim, chain in chains.items()}
    write_atomic(Path(path), (json.dumps(body, indent=2, sort_keys=True) + "\n").encode())


def load_chains(path) -> dict[str, PostProcessChain]:
    path = Path(path)
    if not path.exists():
        raise DataError("post-processing chain file not found", path)
    try:
        body = json.loads(path.read_text())
        return {dim: PostProcessChain.from_dict(d) for dim, d in body.items()}
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise DataError(f"malformed chain file: {exc}", path) from exc
