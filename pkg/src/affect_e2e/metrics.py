"""Concordance correlation coefficient (CCC), its loss and gradient.

All moments are population (1/N) moments.  ``cov_xy`` may be negative.

The tensor-level losses at the bottom (:func:`concordance_loss`,
:func:`mse_loss`) wrap the closed-form gradient into a single autodiff
node so training does not rebuild the CCC expression from primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from affect_e2e.autodiff.tensor import Tensor, as_tensor
from affect_e2e.errors import DegenerateInputError, DimensionError


@dataclass(frozen=True)
class MomentSet:
    mu_x: float
    mu_y: float
    var_x: float
    var_y: float
    cov_xy: float

    @property
    def psi(self) -> float:
        return self.var_x + self.var_y + (self.mu_x - self.mu_y) ** 2


def _pair(pred, gold) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gold, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"prediction shape {x.shape} != gold shape {y.shape}")
    if x.shape[-1] < 2:
        raise DimensionError("need at least two values per sequence")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("sequences must be finite")
    return x, y


def moments(pred, gold) -> MomentSet:
    x, y = _pair(pred, gold)
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    return MomentSet(mx, my, float(np.mean(dx * dx)), float(np.mean(dy * dy)), float(np.mean(dx * dy)))


def _batched_moments(x: np.ndarray, y: np.ndarray):
    mx = x.mean(axis=-1, keepdims=True)
    my = y.mean(axis=-1, keepdims=True)
    dx, dy = x - mx, y - my
    var_x = np.mean(dx * dx, axis=-1)
    var_y = np.mean(dy * dy, axis=-1)
    cov = np.mean(dx * dy, axis=-1)
    psi = var_x + var_y + (mx[..., 0] - my[..., 0]) ** 2
    if np.any(psi <= 0.0):
        raise DegenerateInputError("both sequences constant with equal means; CCC undefined")
    return mx, my, cov, psi


def ccc(pred, gold) -> float:
    """Concordance correlation coefficient 2*cov / (var_x + var_y + (mu_x - mu_y)^2)."""
    m = moments(pred, gold)
    if m.psi <= 0.0:
        raise DegenerateInputError("both sequences constant with equal means; CCC undefined")
    return float(2.0 * m.cov_xy / m.psi)


def ccc_loss(pred, gold) -> float:
    return 1.0 - ccc(pred, gold)


def ccc_loss_grad(pred, gold) -> np.ndarray:
    """Exact d(1 - ccc)/d pred.

    Works on the last axis, so a ``(..., N)`` batch gives one gradient row
    per sequence.
    """
    x, y = _pair(pred, gold)
    n = x.shape[-1]
    _, my, cov, psi = _batched_moments(x, y)
    cov = cov[..., None]
    psi = psi[..., None]
    return (2.0 / n) * (2.0 * cov * (x - my) / psi**2 + (my - y) / psi)


def pearson(pred, gold) -> float:
    x, y = _pair(pred, gold)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.mean(dx * dx)), np.sqrt(np.mean(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("Pearson correlation needs non-constant sequences")
    return float(np.mean(dx * dy) / (sx * sy))


def mse(pred, gold) -> float:
    x, y = _pair(pred, gold)
    return float(np.mean((x - y) ** 2))


def combined_loss(arousal_pair, valence_pair) -> float:
    """Mean of the arousal and valence CCC losses; each pair is ``(pred, gold)``."""
    return 0.5 * (ccc_loss(*arousal_pair) + ccc_loss(*valence_pair))


# ---------------------------------------------------------------------
# autodiff losses
# ---------------------------------------------------------------------

def concordance_loss(pred, gold) -> Tensor:
    """Mean CCC loss over every sequence and affect dimension.

    ``pred`` is a tensor shaped ``(B, L, D)`` (or ``(L, D)``) and ``gold``
    an array of the same shape; each ``(b, :, d)`` column is one sequence.
    With ``D = 2`` this is the arousal/valence average applied per chunk
    and then averaged over chunks.
    """
    pred = as_tensor(pred)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape:
        raise DimensionError(f"prediction shape {pred.shape} != gold shape {gold.shape}")
    x = np.moveaxis(pred.data, -2, -1)
    y = np.moveaxis(gold, -2, -1)
    _, _, cov, psi = _batched_moments(x, y)
    losses = 1.0 - 2.0 * cov / psi
    count = losses.size

    def backward(g):
        dx = ccc_loss_grad(x, y) * (float(g) / count)
        return (np.moveaxis(dx, -1, -2),)

    return Tensor.from_op(np.array(losses.mean()), (pred,), backward, "concordance_loss")


def mse_loss(pred, gold) -> Tensor:
    pred = as_tensor(pred)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape:
        raise DimensionError(f"prediction shape {pred.shape} != gold shape {gold.shape}")
    diff = pred.data - gold

    def backward(g):
        return (float(g) * 2.0 * diff / diff.size,)

    return Tensor.from_op(np.array(np.mean(diff * diff)), (pred,), backward, "mse_loss")
