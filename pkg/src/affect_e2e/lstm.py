"""LSTM layers, two-layer stacks and the arousal/valence output head.

Each layer's whole recurrence is a single autodiff node: the forward pass
runs the time loop in numpy and the backward pass does backpropagation
through time by hand.  Gate order in the packed weights is
(input, forget, cell candidate, output).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from affect_e2e.autodiff import functional as F
from affect_e2e.autodiff.module import Module, glorot_uniform
from affect_e2e.autodiff.tensor import Tensor, as_tensor
from affect_e2e.errors import DimensionError

HIDDEN_SIZE = 256
FORGET_BIAS = 1.0


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ActivationTrace:
    """Per-step hidden outputs ``hidden`` (``(..., T, H)``) and optional gates.

    ``gates`` maps ``"input"``, ``"forget"``, ``"cell"``, ``"output"`` to
    arrays shaped like ``hidden``.
    """

    hidden: np.ndarray
    gates: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.hidden.shape[-2]

    def to_csv(self, path, frame_seconds: float = 0.04) -> None:
        h = self.hidden.reshape(-1, self.hidden.shape[-1])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_s"] + [f"cell_{i:03d}" for i in range(h.shape[1])])
            for t, row in enumerate(h):
                writer.writerow([repr(round(t * frame_seconds, 6))] + [repr(float(v)) for v in row])


class LstmLayer(Module):
    """One LSTM layer.

    ``weight`` is ``(input_size + hidden_size, 4 * hidden_size)``: the first
    ``input_size`` rows act on the input, the rest on the previous hidden
    state.
    """

    def __init__(self, input_size: int, hidden_size: int = HIDDEN_SIZE, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weight = glorot_uniform(rng, (input_size + hidden_size, 4 * hidden_size), input_size + hidden_size, hidden_size)
        bias = np.zeros(4 * hidden_size)
        bias[hidden_size : 2 * hidden_size] = FORGET_BIAS
        self.bias = Tensor(bias, requires_grad=True)

    def forward(self, seq, initial_state=None):
        return lstm_forward(seq, self, initial_state)


def lstm_forward(seq, layer: LstmLayer, initial_state=None):
    """Run ``layer`` over ``seq`` shaped ``(T, D)`` or ``(N, T, D)``.

    Returns ``(outputs, (h_T, c_T), trace)``.  ``outputs`` is a tensor shaped
    like ``seq`` with ``D`` replaced by the hidden size.  The initial state
    defaults to zeros; when given, it is a pair of arrays or tensors and the
    gradient flows into tensors that require it.  The final state is
    returned as plain arrays (it is not differentiable).
    """
    seq = as_tensor(seq)
    unbatched = seq.ndim == 2
    x = seq.data[None] if unbatched else seq.data
    if x.ndim != 3:
        raise DimensionError(f"LSTM input must be (T, D) or (N, T, D), got {seq.shape}")
    n, steps, d = x.shape
    hsz = layer.hidden_size
    if d != layer.input_size:
        raise DimensionError(f"LSTM expects {layer.input_size} input features, got {d}")
    if steps < 1:
        raise DimensionError("LSTM needs at least one time step")

    if initial_state is None:
        h0 = Tensor(np.zeros((n, hsz)))
        c0 = Tensor(np.zeros((n, hsz)))
    else:
        h0, c0 = (as_tensor(s) for s in initial_state)
        if h0.data.ndim == 1:
            h0 = F.reshape(h0, (1, hsz))
            c0 = F.reshape(c0, (1, hsz))
        if h0.shape != (n, hsz) or c0.shape != (n, hsz):
            raise DimensionError(f"initial state must be ({n}, {hsz})")

    w = layer.weight.data
    wx, wh = w[:d], w[d:]
    b = layer.bias.data
    zx = x @ wx + b  # (N, T, 4H), one matmul for all steps
    gates = np.empty((n, steps, 4 * hsz))
    cells = np.empty((n, steps, hsz))
    hidden = np.empty((n, steps, hsz))
    h, c = h0.data, c0.data
    for t in range(steps):
        z = zx[:, t] + h @ wh
        act = gates[:, t]
        act[:, : 2 * hsz] = _sigmoid(z[:, : 2 * hsz])
        act[:, 2 * hsz : 3 * hsz] = np.tanh(z[:, 2 * hsz : 3 * hsz])
        act[:, 3 * hsz :] = _sigmoid(z[:, 3 * hsz :])
        i, f, g, o = (act[:, k * hsz : (k + 1) * hsz] for k in range(4))
        c = f * c + i * g
        h = o * np.tanh(c)
        cells[:, t] = c
        hidden[:, t] = h

    def backward(grad_out):
        gh_seq = grad_out[None] if unbatched else grad_out
        dz = np.empty_like(gates)
        dh_next = np.zeros((n, hsz))
        dc_next = np.zeros((n, hsz))
        dwh = np.zeros_like(wh)
        for t in range(steps - 1, -1, -1):
            act = gates[:, t]
            i, f, g, o = (act[:, k * hsz : (k + 1) * hsz] for k in range(4))
            c_prev = cells[:, t - 1] if t > 0 else c0.data
            h_prev = hidden[:, t - 1] if t > 0 else h0.data
            tc = np.tanh(cells[:, t])
            dh = gh_seq[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dzt = dz[:, t]
            dzt[:, :hsz] = dc * g * i * (1.0 - i)
            dzt[:, hsz : 2 * hsz] = dc * c_prev * f * (1.0 - f)
            dzt[:, 2 * hsz : 3 * hsz] = dc * i * (1.0 - g * g)
            dzt[:, 3 * hsz :] = dh * tc * o * (1.0 - o)
            dwh += h_prev.T @ dzt
            dh_next = dzt @ wh.T
            dc_next = dc * f
        flat_dz = dz.reshape(-1, 4 * hsz)
        dwx = x.reshape(-1, d).T @ flat_dz
        dx = (dz @ wx.T) if seq.requires_grad else None
        if dx is not None and unbatched:
            dx = dx[0]
        dw = np.concatenate([dwx, dwh], axis=0)
        db = flat_dz.sum(axis=0)
        return dx, dw, db, dh_next, dc_next

    out = Tensor.from_op(
        hidden[0] if unbatched else hidden,
        (seq, layer.weight, layer.bias, h0, c0),
        backward,
        "lstm",
    )
    names = ("input", "forget", "cell", "output")
    gate_views = {name: gates[..., k * hsz : (k + 1) * hsz] for k, name in enumerate(names)}
    if unbatched:
        gate_views = {k: v[0] for k, v in gate_views.items()}
    trace = ActivationTrace(hidden=hidden[0] if unbatched else hidden, gates=gate_views)
    return out, (h.copy(), c.copy()), trace


class LstmStack(Module):
    """Two (or more) LSTM layers applied in sequence."""

    def __init__(self, input_size: int, hidden_size: int = HIDDEN_SIZE, num_layers: int = 2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = []
        size = input_size
        for _ in range(num_layers):
            self.layers.append(LstmLayer(size, hidden_size, rng))
            size = hidden_size
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.input_size != lower.hidden_size:
                raise DimensionError("stacked layer input size must equal the previous hidden size")

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @property
    def hidden_size(self) -> int:
        return self.layers[-1].hidden_size

    def forward(self, seq, return_traces: bool = False):
        traces = []
        out = seq
        for layer in self.layers:
            out, _, trace = lstm_forward(out, layer)
            traces.append(trace)
        return (out, traces) if return_traces else out


def stack_forward(seq, layers) -> Tensor:
    out = seq
    for layer in layers:
        out, _, _ = lstm_forward(out, layer)
    return out


class OutputHead(Module):
    """Per-step linear map to ``outputs`` values squashed by tanh into (-1, 1)."""

    def __init__(self, hidden_size: int = HIDDEN_SIZE, outputs: int = 2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = glorot_uniform(rng, (hidden_size, outputs), hidden_size, outputs)
        self.bias = Tensor(np.zeros(outputs), requires_grad=True)

    def forward(self, hidden) -> Tensor:
        return F.tanh(F.linear(hidden, self.weight, self.bias))


def output_head(hidden, head: OutputHead) -> Tensor:
    return head.forward(hidden)


def record_trace(stack: LstmStack, seq) -> list[ActivationTrace]:
    """Evaluation-mode traces (one per layer) for a ``(T, D)`` feature sequence."""
    from affect_e2e.autodiff.tensor import no_grad

    with no_grad():
        _, traces = stack.forward(as_tensor(seq), return_traces=True)
    return traces


def save_trace_csv(trace: ActivationTrace, path: Path | str) -> None:
    trace.to_csv(path)
