"""Trainable layers: convolutional blocks, recurrent cells, and the bridge
between feature maps and frame sequences.

All layers operate on batched tensors; recurrent code treats a sequence as a
list of (batch, width) frames so gradients flow through time via the ordinary
graph machinery.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, StateError, UsageError
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# -- recurrent ---------------------------------------------------------------

_GATES = ("input", "forget", "output", "candidate")


class LstmCell:
    """One recurrent cell: three sigmoid gates plus a tanh candidate.

    Each gate owns an input-to-hidden matrix, a hidden-to-hidden matrix and a
    bias. The forget bias starts at 1 so memory is retained early in training;
    no peephole connections.
    """

    def __init__(self, input_size: int, hidden_size: int,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w_x: dict[str, Tensor] = {}
        self.w_h: dict[str, Tensor] = {}
        self.bias: dict[str, Tensor] = {}
        for gate in _GATES:
            self.w_x[gate] = Tensor.parameter(
                glorot_uniform(rng, (input_size, hidden_size),
                               input_size, hidden_size)
            )
            self.w_h[gate] = Tensor.parameter(
                glorot_uniform(rng, (hidden_size, hidden_size),
                               hidden_size, hidden_size)
            )
            start = 1.0 if gate == "forget" else 0.0
            self.bias[gate] = Tensor.parameter(np.full(hidden_size, start))

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for gate in _GATES:
            out.append((f"{gate}.w_x", self.w_x[gate]))
            out.append((f"{gate}.w_h", self.w_h[gate]))
            out.append((f"{gate}.bias", self.bias[gate]))
        return out

    def parameter_count(self) -> int:
        return 4 * (self.input_size * self.hidden_size
                    + self.hidden_size * self.hidden_size + self.hidden_size)


@dataclasses.dataclass
class RecurrentState:
    """Exposed state h plus memory cell contents c, both (batch, hidden)."""

    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden_size: int) -> "RecurrentState":
        return cls(Tensor(np.zeros((batch, hidden_size))),
                   Tensor(np.zeros((batch, hidden_size))))


def lstm_step(cell: LstmCell, x_t: Tensor, state: RecurrentState) -> RecurrentState:
    """One recurrent update; differentiable through time via the graph."""
    if x_t.ndim != 2 or x_t.shape[1] != cell.input_size:
        raise DimensionError(
            f"frame shape {x_t.shape} does not match input size {cell.input_size}"
        )
    if state.h.shape != (x_t.shape[0], cell.hidden_size):
        raise DimensionError(
            f"state shape {state.h.shape} does not match hidden size "
            f"{cell.hidden_size} and batch {x_t.shape[0]}"
        )

    def gate(name):
        return (T.matmul(x_t, cell.w_x[name]) + T.matmul(state.h, cell.w_h[name])
                + cell.bias[name])

    i = T.sigmoid(gate("input"))
    f = T.sigmoid(gate("forget"))
    o = T.sigmoid(gate("output"))
    g = T.tanh(gate("candidate"))
    c_next = f * state.c + i * g
    h_next = o * T.tanh(c_next)
    return RecurrentState(h_next, c_next)


def run_lstm(cell: LstmCell, frames: Sequence[Tensor],
             reverse: bool = False) -> list[Tensor]:
    """Unroll over the sequence from zero state; outputs stay in frame order.

    With ``reverse`` the cell consumes the last frame first, so the output at
    position t is the state after seeing frames T-1 down to t.
    """
    if not frames:
        raise UsageError("cannot run a recurrent layer over an empty sequence")
    batch = frames[0].shape[0]
    state = RecurrentState.zeros(batch, cell.hidden_size)
    order = range(len(frames) - 1, -1, -1) if reverse else range(len(frames))
    outputs: list[Optional[Tensor]] = [None] * len(frames)
    for t in order:
        state = lstm_step(cell, frames[t], state)
        outputs[t] = state.h
    return outputs  # type: ignore[return-value]


def bilstm_layer(forward_cell: LstmCell, backward_cell: LstmCell,
                 frames: Sequence[Tensor]) -> list[Tensor]:
    """Concatenate a left-to-right and a right-to-left pass per frame."""
    fwd = run_lstm(forward_cell, frames)
    bwd = run_lstm(backward_cell, frames, reverse=True)
    return [T.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]


# -- map / sequence bridge ------------------------------------------------------


def map_to_sequence(feature_maps: Tensor) -> list[Tensor]:
    """Split (N, C, H, W) maps into W frames, each (N, C*H).

    Frame i is column i of every map, channel-major then row — left to right.
    A 3-D (C, H, W) input yields 1-D frames of width C*H.
    """
    squeeze = feature_maps.ndim == 3
    maps4 = (T.reshape(feature_maps, (1,) + feature_maps.shape)
             if squeeze else feature_maps)
    n, c, h, w = maps4.shape
    if w < 1:
        raise DimensionError("feature maps have no columns")
    seq = T.reshape(T.transpose(maps4, (3, 0, 1, 2)), (w, n, c * h))
    frames = [T.take0(seq, i) for i in range(w)]
    if squeeze:
        frames = [T.reshape(f, (c * h,)) for f in frames]
    return frames


def sequence_to_maps(frames: Sequence[Tensor], channels: int,
                     height: int) -> Tensor:
    """Inverse bridge, used to verify the rearrangement round-trips exactly."""
    if not frames:
        raise UsageError("cannot rebuild maps from an empty sequence")
    squeeze = frames[0].ndim == 1
    stacked = T.stack0([
        T.reshape(f, (1, channels * height)) if squeeze else f for f in frames
    ])
    w, n, _ = stacked.shape
    maps = T.transpose(T.reshape(stacked, (w, n, channels, height)), (1, 2, 3, 0))
    return T.reshape(maps, (channels, height, w)) if squeeze else maps


# -- feed-forward wrappers ----------------------------------------------------


class ConvLayer:
    """Convolution with optional rectifier, holding its kernels and bias.

    Kernels use a rectifier-aware fan-in scale (uniform within
    +-sqrt(6/fan_in)); without it the deeper un-normalized convs shrink the
    signal and stall the transcription warm-up.
    """

    def __init__(self, in_channels: int, out_channels: int, kh: int, kw: int,
                 stride: tuple[int, int], padding: tuple[int, int],
                 relu: bool, rng: np.random.Generator):
        fan_in = in_channels * kh * kw
        bound = np.sqrt(6.0 / fan_in)
        self.kernels = Tensor.parameter(
            rng.uniform(-bound, bound, size=(out_channels, in_channels, kh, kw))
        )
        self.bias = Tensor.parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding
        self.relu = relu

    def forward(self, x: Tensor, train: bool) -> Tensor:
        out = T.conv2d(x, self.kernels, self.bias, self.stride, self.padding)
        return T.relu(out) if self.relu else out

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("kernels", self.kernels), ("bias", self.bias)]


class MaxPoolLayer:
    def __init__(self, window: tuple[int, int], stride: tuple[int, int]):
        self.window = window
        self.stride = stride

    def forward(self, x: Tensor, train: bool) -> Tensor:
        return T.maxpool2d(x, self.window, self.stride)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return []


class BatchNormLayer:
    """Owns the learned scale/shift and the running statistics buffers."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor.parameter(np.ones(channels))
        self.beta = Tensor.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.initialized = False

    def forward(self, x: Tensor, train: bool) -> Tensor:
        if train:
            self.initialized = True
        elif not self.initialized:
            raise StateError(
                "inference-mode batch norm invoked before any training batch "
                "populated its running statistics"
            )
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training=train,
                            momentum=self.momentum, eps=self.eps)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [("running_mean", self.running_mean),
                ("running_var", self.running_var)]


class RecurrentLayer:
    """A directional or bidirectional recurrent stage over a frame sequence."""

    def __init__(self, input_size: int, hidden_size: int, bidirectional: bool,
                 rng: np.random.Generator):
        self.hidden_size = hidden_size
        self.bidirectional = bidirectional
        self.fwd = LstmCell(input_size, hidden_size, rng)
        self.bwd = LstmCell(input_size, hidden_size, rng) if bidirectional else None

    @property
    def output_size(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)

    def forward(self, frames: Sequence[Tensor]) -> list[Tensor]:
        if self.bwd is not None:
            return bilstm_layer(self.fwd, self.bwd, frames)
        return run_lstm(self.fwd, frames)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"fwd.{n}", p) for n, p in self.fwd.parameters()]
        if self.bwd is not None:
            out += [(f"bwd.{n}", p) for n, p in self.bwd.parameters()]
        return out


class Projection:
    """Per-frame linear map onto the class scores."""

    def __init__(self, in_size: int, out_size: int, rng: np.random.Generator):
        self.weight = Tensor.parameter(
            glorot_uniform(rng, (in_size, out_size), in_size, out_size)
        )
        self.bias = Tensor.parameter(np.zeros(out_size))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]
