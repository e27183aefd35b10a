"""GRU cells with an optional skip connection to the state ``j`` steps back.

Gates and the candidate read ``h[t-1]``; the final interpolation reads
``h[t-j]`` instead of ``h[t-1]``::

    z  = sigmoid([h[t-1], x] @ W_z + b_z)
    r  = sigmoid([h[t-1], x] @ W_r + b_r)
    hc = tanh([r * h[t-1], x] @ W + b)
    h  = (1 - z) * h[t-j] + z * hc

With ``j = 1`` this is the plain GRU. Weights are stored ``[in, out]`` with
the hidden block first along ``in``.
"""
from __future__ import annotations

from collections import deque
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

GATE_NAMES = ("W_z", "b_z", "W_r", "b_r", "W", "b")


def init_gru_params(input_size: int, hidden: int, rng: np.random.Generator, prefix: str) -> dict:
    lim = np.sqrt(6.0 / (input_size + 2 * hidden))
    params = {}
    for w, b in (("W_z", "b_z"), ("W_r", "b_r"), ("W", "b")):
        params[f"{prefix}.{w}"] = Tensor(rng.uniform(-lim, lim, (hidden + input_size, hidden)), True)
        params[f"{prefix}.{b}"] = Tensor(np.zeros(hidden), True)
    return params


def _get(params: dict, prefix: str | None):
    if prefix is None:
        return [params[k] for k in GATE_NAMES]
    return [params[f"{prefix}.{k}"] for k in GATE_NAMES]


class GruState:
    """Ring buffer of the last ``j`` hidden states, newest last, zero-seeded."""

    def __init__(self, j: int, hidden_shape: tuple):
        if j < 1:
            raise ValueError(f"skip step must be >= 1, got {j}")
        self.j = j
        zero = Tensor(np.zeros(hidden_shape))
        self.buffer: deque = deque([zero] * j, maxlen=j)

    @property
    def prev(self) -> Tensor:
        return self.buffer[-1]

    @property
    def skipped(self) -> Tensor:
        return self.buffer[0]

    def push(self, h: Tensor) -> None:
        self.buffer.append(h)

    def clone(self) -> "GruState":
        other = GruState.__new__(GruState)
        other.j = self.j
        other.buffer = deque(self.buffer, maxlen=self.j)
        return other


def _gates(x_t: Tensor, h_prev: Tensor, W_z, b_z, W_r, b_r, W, b):
    if h_prev.shape[-1] != W_z.shape[1] or x_t.shape[-1] + h_prev.shape[-1] != W_z.shape[0]:
        raise ShapeError(f"gru: x {x_t.shape} and h {h_prev.shape} do not fit weights {W_z.shape}")
    hx = T.concat([h_prev, x_t], axis=-1)
    z = T.sigmoid(T.bias_add(_mm(hx, W_z), b_z))
    r = T.sigmoid(T.bias_add(_mm(hx, W_r), b_r))
    rhx = T.concat([r * h_prev, x_t], axis=-1)
    cand = T.tanh(T.bias_add(_mm(rhx, W), b))
    return z, r, cand


def _mm(a: Tensor, w: Tensor) -> Tensor:
    if a.ndim == 1:
        return T.reshape(T.matmul(T.reshape(a, (1, -1)), w), (w.shape[1],))
    return T.matmul(a, w)


def gru_cell_step(x_t: Tensor, h_prev: Tensor, params: dict, prefix: str | None = None) -> Tensor:
    z, _, cand = _gates(x_t, h_prev, *_get(params, prefix))
    return (1.0 - z) * h_prev + z * cand


def gruskip_cell_step(x_t: Tensor, state: GruState, params: dict, j: int | None = None,
                      prefix: str | None = None, skip_gates: bool = False) -> Tensor:
    """One skip-GRU step; rotates ``state`` and returns the new hidden state.

    ``skip_gates=True`` also feeds ``h[t-j]`` into the gates and candidate.
    """
    if j is not None and j != state.j:
        raise ValueError(f"state holds {state.j} past states but j={j}")
    h_prev = state.prev
    h_skip = state.skipped
    z, _, cand = _gates(x_t, h_skip if skip_gates else h_prev, *_get(params, prefix))
    h = (1.0 - z) * h_skip + z * cand
    state.push(h)
    return h


def gruskip_layer_forward(seq: Tensor, params: dict, j: int, dropout_rate: float = 0.0,
                          training: bool = False, rng: np.random.Generator | None = None,
                          prefix: str | None = None, skip_gates: bool = False) -> Tensor:
    """Scan ``seq`` (``[T, in]`` or ``[B, T, in]``) and return every hidden state.

    Dropout is applied to the emitted sequence in train mode only; the
    recurrent state itself is never dropped.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    if seq.ndim not in (2, 3) or seq.shape[-2] < 1:
        raise ShapeError(f"gruskip layer expects [T, in] or [B, T, in], got {seq.shape}")
    hidden = _get(params, prefix)[0].shape[1]
    batched = seq.ndim == 3
    steps = seq.shape[-2]
    state = GruState(j, (seq.shape[0], hidden) if batched else (hidden,))
    outs = []
    for t in range(steps):
        x_t = seq[:, t, :] if batched else seq[t]
        outs.append(gruskip_cell_step(x_t, state, params, prefix=prefix, skip_gates=skip_gates))
    out = T.stack(outs, axis=-2)
    return T.dropout(out, dropout_rate, rng, training)


def periodic_output(h_T: Tensor, params: dict, prefix: str = "skip_out") -> Tensor:
    """Affine read-out ``h_T @ W_j + b_out`` of the final hidden state."""
    W, b = params[f"{prefix}.W_j"], params[f"{prefix}.b_out"]
    if h_T.shape[-1] != W.shape[0]:
        raise ShapeError(f"periodic_output: h {h_T.shape} does not fit W_j {W.shape}")
    return T.bias_add(_mm(h_T, W), b)


def init_skip_params(input_size: int, widths: Sequence[int], output: int,
                     rng: np.random.Generator) -> dict:
    params = {}
    n_in = input_size
    for i, w in enumerate(widths):
        params.update(init_gru_params(n_in, w, rng, f"gru.{i}"))
        n_in = w
    lim = np.sqrt(6.0 / (n_in + output))
    params["skip_out.W_j"] = Tensor(rng.uniform(-lim, lim, (n_in, output)), True)
    params["skip_out.b_out"] = Tensor(np.zeros(output), True)
    return params


def skip_context_encode(p: Tensor, params: dict, n_layers: int, j: int, dropout_rate: float = 0.0,
                        training: bool = False, rng: np.random.Generator | None = None,
                        skip_gates: bool = False) -> Tensor:
    """Run the skip sequence (``[n]`` or ``[B, n]``, oldest first) through the stack.

    Returns the last hidden state of the top layer (``[hidden]`` or
    ``[B, hidden]``).
    """
    if p.shape[-1] < 1:
        raise ShapeError("skip context must hold at least one period")
    seq = T.reshape(p, p.shape + (1,))
    for i in range(n_layers):
        seq = gruskip_layer_forward(seq, params, j, dropout_rate, training, rng,
                                    prefix=f"gru.{i}", skip_gates=skip_gates)
    return seq[:, -1, :] if seq.ndim == 3 else seq[-1]
