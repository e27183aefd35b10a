"""Six-block 1-D convolutional feature extractor.

Each block is conv1d -> batchnorm -> ReLU -> maxpool1d, in that order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ConvBlockSpec:
    out_channels: int
    kernel: int
    pool_window: int = 2
    pool_stride: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.out_channels <= 0:
            raise ValueError("out_channels must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")
        if self.stride != 1:
            raise ValueError("only stride 1 convolutions are supported")
        if self.pool_window < 1 or self.pool_stride < 1:
            raise ValueError("pool window and stride must be >= 1")


DEFAULT_BLOCKS = (
    ConvBlockSpec(16, 5), ConvBlockSpec(32, 3), ConvBlockSpec(64, 3),
    ConvBlockSpec(128, 3), ConvBlockSpec(128, 3), ConvBlockSpec(128, 3),
)


def output_shape(in_channels: int, length: int, specs: Sequence[ConvBlockSpec]) -> tuple[int, int]:
    """``(channels, length)`` after all blocks; raises if the input is too short."""
    c, L = in_channels, length
    for i, s in enumerate(specs):
        if L < s.pool_window:
            raise ShapeError(f"input length {length} is too short for block {i + 1}; "
                             f"minimum length is {min_length(specs)}")
        c, L = s.out_channels, (L - s.pool_window) // s.pool_stride + 1
    return c, L


def feature_size(in_channels: int, length: int, specs: Sequence[ConvBlockSpec]) -> int:
    c, L = output_shape(in_channels, length, specs)
    return c * L


def min_length(specs: Sequence[ConvBlockSpec]) -> int:
    """Smallest input length that survives every pooling stage."""
    need = 1
    for s in reversed(specs):
        need = max(s.pool_window, (need - 1) * s.pool_stride + s.pool_window)
    return need


def init_params(specs: Sequence[ConvBlockSpec], in_channels: int, rng: np.random.Generator,
                prefix: str = "cnn") -> tuple[dict, dict]:
    """Glorot-uniform kernels, zero biases, unit gamma, zero beta.

    Returns ``(params, buffers)``; buffers hold the batchnorm running stats.
    """
    params, buffers = {}, {}
    c = in_channels
    for i, s in enumerate(specs):
        fan_in, fan_out = c * s.kernel, s.out_channels * s.kernel
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        p = f"{prefix}.{i}"
        params[f"{p}.kernel"] = Tensor(rng.uniform(-lim, lim, (s.out_channels, c, s.kernel)), True)
        params[f"{p}.bias"] = Tensor(np.zeros(s.out_channels), True)
        params[f"{p}.gamma"] = Tensor(np.ones(s.out_channels), True)
        params[f"{p}.beta"] = Tensor(np.zeros(s.out_channels), True)
        buffers[f"{p}.running_mean"] = np.zeros(s.out_channels)
        buffers[f"{p}.running_var"] = np.ones(s.out_channels)
        c = s.out_channels
    return params, buffers


def conv_block_forward(x: Tensor, spec: ConvBlockSpec, params: dict, buffers: dict, prefix: str,
                       training: bool, eps: float = 1e-5) -> Tensor:
    if x.shape[-1] < spec.pool_window:
        raise ShapeError(f"{prefix}: length {x.shape[-1]} is shorter than pool window {spec.pool_window}")
    y = T.conv1d(x, params[f"{prefix}.kernel"], params[f"{prefix}.bias"])
    unbatched = y.ndim == 2
    if unbatched:
        y = T.reshape(y, (1,) + y.shape)
    y = T.batchnorm(y, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], eps=eps,
                    training=training, running_mean=buffers[f"{prefix}.running_mean"],
                    running_var=buffers[f"{prefix}.running_var"])
    if unbatched:
        y = T.reshape(y, y.shape[1:])
    y = T.relu(y)
    return T.maxpool1d(y, spec.pool_window, spec.pool_stride)


def extract_blocks(x: Tensor, specs: Sequence[ConvBlockSpec], params: dict, buffers: dict,
                   training: bool, prefix: str = "cnn") -> list[Tensor]:
    """Run every block and return the list of intermediate outputs."""
    output_shape(x.shape[-2], x.shape[-1], specs)
    outs = []
    for i, s in enumerate(specs):
        x = conv_block_forward(x, s, params, buffers, f"{prefix}.{i}", training)
        outs.append(x)
    return outs


def feature_extract(x: Tensor, specs: Sequence[ConvBlockSpec], params: dict, buffers: dict,
                    training: bool, prefix: str = "cnn") -> Tensor:
    """``[C, L] -> [F]`` or ``[B, C, L] -> [B, F]`` (row-major over channels, length)."""
    y = extract_blocks(x, specs, params, buffers, training, prefix)[-1]
    return T.flatten(y, start_axis=0 if y.ndim == 2 else 1)
