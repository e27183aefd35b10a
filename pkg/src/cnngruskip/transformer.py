"""Encoder-decoder transformer with multi-head attention.

Sequences are ``[L, d_model]`` or batched ``[B, L, d_model]``. Per-head
projections are stored side by side: column block ``i`` of ``W_q`` is the
query projection of head ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 128
    heads: int = 8
    n_encoder: int = 6
    n_decoder: int = 6
    ff_width: int = 256
    max_len: int = 512
    eps: float = 1e-5

    def __post_init__(self):
        if self.d_model <= 0 or self.heads <= 0:
            raise ValueError("d_model and heads must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.n_encoder < 0 or self.n_decoder < 0 or self.ff_width <= 0:
            raise ValueError("layer counts must be >= 0 and ff_width > 0")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


def _glorot(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, shape or (fan_in, fan_out)), True)


def _attn_params(cfg: TransformerConfig, rng, prefix: str) -> dict:
    d = cfg.d_model
    return {f"{prefix}.{n}": _glorot(rng, d, d) for n in ("W_q", "W_k", "W_v", "W_o")}


def _ff_params(cfg: TransformerConfig, rng, prefix: str) -> dict:
    return {f"{prefix}.W1": _glorot(rng, cfg.d_model, cfg.ff_width),
            f"{prefix}.b1": Tensor(np.zeros(cfg.ff_width), True),
            f"{prefix}.W2": _glorot(rng, cfg.ff_width, cfg.d_model),
            f"{prefix}.b2": Tensor(np.zeros(cfg.d_model), True)}


def _ln_params(cfg: TransformerConfig, prefix: str) -> dict:
    return {f"{prefix}.gain": Tensor(np.ones(cfg.d_model), True),
            f"{prefix}.bias": Tensor(np.zeros(cfg.d_model), True)}


def init_params(cfg: TransformerConfig, rng: np.random.Generator, prefix: str = "transformer") -> dict:
    params = {}
    for i in range(cfg.n_encoder):
        p = f"{prefix}.enc.{i}"
        params.update(_attn_params(cfg, rng, f"{p}.attn"))
        params.update(_ff_params(cfg, rng, f"{p}.ff"))
        params.update(_ln_params(cfg, f"{p}.ln1"))
        params.update(_ln_params(cfg, f"{p}.ln2"))
    if cfg.n_decoder:
        params[f"{prefix}.start_token"] = _glorot(rng, 1, cfg.d_model, (cfg.d_model,))
    for i in range(cfg.n_decoder):
        p = f"{prefix}.dec.{i}"
        params.update(_attn_params(cfg, rng, f"{p}.self_attn"))
        params.update(_attn_params(cfg, rng, f"{p}.cross_attn"))
        params.update(_ff_params(cfg, rng, f"{p}.ff"))
        for k in (1, 2, 3):
            params.update(_ln_params(cfg, f"{p}.ln{k}"))
    return params


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """``softmax(q @ k^T / sqrt(d_k)) @ v`` over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    nd = k.ndim
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    scores = T.scale(T.matmul(q, T.transpose(k, axes)), 1.0 / np.sqrt(q.shape[-1]))
    w = T.softmax(scores)
    out = T.matmul(w, v)
    return (out, w) if return_weights else out


def _split_heads(x: Tensor, h: int) -> Tensor:
    # [.., L, d] -> [.., h, L, d/h]
    *lead, L, d = x.shape
    y = T.reshape(x, tuple(lead) + (L, h, d // h))
    n = len(lead)
    return T.transpose(y, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, L, dk = x.shape
    n = len(lead)
    y = T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return T.reshape(y, tuple(lead) + (L, h * dk))


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, params: dict, prefix: str,
                         heads: int, return_weights: bool = False):
    d = q_in.shape[-1]
    if d % heads:
        raise ValueError(f"d_model {d} is not divisible by {heads} heads")
    q = _split_heads(T.matmul(q_in, params[f"{prefix}.W_q"]), heads)
    k = _split_heads(T.matmul(k_in, params[f"{prefix}.W_k"]), heads)
    v = _split_heads(T.matmul(v_in, params[f"{prefix}.W_v"]), heads)
    out, w = scaled_dot_attention(q, k, v, return_weights=True)
    y = T.matmul(_merge_heads(out), params[f"{prefix}.W_o"])
    return (y, w) if return_weights else y


def feed_forward(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = T.relu(T.linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return T.linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def _add_norm(x: Tensor, sub: Tensor, params: dict, prefix: str, eps: float) -> Tensor:
    return T.layernorm(x + sub, params[f"{prefix}.gain"], params[f"{prefix}.bias"], eps)


def encoder_layer(x: Tensor, params: dict, prefix: str, cfg: TransformerConfig) -> Tensor:
    a = multi_head_attention(x, x, x, params, f"{prefix}.attn", cfg.heads)
    x = _add_norm(x, a, params, f"{prefix}.ln1", cfg.eps)
    f = feed_forward(x, params, f"{prefix}.ff")
    return _add_norm(x, f, params, f"{prefix}.ln2", cfg.eps)


def decoder_layer(d: Tensor, enc_out: Tensor, params: dict, prefix: str,
                  cfg: TransformerConfig) -> Tensor:
    a = multi_head_attention(d, d, d, params, f"{prefix}.self_attn", cfg.heads)
    d = _add_norm(d, a, params, f"{prefix}.ln1", cfg.eps)
    c = multi_head_attention(d, enc_out, enc_out, params, f"{prefix}.cross_attn", cfg.heads)
    d = _add_norm(d, c, params, f"{prefix}.ln2", cfg.eps)
    f = feed_forward(d, params, f"{prefix}.ff")
    return _add_norm(d, f, params, f"{prefix}.ln3", cfg.eps)


def prepare_decoder_input(x: Tensor, start_token: Tensor) -> Tensor:
    """Start token followed by ``x`` shifted right by one position."""
    L = x.shape[-2]
    if x.ndim == 3:
        B = x.shape[0]
        start = T.reshape(T.concat([T.reshape(start_token, (1, 1, -1))] * B, axis=0), (B, 1, -1))
        return T.concat([start, x[:, :L - 1, :]], axis=1)
    return T.concat([T.reshape(start_token, (1, -1)), x[:L - 1]], axis=0)


def transformer_forward(features: Tensor, cfg: TransformerConfig, params: dict,
                        prefix: str = "transformer") -> Tensor:
    """Encoder stack, then decoder stack attending to the encoder output.

    With no encoder and no decoder layers this is the identity.
    """
    enc_in = features
    x = features
    for i in range(cfg.n_encoder):
        x = encoder_layer(x, params, f"{prefix}.enc.{i}", cfg)
    if cfg.n_decoder == 0:
        return x
    d = prepare_decoder_input(enc_in, params[f"{prefix}.start_token"])
    for i in range(cfg.n_decoder):
        d = decoder_layer(d, x, params, f"{prefix}.dec.{i}", cfg)
    return d


def positional_code(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal codes: sin on even dims, cos on odd dims."""
    pos = np.arange(length)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    code = np.zeros((length, d_model))
    code[:, 0::2] = np.sin(angle)
    code[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return code


def positional_encode(x: Tensor, max_len: int = 512) -> Tensor:
    L, d = x.shape[-2], x.shape[-1]
    if L > max_len:
        raise ShapeError(f"sequence length {L} exceeds max_len {max_len}")
    code = positional_code(L, d)
    if x.ndim == 3:
        code = np.broadcast_to(code, x.shape)
    return x + Tensor(code)
