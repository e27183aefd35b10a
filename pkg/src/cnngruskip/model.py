"""Full CNN-GRUSKIP-Transformer network and its ablation variants.

Per sample the forward pass is:

1. CNN feature extraction, flattened and cut into ``d_model``-wide tokens
   (zero-padded at the end), each passed through a shared affine projection;
2. the skip context runs through the skip-GRU stack and its periodic
   read-out becomes one extra token, prepended;
3. sinusoidal positions are added and the transformer runs;
4. decoder outputs are mean-pooled and fed to the prediction head.

Variants: ``no_feature`` feeds the raw window to step 1 instead of CNN
features, ``no_temporal`` drops step 2, ``no_prediction`` replaces the head
by one affine map.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import cnn, gruskip
from . import tensor as T
from . import transformer as tf
from .data import DataSpec, WindowBatch, horizon_steps
from .tensor import Tensor

VARIANTS = ("full", "no_feature", "no_temporal", "no_prediction")
VARIANT_ALIASES = {"full": "full", "F": "no_feature", "T": "no_temporal", "P": "no_prediction",
                   "no_feature": "no_feature", "no_temporal": "no_temporal",
                   "no_prediction": "no_prediction"}
SHORT_NAMES = {"full": "full", "no_feature": "F", "no_temporal": "T", "no_prediction": "P"}


class ConfigError(ValueError):
    """A configuration field is invalid; ``errors`` lists every problem."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ModelConfig:
    # input and windowing
    channels: tuple = ("flow",)
    window_len: int = 12
    horizons: tuple = (10,)
    skip_step: int = 288
    n_periods: int = 7
    # feature extraction
    conv_channels: tuple = (16, 32, 64, 128, 128, 128)
    conv_kernels: tuple = (5, 3, 3, 3, 3, 3)
    pool_window: int = 2
    pool_stride: int = 1
    # long-term module
    gru_widths: tuple = (128, 64)
    gru_skip: int = 2
    skip_gates: bool = False
    dropout: float = 0.2
    # transformer
    d_model: int = 128
    heads: int = 8
    n_encoder: int = 6
    n_decoder: int = 6
    ff_width: int = 256
    max_len: int = 512
    # prediction head
    head_widths: tuple = (32, 1)
    output_mode: str = "regression"
    n_classes: int = 3
    eps: float = 1e-5

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ConfigError(errors)

    def problems(self) -> list[str]:
        e = []
        if not self.channels or any(c not in ("flow", "occupancy", "speed") for c in self.channels):
            e.append(f"channels: unknown channel in {self.channels}")
        if self.window_len < 1:
            e.append("window_len: must be >= 1")
        if not self.horizons:
            e.append("horizons: at least one horizon is required")
        for h in self.horizons:
            if h <= 0 or h % 5:
                e.append(f"horizons: {h} is not a positive multiple of 5 minutes")
        if self.skip_step < 1:
            e.append("skip_step: must be >= 1")
        elif self.horizons and all(h > 0 for h in self.horizons) and \
                self.skip_step < max(self.horizons) // 5:
            e.append("skip_step: must be at least the longest horizon in steps")
        if self.n_periods < 1:
            e.append("n_periods: must be >= 1")
        if len(self.conv_channels) != len(self.conv_kernels):
            e.append("conv_kernels: must have one entry per conv_channels entry")
        if any(c <= 0 for c in self.conv_channels):
            e.append("conv_channels: widths must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.conv_kernels):
            e.append("conv_kernels: kernel sizes must be odd")
        if self.pool_window < 1 or self.pool_stride < 1:
            e.append("pool_window/pool_stride: must be >= 1")
        if not self.gru_widths or any(w <= 0 for w in self.gru_widths):
            e.append("gru_widths: widths must be positive")
        if self.gru_skip < 1:
            e.append("gru_skip: must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            e.append("dropout: must be in [0, 1)")
        if self.d_model <= 0 or self.heads <= 0:
            e.append("d_model/heads: must be positive")
        elif self.d_model % self.heads:
            e.append(f"heads: d_model {self.d_model} is not divisible by {self.heads}")
        if self.n_encoder < 0 or self.n_decoder < 0:
            e.append("n_encoder/n_decoder: must be >= 0")
        if self.ff_width <= 0:
            e.append("ff_width: must be positive")
        if len(self.head_widths) != 2 or any(w <= 0 for w in self.head_widths):
            e.append("head_widths: two positive widths expected")
        if self.output_mode not in ("regression", "classification"):
            e.append("output_mode: must be 'regression' or 'classification'")
        if self.n_classes < 2:
            e.append("n_classes: must be >= 2")
        if self.eps <= 0:
            e.append("eps: must be positive")
        if self.conv_channels and len(self.conv_channels) == len(self.conv_kernels) and \
                not any(k % 2 == 0 for k in self.conv_kernels) and self.pool_window >= 1 and \
                self.pool_stride >= 1 and all(c > 0 for c in self.conv_channels):
            need = cnn.min_length(self.blocks)
            if self.window_len < need:
                e.append(f"window_len: {self.window_len} is below the extractor minimum {need}")
        return e

    @property
    def blocks(self) -> tuple:
        return tuple(cnn.ConvBlockSpec(c, k, self.pool_window, self.pool_stride)
                     for c, k in zip(self.conv_channels, self.conv_kernels))

    @property
    def transformer(self) -> tf.TransformerConfig:
        return tf.TransformerConfig(self.d_model, self.heads, self.n_encoder, self.n_decoder,
                                    self.ff_width, self.max_len, self.eps)

    @property
    def in_channels(self) -> int:
        return len(self.channels)

    @property
    def n_outputs(self) -> int:
        if self.output_mode == "classification":
            return self.n_classes
        return self.head_widths[1] * len(self.horizons)

    @property
    def horizon_steps(self) -> tuple:
        return tuple(horizon_steps(h) for h in self.horizons)

    def data_spec(self, split=(0.8, 0.1, 0.1)) -> DataSpec:
        return DataSpec(self.window_len, tuple(self.horizons), self.skip_step, self.n_periods,
                        tuple(self.channels), tuple(split))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = [k for k in d if k not in known]
        if unknown:
            raise ConfigError([f"{k}: unknown model config key" for k in unknown])
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def _n_tokens(n_features: int, d_model: int) -> int:
    return -(-n_features // d_model)


def token_count(config: ModelConfig, variant: str = "full") -> int:
    """Transformer sequence length, skip token included."""
    if variant == "no_feature":
        nf = config.in_channels * config.window_len
    else:
        nf = cnn.feature_size(config.in_channels, config.window_len, config.blocks)
    return _n_tokens(nf, config.d_model) + (0 if variant == "no_temporal" else 1)


def init_params(config: ModelConfig, seed: int = 0, variant: str = "full") -> tuple[dict, dict]:
    """Seeded parameters and batchnorm buffers for ``variant``.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)); biases and
    beta start at zero, gamma and layer-norm gains at one.
    """
    variant = VARIANT_ALIASES.get(variant, variant)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    # components are always drawn in the same order so shared parts match across variants
    cnn_p, cnn_b = cnn.init_params(config.blocks, config.in_channels, rng)
    d = config.d_model
    lim = np.sqrt(3.0 / d)
    tok = {"tokens.weight": Tensor(rng.uniform(-lim, lim, (d, d)), True),
           "tokens.bias": Tensor(np.zeros(d), True)}
    skip_p = gruskip.init_skip_params(1, config.gru_widths, d, rng)
    tr_p = tf.init_params(config.transformer, rng)
    h1, _ = config.head_widths
    n_out = config.n_outputs
    head_p = {"head.fc1.weight": Tensor(rng.uniform(-1, 1, (d, h1)) * np.sqrt(6.0 / (d + h1)), True),
              "head.fc1.bias": Tensor(np.zeros(h1), True),
              "head.fc2.weight": Tensor(rng.uniform(-1, 1, (h1, n_out)) * np.sqrt(6.0 / (h1 + n_out)), True),
              "head.fc2.bias": Tensor(np.zeros(n_out), True)}
    out_p = {"head.out.weight": Tensor(rng.uniform(-1, 1, (d, n_out)) * np.sqrt(6.0 / (d + n_out)), True),
             "head.out.bias": Tensor(np.zeros(n_out), True)}
    if variant != "no_feature":
        params.update(cnn_p)
        buffers.update(cnn_b)
    params.update(tok)
    if variant != "no_temporal":
        params.update(skip_p)
    params.update(tr_p)
    params.update(out_p if variant == "no_prediction" else head_p)
    for name, t in params.items():
        t.name = name
    return params, buffers


def predict_head(H: Tensor, params: dict, mode: str = "regression") -> Tensor:
    """FC1 with ReLU, then FC2; softmax on top in classification mode.

    ``H`` is ``[d_model]`` or ``[batch, d_model]``.
    """
    if H.ndim == 1:
        return T.reshape(predict_head(T.reshape(H, (1, -1)), params, mode), (-1,))
    h = T.relu(T.linear(H, params["head.fc1.weight"], params["head.fc1.bias"]))
    out = T.linear(h, params["head.fc2.weight"], params["head.fc2.bias"])
    return T.softmax(out) if mode == "classification" else out


class Model:
    """An assembled network: config, variant, parameters and BN buffers."""

    def __init__(self, config: ModelConfig, variant: str = "full", params: dict | None = None,
                 buffers: dict | None = None, seed: int = 0):
        variant = VARIANT_ALIASES.get(variant, variant)
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.config = config
        self.variant = variant
        if params is None:
            params, fresh = init_params(config, seed, variant)
            buffers = fresh if buffers is None else buffers
        self.params = params
        self.buffers = buffers if buffers is not None else {}

    # -- bookkeeping ---------------------------------------------------------
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        for name in sorted(self.buffers):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.buffers[name]).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())

    # -- forward -------------------------------------------------------------
    def _tokens(self, inputs: Tensor, training: bool) -> Tensor:
        cfg = self.config
        B = inputs.shape[0]
        if self.variant == "no_feature":
            feats = T.flatten(inputs, 1)
        else:
            feats = cnn.feature_extract(inputs, cfg.blocks, self.params, self.buffers, training)
        nf = feats.shape[1]
        n_tok = _n_tokens(nf, cfg.d_model)
        pad = n_tok * cfg.d_model - nf
        if pad:
            feats = T.concat([feats, Tensor(np.zeros((B, pad)))], axis=1)
        chunks = T.reshape(feats, (B, n_tok, cfg.d_model))
        return T.linear(chunks, self.params["tokens.weight"], self.params["tokens.bias"])

    def skip_embedding(self, skip_context: Tensor, training: bool,
                       rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        h = gruskip.skip_context_encode(skip_context, self.params, len(cfg.gru_widths),
                                        cfg.gru_skip, cfg.dropout, training, rng, cfg.skip_gates)
        return gruskip.periodic_output(h, self.params)

    def forward(self, inputs, skip_context, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """``inputs [B, C, W]``, ``skip_context [B, n]`` -> predictions ``[B, n_outputs]``."""
        cfg = self.config
        inputs = T.as_tensor(inputs)
        skip_context = T.as_tensor(skip_context)
        self._check(inputs, skip_context)
        tokens = self._tokens(inputs, training)
        if self.variant != "no_temporal":
            emb = self.skip_embedding(skip_context, training, rng)
            tokens = T.concat([T.reshape(emb, (emb.shape[0], 1, cfg.d_model)), tokens], axis=1)
        x = tf.positional_encode(tokens, cfg.max_len)
        y = tf.transformer_forward(x, cfg.transformer, self.params)
        pooled = T.mean(y, axis=1)
        if self.variant == "no_prediction":
            out = T.linear(pooled, self.params["head.out.weight"], self.params["head.out.bias"])
            return T.softmax(out) if cfg.output_mode == "classification" else out
        return predict_head(pooled, self.params, cfg.output_mode)

    __call__ = forward

    def _check(self, inputs: Tensor, skip: Tensor) -> None:
        cfg = self.config
        want = (cfg.in_channels, cfg.window_len)
        if inputs.ndim != 3 or inputs.shape[1:] != want:
            raise ValueError(f"inputs: expected [batch, {want[0]}, {want[1]}] (channels, window_len), "
                             f"got {inputs.shape}")
        if skip.ndim != 2 or skip.shape != (inputs.shape[0], cfg.n_periods):
            raise ValueError(f"skip_context: expected [{inputs.shape[0]}, {cfg.n_periods}] "
                             f"(batch, n_periods), got {skip.shape}")

    def predict(self, batch: WindowBatch, chunk: int = 512) -> np.ndarray:
        """Eval-mode predictions in normalised units, ``[len(batch), n_outputs]``."""
        outs = []
        with T.no_grad():
            for i in range(0, len(batch), chunk):
                outs.append(self.forward(batch.inputs[i:i + chunk], batch.skip_context[i:i + chunk],
                                         training=False).data)
        if not outs:
            return np.zeros((0, self.config.n_outputs))
        return np.concatenate(outs)


def model_forward(batch: WindowBatch, config: ModelConfig, params: dict, buffers: dict,
                  training: bool = False, rng: np.random.Generator | None = None,
                  variant: str = "full") -> Tensor:
    return Model(config, variant, params, buffers).forward(batch.inputs, batch.skip_context,
                                                           training, rng)


def build_variant(config: ModelConfig, variant: str = "full", seed: int = 0) -> Model:
    return Model(config, variant, seed=seed)


def extractor_parameter_count(config: ModelConfig) -> int:
    total, c = 0, config.in_channels
    for s in config.blocks:
        total += s.out_channels * c * s.kernel + 3 * s.out_channels
        c = s.out_channels
    return total


def parameter_count(config: ModelConfig, variant: str = "full") -> int:
    """Closed-form parameter count, independent of any initialisation."""
    variant = VARIANT_ALIASES.get(variant, variant)
    d = config.d_model
    n = d * d + d                                               # token projection
    if variant != "no_feature":
        n += extractor_parameter_count(config)
    if variant != "no_temporal":
        n_in = 1
        for w in config.gru_widths:
            n += 3 * ((w + n_in) * w + w)
            n_in = w
        n += n_in * d + d
    ff = config.ff_width
    attn = 4 * d * d
    ffn = d * ff + ff + ff * d + d
    n += config.n_encoder * (attn + ffn + 4 * d)
    if config.n_decoder:
        n += d + config.n_decoder * (2 * attn + ffn + 6 * d)
    n_out = config.n_outputs
    if variant == "no_prediction":
        n += d * n_out + n_out
    else:
        h1 = config.head_widths[0]
        n += d * h1 + h1 + h1 * n_out + n_out
    return n
