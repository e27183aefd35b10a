"""Optimisers, the epoch loop, early stopping and checkpoint files."""
from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import NormStats, WindowBatch
from .model import ConfigError, Model, ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"CGSKCKPT"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")


class CheckpointError(ValueError):
    """The checkpoint file is corrupt, truncated or of the wrong version."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 500
    learning_rate: float = 0.001
    optimizer: str = "adam"
    patience: int | None = 20
    clip_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        e = []
        if self.batch_size < 2:
            e.append("batch_size: must be >= 2 (batch normalisation needs two samples)")
        if self.epochs < 0:
            e.append("epochs: must be >= 0")
        if not self.learning_rate >= 0:
            e.append("learning_rate: must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            e.append(f"optimizer: must be one of {sorted(OPTIMIZERS)}")
        if self.patience is not None and self.patience < 1:
            e.append("patience: must be >= 1 or None")
        if self.clip_norm is not None and not self.clip_norm > 0:
            e.append("clip_norm: must be positive or None")
        if e:
            raise ConfigError(e)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = [k for k in d if k not in known]
        if unknown:
            raise ConfigError([f"{k}: unknown train config key" for k in unknown])
        return cls(**d)


# -- optimisers ------------------------------------------------------------------
def _grad(name: str, p: T.Tensor) -> np.ndarray:
    if p.grad is None:
        raise ValueError(f"parameter {name!r} has no gradient")
    return p.grad


class SGD:
    name = "sgd"

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict) -> None:
        for name, p in params.items():
            p.data -= self.lr * _grad(name, p)

    def state(self) -> dict:
        return {}

    def load_state(self, state: dict) -> None:
        pass


class Momentum(SGD):
    name = "momentum"

    def __init__(self, lr: float, beta: float = 0.9):
        super().__init__(lr)
        self.beta = beta
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict) -> None:
        for name, p in params.items():
            g = _grad(name, p)
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.beta * v + g
            self.velocity[name] = v
            p.data -= self.lr * v

    def state(self) -> dict:
        return {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_state(self, state: dict) -> None:
        self.velocity = {k.split("/", 1)[1]: v.copy() for k, v in state.items()
                         if k.startswith("velocity/")}


class Adam(SGD):
    name = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict) -> None:
        grads = {name: _grad(name, p) for name, p in params.items()}
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        out = {"t": np.array([float(self.t)])}
        out.update({f"m/{k}": v for k, v in self.m.items()})
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"][0]) if "t" in state else 0
        self.m = {k[2:]: v.copy() for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in state.items() if k.startswith("v/")}


OPTIMIZERS = {"sgd": SGD, "momentum": Momentum, "adam": Adam}


def make_optimizer(name: str, lr: float):
    return OPTIMIZERS[name](lr)


def sgd_step(params: dict, lr: float) -> None:
    SGD(lr).step(params)


def clip_grad_norm(params: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values()
                          if p.grad is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= s
    return total


# -- checkpoints -------------------------------------------------------------------
@dataclass
class Checkpoint:
    config: ModelConfig
    variant: str
    params: dict                     # name -> ndarray
    buffers: dict = field(default_factory=dict)
    optimizer_state: dict = field(default_factory=dict)
    epoch: int = 0
    best_val_loss: float = math.inf
    rng_state: dict | None = None
    train_config: TrainConfig | None = None
    norm: NormStats | None = None
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    best_epoch: int | None = None
    best_params: dict = field(default_factory=dict)
    best_buffers: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: Model, **kw) -> "Checkpoint":
        return cls(config=model.config, variant=model.variant,
                   params={k: p.data.copy() for k, p in model.params.items()},
                   buffers={k: np.array(v, copy=True) for k, v in model.buffers.items()}, **kw)

    def to_model(self) -> Model:
        params = {k: T.Tensor(v.copy(), True, name=k) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return Model(self.config, self.variant, params, buffers)


def _header(c: Checkpoint) -> dict:
    return {"model_config": c.config.to_dict(), "variant": c.variant, "epoch": c.epoch,
            "best_val_loss": c.best_val_loss if math.isfinite(c.best_val_loss) else None,
            "rng_state": c.rng_state,
            "train_config": c.train_config.to_dict() if c.train_config else None,
            "norm": c.norm.to_dict() if c.norm else None,
            "history": [list(r) for r in c.history], "extra": c.extra,
            "best_epoch": c.best_epoch}


def _write_arrays(buf: io.BytesIO, group: str, arrays: dict) -> None:
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        key = f"{group}:{name}".encode()
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())


def checkpoint_bytes(c: Checkpoint) -> bytes:
    header = json.dumps(_header(c), sort_keys=True, separators=(",", ":")).encode()
    groups = {"param": c.params, "buffer": c.buffers, "optim": c.optimizer_state,
              "best_param": c.best_params, "best_buffer": c.best_buffers}
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    buf.write(struct.pack("<Q", sum(len(g) for g in groups.values())))
    for g, arrays in groups.items():
        _write_arrays(buf, g, arrays)
    return buf.getvalue()


def save_checkpoint(c: Checkpoint, path) -> None:
    """Magic, version, JSON header, then named little-endian float64 arrays."""
    Path(path).write_bytes(checkpoint_bytes(c))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported "
                              f"(expected {FORMAT_VERSION})")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is corrupt: {exc}") from exc
    (count,) = r.unpack("<Q")
    groups: dict[str, dict] = {"param": {}, "buffer": {}, "optim": {}, "best_param": {},
                               "best_buffer": {}}
    for _ in range(count):
        (klen,) = r.unpack("<I")
        key = r.take(klen).decode(errors="replace")
        (ndim,) = r.unpack("<I")
        if ndim > 16:
            raise CheckpointError(f"array {key!r} has implausible rank {ndim}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        group, _, name = key.partition(":")
        if group not in groups:
            raise CheckpointError(f"unknown array group in {key!r}")
        groups[group][name] = arr
    if r.pos != len(data):
        raise CheckpointError("checkpoint has trailing bytes")
    try:
        best = header["best_val_loss"]
        return Checkpoint(
            config=ModelConfig.from_dict(header["model_config"]), variant=header["variant"],
            params=groups["param"], buffers=groups["buffer"], optimizer_state=groups["optim"],
            epoch=int(header["epoch"]), best_val_loss=math.inf if best is None else float(best),
            rng_state=header["rng_state"],
            train_config=TrainConfig.from_dict(header["train_config"]) if header["train_config"] else None,
            norm=NormStats.from_dict(header["norm"]) if header["norm"] else None,
            history=[tuple(r) for r in header["history"]], extra=header.get("extra", {}),
            best_epoch=header.get("best_epoch"), best_params=groups["best_param"],
            best_buffers=groups["best_buffer"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint header is invalid: {exc}") from exc


# -- training loop -------------------------------------------------------------------
def evaluate_loss(model: Model, batch: WindowBatch, chunk: int = 512) -> float:
    """Eval-mode MSE in normalised units; mutates nothing."""
    pred = model.predict(batch, chunk)
    return float(np.mean((pred - batch.targets) ** 2))


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list                   # (epoch, train_loss, val_loss)
    stopped_early: bool = False


def train(model: Model, train_batch: WindowBatch, val_batch: WindowBatch, cfg: TrainConfig,
          resume: Checkpoint | None = None, norm: NormStats | None = None,
          stop_after: int | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Mini-batch training with a seeded shuffle; keeps the best-validation state.

    Each epoch shuffles the training samples, steps the optimiser once per
    batch and records ``(epoch, mean train loss, val loss)``. With
    ``resume`` the model, optimiser, RNG and history continue from the
    checkpoint. ``stop_after`` ends the run after that many epochs in this
    call, which is how split runs are produced.
    """
    if len(train_batch) < 2 or len(val_batch) < 1:
        raise ValueError("training needs at least 2 training samples and 1 validation sample")
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    history: list = []
    best_val = math.inf
    start_epoch = 0
    best: Checkpoint | None = None
    if resume is not None:
        for k, v in resume.params.items():
            model.params[k].data[...] = v
        for k, v in resume.buffers.items():
            model.buffers[k][...] = v
        opt.load_state(resume.optimizer_state)
        rng.bit_generator.state = resume.rng_state
        history = [tuple(r) for r in resume.history]
        best_val = resume.best_val_loss
        start_epoch = resume.epoch
        if resume.best_params:
            best = Checkpoint(model.config, model.variant, dict(resume.best_params),
                              dict(resume.best_buffers), epoch=resume.best_epoch or 0,
                              best_val_loss=best_val, train_config=cfg, norm=resume.norm)
    norm = norm or train_batch.norm
    params = model.params
    stopped = False
    epoch = start_epoch
    bad_epochs = _epochs_since_best(history)
    ran = 0
    while epoch < cfg.epochs:
        if stop_after is not None and ran >= stop_after:
            break
        epoch += 1
        ran += 1
        losses, weights = [], []
        for bi, batch in enumerate(train_batch.batches(cfg.batch_size, rng)):
            model.zero_grad()
            pred = model.forward(batch.inputs, batch.skip_context, training=True, rng=rng)
            loss = T.mse_loss(pred, batch.targets)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(epoch, bi, lv)
            T.backward(loss)
            if cfg.clip_norm is not None:
                clip_grad_norm(params, cfg.clip_norm)
            opt.step(params)
            losses.append(lv)
            weights.append(len(batch))
        train_loss = float(np.average(losses, weights=weights)) if losses else math.nan
        val_loss = evaluate_loss(model, val_batch)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch, -1, val_loss)
        history.append((epoch, train_loss, val_loss))
        if on_epoch:
            on_epoch(epoch, train_loss, val_loss)
        logger.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            bad_epochs = 0
            best = Checkpoint.capture(model, epoch=epoch, best_val_loss=best_val,
                                      train_config=cfg, norm=norm)
        else:
            bad_epochs += 1
        if cfg.patience is not None and bad_epochs >= cfg.patience:
            stopped = True
            break
    last = Checkpoint.capture(model, optimizer_state={k: np.array(v, copy=True)
                                                      for k, v in opt.state().items()},
                              epoch=epoch, best_val_loss=best_val,
                              rng_state=rng.bit_generator.state, train_config=cfg, norm=norm,
                              history=list(history))
    if best is None:
        best = Checkpoint.capture(model, epoch=epoch, best_val_loss=best_val,
                                  train_config=cfg, norm=norm)
    best.history = list(history)
    best.best_epoch = last.best_epoch = best.epoch
    last.best_params = best.params
    last.best_buffers = best.buffers
    return TrainResult(best=best, last=last, history=history, stopped_early=stopped)


def _epochs_since_best(history: list) -> int:
    best, since = math.inf, 0
    for _, _, v in history:
        if v < best:
            best, since = v, 0
        else:
            since += 1
    return since


def write_history_csv(history: list, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for e, tr, va in history:
            fh.write(f"{int(e)},{float(tr)!r},{float(va)!r}\n")
