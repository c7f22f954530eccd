"""Training engine: Adam, cross-entropy batches, plateau/early-stop/checkpoint callbacks."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .tensor_core import Prng, ValidationError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DYNCONV1"
DEFAULT_TEMPLATE = "best_model_{epoch:02d}_{val_accuracy:.3f}.ckpt"


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 30
    dropout: float = 0.2
    seed: int = 0
    augment: bool = False
    loss: str = "categorical_crossentropy"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.loss != "categorical_crossentropy":
            raise ValidationError("only categorical cross-entropy is supported")


# --- Adam -------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              frozen=frozenset()) -> OptimizerState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in frozen and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
    return state


# --- callbacks --------------------------------------------------------------


@dataclass
class CallbackState:
    current_lr: float = 0.001
    factor: float = 0.1
    lr_patience: int = 5
    min_lr: float = 1e-6
    stop_patience: int = 10
    best_loss_lr: float = math.inf
    best_loss_stop: float = math.inf
    epochs_since_improve_lr: int = 0
    epochs_since_improve_stop: int = 0
    best_val_metric: float = -math.inf

    def __post_init__(self):
        self.current_lr = max(self.current_lr, self.min_lr)


def reduce_lr_on_plateau(state: CallbackState, val_loss: float) -> float:
    """Multiply the rate by ``factor`` after ``lr_patience`` epochs without a strict decrease."""
    if val_loss < state.best_loss_lr:
        state.best_loss_lr = val_loss
        state.epochs_since_improve_lr = 0
    else:
        state.epochs_since_improve_lr += 1
        if state.epochs_since_improve_lr >= state.lr_patience:
            state.current_lr = max(state.current_lr * state.factor, state.min_lr)
            state.epochs_since_improve_lr = 0
    return state.current_lr


def early_stopping(state: CallbackState, val_loss: float) -> bool:
    """True once ``stop_patience`` epochs have passed without a strict decrease."""
    if val_loss < state.best_loss_stop:
        state.best_loss_stop = val_loss
        state.epochs_since_improve_stop = 0
        return False
    state.epochs_since_improve_stop += 1
    return state.epochs_since_improve_stop >= state.stop_patience


def checkpoint_best(model, val_accuracy: float, epoch: int, state: CallbackState,
                    out_dir: str, template: str = DEFAULT_TEMPLATE, meta: dict | None = None):
    """Save a snapshot when ``val_accuracy`` strictly beats the best so far.

    Returns the written path, or None.  I/O errors are logged, not raised.
    """
    if not val_accuracy > state.best_val_metric:
        return None
    state.best_val_metric = val_accuracy
    path = os.path.join(out_dir, template.format(epoch=epoch, val_accuracy=val_accuracy))
    info = dict(meta or {}, epoch=epoch, val_accuracy=val_accuracy)
    try:
        save_checkpoint(model, path, info)
    except OSError as exc:
        log.warning("checkpoint %s not written: %s", path, exc)
        return None
    return path


# --- checkpoint format ------------------------------------------------------


def save_checkpoint(model, path: str, meta: dict | None = None):
    """Magic, uint32-LE-prefixed UTF-8 JSON manifest, then float32 LE payload."""
    entries, offset, blobs = [], 0, []
    for name, arr in model.parameters().items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"meta": meta or {}, "params": entries}
    if getattr(model, "spec", None) is not None:
        manifest["model_spec"] = model.spec.to_dict()
        manifest["frozen"] = sorted(model.frozen_names())
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    (size,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12 : 12 + size].decode("utf-8"))
    payload = memoryview(raw)[12 + size :]
    params = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"]))
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise ValidationError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(payload[start : start + 4 * count], dtype="<f4")
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return manifest, params


def load_model(path: str):
    """Rebuild the model recorded in a checkpoint and load its parameters."""
    from .dynamic_layers import ModelSpec, build_model

    manifest, params = read_checkpoint(path)
    if "model_spec" not in manifest:
        raise ValidationError(f"{path}: checkpoint carries no model spec")
    model = build_model(ModelSpec(**manifest["model_spec"]), Prng(0))
    model.load_parameters(params)
    if any("bank" in name for name in manifest.get("frozen", [])):
        model.set_bank_frozen(True)
    return model, manifest


# --- loop -------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_metric: float
    val_loss: float
    val_metric: float
    lr: float


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False
    best_val_metric: float | None = None
    best_epoch: int | None = None
    checkpoints: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = [asdict(e) for e in self.epochs]
        return d


def iterate_batches(n: int, batch_size: int, order: np.ndarray | None = None):
    """Index batches covering ``range(n)``; the last one may be partial."""
    order = np.arange(n) if order is None else order
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train(model, train_data, val_data, config: TrainConfig, out_dir: str | None = None,
          epoch_hook: Callable | None = None, checkpoint_template: str = DEFAULT_TEMPLATE,
          checkpoint_meta: dict | None = None) -> TrainingLog:
    """Mini-batch Adam with the plateau, early-stop and best-checkpoint callbacks.

    ``train_data`` and ``val_data`` are ``(x, y)`` pairs.  Deterministic for a
    fixed ``config.seed``.  ``epoch_hook(epoch, model, record)`` runs after
    each epoch's callbacks.
    """
    x_train, y_train = train_data
    x_val, y_val = val_data
    x_train = np.asarray(x_train, dtype=model.dtype)
    x_val = np.asarray(x_val, dtype=model.dtype)
    rng = Prng(config.seed)
    state = OptimizerState()
    cb = CallbackState(current_lr=config.learning_rate)
    log_ = TrainingLog()
    frozen = model.frozen_names()
    _set_dropout(model, config.dropout)
    augmenter = _augmenter(model, config, rng)
    params = model.parameters()
    grads = model.gradients()
    for epoch in range(1, config.epochs + 1):
        total, seen = 0.0, 0
        for b, idx in enumerate(iterate_batches(len(x_train), config.batch_size, rng.permutation(len(x_train)))):
            xb, yb = x_train[idx], y_train[idx]
            if augmenter is not None:
                xb, yb = augmenter(xb, yb)
            model.net.zero_grad()
            loss = model.loss_and_grad(xb, yb, rng=rng, train=True)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            adam_step(params, grads, state, cb.current_lr, frozen)
            log_.steps += 1
            total += loss * len(idx)
            seen += len(idx)
        lr_used = cb.current_lr
        _, train_metric = model.evaluate(x_train, y_train)
        val_loss, val_metric = model.evaluate(x_val, y_val)
        record = EpochRecord(epoch, total / seen, train_metric, val_loss, val_metric, lr_used)
        log_.epochs.append(record)
        if out_dir is not None:
            path = checkpoint_best(model, val_metric, epoch, cb, out_dir, checkpoint_template, checkpoint_meta)
            if path:
                log_.checkpoints.append(path)
        elif val_metric > cb.best_val_metric:
            cb.best_val_metric = val_metric
        if log_.best_val_metric is None or val_metric > log_.best_val_metric:
            log_.best_val_metric, log_.best_epoch = val_metric, epoch
        reduce_lr_on_plateau(cb, val_loss)
        stop = early_stopping(cb, val_loss)
        if epoch_hook is not None:
            epoch_hook(epoch, model, record)
        log.info("epoch %d loss %.4f val_loss %.4f val_metric %.4f lr %.2g",
                 epoch, record.train_loss, val_loss, val_metric, lr_used)
        if stop:
            log_.stopped_early = True
            break
    return log_


def _set_dropout(model, rate: float):
    from .dynamic_layers import Dropout

    for m in model.net.modules():
        if isinstance(m, Dropout):
            m.rate = rate
    if getattr(model, "spec", None) is not None:
        model.spec.dropout = rate


def _augmenter(model, config: TrainConfig, rng: Prng):
    if not config.augment or model.task == "timeseries":
        return None
    from .datasets import AugmentConfig, augment

    cfg = AugmentConfig()

    def apply(xb, yb):
        xs, ys = [], []
        for img, target in zip(xb, yb):
            if model.task == "segment":
                img, target = augment(img, target, cfg, rng)
            else:
                img, _ = augment(img, None, cfg, rng)
            xs.append(img)
            ys.append(target)
        return np.stack(xs).astype(xb.dtype), np.stack(ys)

    return apply
