"""Mini-batch training with Adam or SGD+momentum and optional early stopping."""

from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import models, nn
from .data import pad_batch
from .metrics import evaluate

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Loss or gradients went non-finite; carries a diagnostic message."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stopping: bool = False
    patience: int = 3
    monitor: str = "val_loss"
    class_weights: bool = False
    bn_recalibration: bool = True
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.monitor != "val_loss":
            raise ValueError("only val_loss can be monitored")

    @classmethod
    def from_flat(cls, d):
        """Build from string key/value pairs (CLI flag names, dashes allowed)."""
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in d.items():
            name = k.replace("-", "_")
            if name not in types:
                continue
            t = types[name]
            if t == "bool":
                kw[name] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
            elif t == "int":
                kw[name] = int(v)
            elif t == "float":
                kw[name] = float(v)
            else:
                kw[name] = str(v)
        return cls(**kw)


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_metrics: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    stopped_early: bool = False
    restored_epoch: int | None = None

    def to_dict(self, timing=True):
        d = asdict(self)
        if not timing:
            d.pop("epoch_seconds")
        return d


# --------------------------------------------------------------------------
# optimizers


def sgd_step(param, grad, state, lr, momentum=0.0):
    """v <- momentum * v + grad; param <- param - lr * v (in place)."""
    if param.shape != grad.shape:
        raise ValueError("sgd_step: parameter and gradient shapes differ")
    v = state.get("v")
    if v is None:
        v = state["v"] = np.zeros_like(param)
    v *= momentum
    v += grad
    param -= lr * v
    return param


def adam_step(param, grad, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update (in place)."""
    if param.shape != grad.shape:
        raise ValueError("adam_step: parameter and gradient shapes differ")
    if "m" not in state:
        state["m"] = np.zeros_like(param)
        state["v"] = np.zeros_like(param)
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    m, v = state["m"], state["v"]
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param


class Optimizer:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.slots = {}

    def step(self, model, grads):
        c = self.config
        for key, p in model.named_params():
            g = grads[key]
            slot = self.slots.setdefault(key, {})
            if c.optimizer == "adam":
                adam_step(p, g, slot, c.lr, c.beta1, c.beta2, c.adam_eps)
            else:
                sgd_step(p, g, slot, c.lr, c.momentum)


# --------------------------------------------------------------------------
# early stopping


def early_stopping_check(history, patience):
    """Decide whether to stop, given the monitored values so far.

    Returns ``("continue", None)`` or ``("stop", restore_epoch)`` with a
    1-based epoch number. Only a strict decrease counts as improvement, so
    ties restore the earliest best epoch.
    """
    values = list(history)
    if not values:
        raise ValueError("early_stopping_check: empty history")
    best = int(np.argmin(values))
    since = len(values) - 1 - best
    if since > 0 and since >= patience:
        return "stop", best + 1
    return "continue", None


# --------------------------------------------------------------------------
# batching helpers


def collate(items, idx, dtype=np.float32):
    """Batch tensor for ``idx``: fixed-size arrays are sliced, crops are padded."""
    if isinstance(items, np.ndarray):
        return items[idx].astype(dtype, copy=False)
    return pad_batch([items[i] for i in idx]).x.astype(dtype, copy=False)


def batch_indices(order, batch_size):
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # batch norm needs two samples; fold a lone trailing sample into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def predict_scores(model, items, batch_size=16):
    """Damaged-class probabilities, batched in input order."""
    n = len(items)
    dtype = _param_dtype(model)
    out = np.empty(n, dtype=np.float64)
    for chunk in batch_indices(np.arange(n), batch_size):
        out[chunk] = models.predict_proba(model, collate(items, chunk, dtype))[:, 1]
    return out


def _param_dtype(model):
    for _, p in model.named_params():
        return p.dtype
    return np.float32


def _layer_norms(model):
    return {f"{i}.{k}": float(np.linalg.norm(v)) for (i, k), v in model.named_params()}


def recalibrate_batchnorm(model, items, batch_size=16):
    """Re-estimate every batch-norm layer's running statistics in place.

    One forward pass over ``items`` in fixed order, no weight update; each
    running statistic becomes the equal-weight mean of the per-batch
    statistics. With momentum 0.9 the moving averages only remember the last
    dozen or so batches, which can leave them well off the population values
    when the weights are still moving.
    """
    bns = [i for i, l in enumerate(model.layers) if l.kind == "batchnorm"]
    if not bns or len(items) == 0:
        return model
    dtype = _param_dtype(model)
    try:
        for t, chunk in enumerate(batch_indices(np.arange(len(items)), batch_size), start=1):
            for i in bns:
                model.layers[i].hyper["momentum"] = (t - 1) / t
            models.run(model, collate(items, chunk, dtype), stop=bns[-1] + 1, mode="train")
    finally:
        for i in bns:
            model.layers[i].hyper.pop("momentum", None)
    return model


@contextlib.contextmanager
def deterministic_mode(enabled=True):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


# --------------------------------------------------------------------------
# training loop


def _validate(model, items, labels, batch_size):
    scores = predict_scores(model, items, batch_size)
    p = np.clip(np.where(labels == 1, scores, 1 - scores), 1e-12, 1.0)
    loss = float(-np.log(p).mean())
    report, _ = evaluate(labels, scores)
    return loss, report


def train(model, train_set, val_set=None, config: TrainConfig | None = None, on_epoch=None):
    """Train ``model`` in place and return ``(model, history)``.

    ``train_set``/``val_set`` are ``(items, labels)`` pairs where items is a
    list of (h, w, 3) uint8 crops (padded per batch) or an already-stacked
    (n, c, h, w) float array. ``on_epoch(epoch, history)`` is called after
    every epoch; a true return value ends training there.
    """
    config = config or TrainConfig()
    items, labels = train_set
    labels = np.asarray(labels, dtype=np.int64)
    if len(items) == 0:
        raise ValueError("train: empty training set")
    if config.early_stopping and val_set is None:
        raise ValueError("train: early stopping needs a validation set")
    dtype = np.float64 if config.precision == "float64" else np.float32
    if _param_dtype(model) != dtype:
        model.__dict__.update(model.astype(dtype).__dict__)
    model.train()

    class_weights = None
    if config.class_weights:
        counts = np.bincount(labels, minlength=2).astype(np.float64)
        class_weights = np.where(counts > 0, len(labels) / (2 * np.maximum(counts, 1)), 0.0)

    opt = Optimizer(config)
    rng = np.random.default_rng(config.seed)
    hist = History()
    best_state = None
    best_val = np.inf

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses, correct, seen = [], 0, 0
        for b, chunk in enumerate(batch_indices(rng.permutation(len(items)), config.batch_size)):
            x = collate(items, chunk, dtype)
            y = labels[chunk]
            try:
                probs, logits, ctxs = models.forward(model, x)
                loss, _, dlogits = nn.softmax_xent(logits, y, class_weights)
                if not np.isfinite(loss):
                    raise nn.NonFiniteError("non-finite loss")
                _, grads = models.backward(model, ctxs, dlogits)
                opt.step(model, grads)
            except nn.NonFiniteError as exc:
                raise TrainingAborted(
                    f"numeric failure at epoch {epoch}, batch {b}: {exc}; "
                    f"parameter norms {_layer_norms(model)}") from exc
            losses.append(loss * len(chunk))
            correct += int((probs.argmax(axis=1) == y).sum())
            seen += len(chunk)
        hist.train_loss.append(float(np.sum(losses) / seen))
        hist.train_acc.append(correct / seen)
        if config.bn_recalibration:
            recalibrate_batchnorm(model, items, config.batch_size)

        if val_set is not None:
            vloss, vrep = _validate(model, val_set[0], np.asarray(val_set[1]), config.batch_size)
            hist.val_loss.append(vloss)
            hist.val_metrics.append(vrep.to_dict())
            if config.early_stopping and vloss < best_val:
                best_val = vloss
                best_state = {k: v.copy() for k, v in model.state().items()}
        hist.epoch_seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d loss %.4f acc %.4f", epoch, hist.train_loss[-1], hist.train_acc[-1])

        if on_epoch is not None and on_epoch(epoch, hist):
            break
        if config.early_stopping:
            decision, restore = early_stopping_check(hist.val_loss, config.patience)
            if decision == "stop":
                hist.stopped_early = True
                hist.restored_epoch = restore
                break

    if config.early_stopping and best_state is not None:
        model.load_state(best_state)
        if hist.restored_epoch is None:
            hist.restored_epoch = int(np.argmin(hist.val_loss)) + 1
    return model, hist
