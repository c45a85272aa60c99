"""Image-level classification training with SGD, momentum and weight decay."""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .data import derive_rng, dihedral
from .network import backward, forward_classify, gate_context

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    feedback_in_training: bool = False
    lr_schedule: str = "step"  # "constant" or "step"
    lr_step_factor: float = 0.1
    lr_step_every: int = 0  # 0: drop once at two thirds of the epochs
    augment: bool = True

    def validate(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"lr_schedule must be 'constant' or 'step', got {self.lr_schedule!r}")
        if self.lr_step_every < 0 or self.lr_step_factor <= 0:
            raise ValueError("lr_step_every must be >= 0 and lr_step_factor > 0")

    def lr_at(self, epoch):
        """Learning rate for zero-based ``epoch``."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        every = self.lr_step_every or max(1, math.ceil(2 * self.epochs / 3))
        return self.learning_rate * self.lr_step_factor ** (epoch // every)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    seconds: float
    learning_rate: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    checkpoint: str = ""

    def log_lines(self):
        return [
            f"epoch {e.epoch:3d}  lr {e.learning_rate:.5g}  loss {e.loss:.6f}  "
            f"acc {e.accuracy:.4f}  time {e.seconds:.2f}s"
            for e in self.epochs
        ]

    def key_values(self):
        out = {"format": "feedbackseg-train/1", "epochs": len(self.epochs)}
        for e in self.epochs:
            out[f"epoch.{e.epoch}.loss"] = repr(e.loss)
            out[f"epoch.{e.epoch}.accuracy"] = repr(e.accuracy)
            out[f"epoch.{e.epoch}.learning_rate"] = repr(e.learning_rate)
        if self.checkpoint:
            out["checkpoint"] = self.checkpoint
        return out


def is_decayed(name):
    """Weight decay applies to convolution kernels only."""
    return name.endswith(".conv.weight")


def sgd_step(params, grads, lr, weight_decay=0.0, momentum=0.0, velocity=None):
    """One SGD update; returns ``(new_params, new_velocity)`` as dicts.

    ``g' = g + weight_decay * w`` (conv kernels only), ``v = momentum * v + g'``,
    ``w = w - lr * v``.
    """
    velocity = {} if velocity is None else velocity
    new_p, new_v = {}, {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        if weight_decay and is_decayed(name):
            g = g + w.dtype.type(weight_decay) * w
        v = velocity.get(name)
        v = g if v is None or momentum == 0 else w.dtype.type(momentum) * v + g
        new_v[name] = v
        new_p[name] = (w - w.dtype.type(lr) * v).astype(w.dtype)
    return new_p, new_v


def _stack(patches, idx, rng=None):
    imgs, labels = [], []
    for i in idx:
        img = patches[i].image
        if rng is not None:
            img = dihedral(img, int(rng.integers(8)))
        imgs.append(img)
        labels.append(patches[i].label)
    return np.stack(imgs), np.stack(labels)


def _batch_correct(probs, labels):
    """Samples whose every class call matches the label; probs == 0.5 is never correct."""
    called = probs > 0.5
    ok = (called == (labels > 0.5)) & (probs != 0.5)
    return int(ok.all(axis=1).sum())


def train(net, train_set, config, progress=None):
    """Train ``net`` in place on image-level labels; returns ``(net, TrainReport)``.

    ``train_set`` is a sequence of :class:`~feedbackseg.data.LabeledPatch`.
    """
    config.validate()
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training set")
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    rng = derive_rng(config.seed, "shuffle")
    aug_rng = derive_rng(config.seed, "augment") if config.augment else None
    velocity = {}
    report = TrainReport()
    nbatches = n // config.batch_size  # the remainder is dropped; batch norm needs >= 2
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total_loss, correct, seen = 0.0, 0, 0
        for b in range(nbatches):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            x, y = _stack(train_set, idx, aug_rng)
            gates = None
            if config.feedback_in_training:
                gates = _ground_truth_gates(net, x, y)
            logits, probs, cache = forward_classify(net, x, "train", gates)
            loss, grad_probs = L.squared_loss(probs, y)
            grad_logits = L.sigmoid_backward(probs, grad_probs)
            grads = backward(net, cache, grad_logits).params
            new_p, velocity = sgd_step(
                net.parameters(), grads, lr, config.weight_decay, config.momentum, velocity
            )
            for name, w in new_p.items():
                net.set_parameter(name, w)
            total_loss += loss
            correct += _batch_correct(probs, y)
            seen += len(idx)
        stats = EpochStats(epoch + 1, total_loss / seen, correct / seen,
                           time.perf_counter() - t0, lr)
        report.epochs.append(stats)
        log.info(report.log_lines()[-1])
        if progress is not None:
            progress(stats)
    return net, report


def _ground_truth_gates(net, x, y):
    """Per-sample gates for each sample's first positive class, stacked into batch masks."""
    per_unit = [[] for _ in net.units]
    for i in range(x.shape[0]):
        _, _, cache = forward_classify(net, x[i : i + 1], "infer")
        j = int(np.argmax(y[i]))
        ctx = gate_context(net, cache, j)
        for u, g in enumerate(ctx.gates):
            per_unit[u].append(g)
    return [np.concatenate(g) for g in per_unit]


def evaluate_classification(net, labeled_set, batch_size=64):
    """Gates-open, inference-mode ``(accuracy, mean per-sample loss)``."""
    n = len(labeled_set)
    if n == 0:
        raise ValueError("empty evaluation set")
    correct, total_loss = 0, 0.0
    for start in range(0, n, batch_size):
        idx = range(start, min(n, start + batch_size))
        x, y = _stack(labeled_set, idx)
        _, probs, _ = forward_classify(net, x, "infer")
        loss, _ = L.squared_loss(probs, y)
        total_loss += loss
        correct += _batch_correct(probs, y)
    return correct / n, total_loss / n
