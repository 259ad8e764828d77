"""Mini-batch momentum SGD training with per-epoch learning-event logging."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn_core
from .nn_core import ModelState

SCHEDULES = ("cosine", "multistep", "constant")
EVAL_CHUNK = 4096


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    base_lr: float = 0.1
    schedule: str = "cosine"
    milestones: tuple = ()
    factor: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    hidden: tuple = (64, 64)
    activation: str = "relu"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))


@dataclass
class EventLog:
    """Per-epoch, per-example snapshot metrics; arrays are (epochs, n_examples)."""

    ids: np.ndarray
    true_prob: np.ndarray
    max_prob: np.ndarray
    entropy: np.ndarray
    correct: np.ndarray

    @property
    def n_epochs(self) -> int:
        return self.true_prob.shape[0]

    def write_csv(self, path, preamble: str = "") -> None:
        with open(path, "w", newline="") as fh:
            fh.write(preamble)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "example_id", "true_prob", "max_prob", "entropy", "correct"])
            for e in range(self.n_epochs):
                for j, i in enumerate(self.ids):
                    w.writerow([e, int(i), repr(float(self.true_prob[e, j])),
                                repr(float(self.max_prob[e, j])),
                                repr(float(self.entropy[e, j])), int(self.correct[e, j])])


@dataclass
class TrainResult:
    model: ModelState
    events: EventLog | None
    wall_time: float
    losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    log_time: float = 0.0


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.schedule == "cosine":
        return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    if cfg.schedule == "multistep":
        passed = sum(1 for m in cfg.milestones if m <= epoch)
        return cfg.base_lr * cfg.factor ** passed
    return cfg.base_lr


def fresh_model(data, cfg: TrainConfig) -> ModelState:
    dims = [data.input_dim, *cfg.hidden, data.n_classes]
    return nn_core.init_model(dims, cfg.seed, cfg.activation)


def epoch_permutation(seed: int, epoch: int, n: int, stream: int = 1) -> np.ndarray:
    return np.random.default_rng([int(seed), stream, int(epoch)]).permutation(n)


def predict_probs(model: ModelState, inputs: np.ndarray) -> np.ndarray:
    out = []
    for start in range(0, len(inputs), EVAL_CHUNK):
        out.append(nn_core.softmax(nn_core.forward(model, inputs[start:start + EVAL_CHUNK])))
    return np.vstack(out) if out else np.zeros((0, model.n_classes))


def snapshot(model: ModelState, data, ids):
    """true-class prob, max prob, entropy, correctness and loss per example."""
    ids = np.asarray(ids, dtype=np.int64)
    probs = predict_probs(model, data.inputs[ids])
    labels = data.labels[ids]
    p_true = probs[np.arange(len(ids)), labels]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    entropy = np.maximum(-plogp.sum(axis=1), 0.0)
    correct = (probs.argmax(axis=1) == labels).astype(np.int8)
    loss = -np.log(np.maximum(p_true, 1e-300))
    return p_true, probs.max(axis=1), entropy, correct, loss


def accuracy(model: ModelState, data, ids) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("accuracy of an empty id set is undefined")
    probs = predict_probs(model, data.inputs[ids])
    return float(np.mean(probs.argmax(axis=1) == data.labels[ids]))


def train(init: ModelState, data, subset, cfg: TrainConfig, log_events: bool = True,
          checkpoint_every: int | None = None) -> TrainResult:
    """Run ``cfg.epochs`` of shuffled mini-batch SGD over ``subset``.

    Momentum buffers start from zero. When ``log_events`` is set, metrics for
    every example in ``subset`` are recorded after each epoch's updates.
    """
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ValueError("cannot train on an empty subset")
    t0 = time.perf_counter()
    model = init.zero_momentum()
    x_all, y_all = data.inputs[subset], data.labels[subset]
    n = len(subset)
    logs = {k: [] for k in ("true_prob", "max_prob", "entropy", "correct")}
    losses, checkpoints = [], []
    log_time = 0.0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        perm = epoch_permutation(cfg.seed, epoch, n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            grads, _ = nn_core._backprop(model, x_all[idx], y_all[idx])
            nn_core.sgd_update_(model, grads, lr, cfg.momentum, cfg.weight_decay)
        if log_events:
            t_log = time.perf_counter()
            p_true, p_max, ent, corr, loss = snapshot(model, data, subset)
            logs["true_prob"].append(p_true)
            logs["max_prob"].append(p_max)
            logs["entropy"].append(ent)
            logs["correct"].append(corr)
            losses.append(float(loss.mean()))
            finite = np.isfinite(losses[-1])
            log_time += time.perf_counter() - t_log
        else:
            finite = np.isfinite(model.params[-2]).all()
        if not finite:
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}")
        if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            checkpoints.append(model.copy())
    events = None
    if log_events:
        events = EventLog(subset.copy(), *(np.array(logs[k]) for k in
                                           ("true_prob", "max_prob", "entropy", "correct")))
    return TrainResult(model, events, time.perf_counter() - t0, losses, checkpoints, log_time)
