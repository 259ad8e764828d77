"""Approximate unlearning algorithms and the retrain-from-scratch oracle."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import nn_core
from .trainer import TrainConfig, epoch_permutation, fresh_model, train

ALGORITHMS = ("retrain", "fine_tune", "neggrad_plus", "l1_sparse", "salun")


@dataclass(frozen=True)
class UnlearnConfig:
    algorithm: str = "neggrad_plus"
    epochs: int = 5
    lr: float = 0.01
    beta: float = 0.95
    gamma: float = 1e-4
    sparsity_ratio: float = 0.5
    seed: int = 0
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.5 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0.5, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        # 1.0 is admitted as the full random-label fine-tuning limit
        if not 0.0 < self.sparsity_ratio <= 1.0:
            raise ValueError("sparsity_ratio must lie in (0, 1]")

    def with_seed(self, seed: int) -> "UnlearnConfig":
        return replace(self, seed=int(seed))


def combined_loss(beta: float, retain_loss: float, forget_loss: float) -> float:
    return beta * retain_loss - (1.0 - beta) * forget_loss


def _descend(model, data, ids, cfg: UnlearnConfig, labels=None, forget_ids=None,
             l1_gamma=0.0, mask=None):
    """``cfg.epochs`` of constant-lr SGD over ``ids`` on a copy of ``model``.

    With ``forget_ids`` every retain batch is paired with a forget batch
    (cycled) and the step follows beta * L_retain - (1 - beta) * L_forget.
    """
    model = model.zero_momentum()
    ids = np.asarray(ids, dtype=np.int64)
    x_all = data.inputs[ids]
    y_all = data.labels[ids] if labels is None else np.asarray(labels, dtype=np.int64)
    ascend = forget_ids is not None and len(forget_ids) > 0 and cfg.beta < 1.0
    if ascend:
        forget_ids = np.asarray(forget_ids, dtype=np.int64)
        xf_all, yf_all = data.inputs[forget_ids], data.labels[forget_ids]
        f_rng = np.random.default_rng([int(cfg.seed), 2])
        f_perm, f_pos = f_rng.permutation(len(forget_ids)), 0
    n = len(ids)
    for epoch in range(cfg.epochs):
        perm = epoch_permutation(cfg.seed, epoch, n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            grads, _ = nn_core._backprop(model, x_all[idx], y_all[idx])
            if ascend:
                if f_pos >= len(f_perm):
                    f_perm, f_pos = f_rng.permutation(len(forget_ids)), 0
                fidx = f_perm[f_pos:f_pos + cfg.batch_size]
                f_pos += cfg.batch_size
                f_grads, _ = nn_core._backprop(model, xf_all[fidx], yf_all[fidx])
                grads = [cfg.beta * g - (1.0 - cfg.beta) * fg for g, fg in zip(grads, f_grads)]
            nn_core.sgd_update_(model, grads, cfg.lr, cfg.momentum, cfg.weight_decay,
                                l1_gamma, mask)
    return model


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    model = fn(*args, **kwargs)
    return model, time.perf_counter() - t0


def _require_retain(task):
    if len(task.retain_ids) == 0:
        raise ValueError("retain set is empty")


def retrain(data, task, train_cfg: TrainConfig, template=None):
    """Fresh model trained only on the retain set. Returns (model, seconds)."""
    _require_retain(task)
    t0 = time.perf_counter()
    init = fresh_model(data, train_cfg)
    if template is not None and init.layer_dims != template.layer_dims:
        raise ValueError("train config does not reproduce the template architecture")
    model = train(init, data, task.retain_ids, train_cfg, log_events=False).model
    return model, time.perf_counter() - t0


def fine_tune(model, data, task, cfg: UnlearnConfig):
    """Keep training the original model on the retain set."""
    _require_retain(task)
    return _timed(_descend, model, data, task.retain_ids, cfg)


def neggrad_plus(model, data, task, cfg: UnlearnConfig):
    """Descend on retain batches while ascending on cycled forget batches."""
    _require_retain(task)
    return _timed(_descend, model, data, task.retain_ids, cfg, forget_ids=task.forget_ids)


def l1_sparse(model, data, task, cfg: UnlearnConfig):
    _require_retain(task)
    return _timed(_descend, model, data, task.retain_ids, cfg, l1_gamma=cfg.gamma)


def random_labels(data, ids, seed: int) -> np.ndarray:
    """A label != the presented one per example, fixed by (seed, example id)."""
    ids = np.asarray(ids, dtype=np.int64)
    rng = np.random.default_rng([int(seed), 19])
    shifts = rng.integers(1, data.n_classes, size=len(data))
    return (data.labels[ids] + shifts[ids]) % data.n_classes


def saliency_mask(model, data, forget_ids, sparsity_ratio: float):
    """Top ``ceil(ratio * n_params)`` parameters by |d L_forget / d w|.

    Ranking is global over all layers; ties go to the earlier parameter.
    """
    grads = nn_core.backward(model, data.batch(forget_ids))
    flat = np.concatenate([np.abs(g).ravel() for g in grads])
    k = math.ceil(sparsity_ratio * flat.size)
    keep = np.zeros(flat.size, dtype=bool)
    keep[np.argsort(-flat, kind="stable")[:k]] = True
    masks, pos = [], 0
    for g in grads:
        masks.append(keep[pos:pos + g.size].reshape(g.shape))
        pos += g.size
    return masks


def salun(model, data, task, cfg: UnlearnConfig):
    """Random-label fine-tuning of the most forget-salient weights only."""
    _require_retain(task)
    t0 = time.perf_counter()
    mask = saliency_mask(model, data, task.forget_ids, cfg.sparsity_ratio)
    ids = np.concatenate([task.retain_ids, task.forget_ids])
    labels = np.concatenate([data.labels[task.retain_ids],
                             random_labels(data, task.forget_ids, cfg.seed)])
    out = _descend(model, data, ids, cfg, labels=labels, mask=mask)
    return out, time.perf_counter() - t0


UNLEARNERS = {
    "fine_tune": fine_tune,
    "neggrad_plus": neggrad_plus,
    "l1_sparse": l1_sparse,
    "salun": salun,
}


def unlearn(model, data, task, cfg: UnlearnConfig, train_cfg: TrainConfig | None = None):
    """Dispatch on ``cfg.algorithm``; ``retrain`` needs ``train_cfg``."""
    if cfg.algorithm == "retrain":
        if train_cfg is None:
            raise ValueError("retrain needs a training config")
        return retrain(data, task, train_cfg, template=model)
    return UNLEARNERS[cfg.algorithm](model, data, task, cfg)
