"""Cheap memorization proxies and their fidelity/efficiency profile."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace

import numpy as np

from . import nn_core
from .nn_core import Batch, ModelState
from .scores import ScoreTable
from .trainer import EventLog, TrainConfig, fresh_model, predict_probs, train

PROB_FLOOR = 1e-12
LEARNING_EVENT_FIELDS = {
    "confidence": "true_prob",
    "max_confidence": "max_prob",
    "entropy": "entropy",
    "binary_accuracy": "correct",
}
FIDELITY_COLUMNS = ["proxy", "spearman_vs_mem", "wall_time_s", "pct_of_mem_time",
                    "pct_of_retrain_time"]


def learning_event_proxies(log: EventLog, logging_time: float = 0.0) -> dict[str, ScoreTable]:
    """Per-example epoch averages of the logged training signals.

    ``logging_time`` is the time the trainer spent collecting the log; it is
    charged to every proxy on top of its own averaging cost.
    """
    if log.n_epochs == 0 or log.ids.size == 0:
        raise ValueError("empty event log")
    out = {}
    for kind, attr in LEARNING_EVENT_FIELDS.items():
        t0 = time.perf_counter()
        values = getattr(log, attr).astype(np.float64).mean(axis=0)
        out[kind] = ScoreTable(log.ids.copy(), values, kind,
                               logging_time + time.perf_counter() - t0)
    return out


def symmetric_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p||q) + KL(q||p) row-wise, with probabilities floored at 1e-12."""
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    return np.sum((p - q) * (np.log(p) - np.log(q)), axis=-1)


@dataclass(frozen=True)
class HoldoutConfig:
    epochs: int = 2
    lr: float = 0.01
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    @classmethod
    def from_train(cls, cfg: TrainConfig, epochs: int = 2) -> "HoldoutConfig":
        return cls(epochs, cfg.base_lr / 10, cfg.batch_size, cfg.momentum,
                   cfg.weight_decay, cfg.seed)


def holdout_retraining_proxy(model: ModelState, data, cfg: HoldoutConfig = HoldoutConfig(),
                             train_ids=None) -> ScoreTable:
    """Fine-tune a copy on the holdout split and measure how far each
    training example's predicted distribution moves."""
    holdout = data.test_ids
    if holdout.size == 0:
        raise ValueError("holdout split is empty")
    train_ids = data.train_ids if train_ids is None else np.asarray(train_ids, dtype=np.int64)
    t0 = time.perf_counter()
    tuned = model
    if cfg.epochs > 0:
        tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, base_lr=cfg.lr,
                           schedule="constant", momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay, seed=cfg.seed)
        tuned = train(model, data, holdout, tcfg, log_events=False).model
    x = data.inputs[train_ids]
    scores = symmetric_kl(predict_probs(model, x), predict_probs(tuned, x))
    return ScoreTable(train_ids, scores, "holdout_retraining", time.perf_counter() - t0)


def sign_probes(seed: int, n_probes: int, shape) -> list[np.ndarray]:
    out = []
    for r in range(n_probes):
        rng = np.random.default_rng([int(seed), 13, r])
        out.append(rng.integers(0, 2, size=shape) * 2.0 - 1.0)
    return out


def finite_difference_curvature(grad_fn, x: np.ndarray, probes, h: float) -> np.ndarray:
    """mean_r ||grad(x + h v_r) - grad(x)|| / h, row-wise over ``x``."""
    g0 = grad_fn(x)
    total = np.zeros(len(x))
    for v in probes:
        total += np.linalg.norm(grad_fn(x + h * v) - g0, axis=1) / h
    return total / len(probes)


@dataclass(frozen=True)
class CurvatureConfig:
    n_probes: int = 4
    h: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.n_probes < 1:
            raise ValueError("n_probes must be >= 1")
        if not self.h > 0:
            raise ValueError("h must be positive")


def loss_curvature_proxy(checkpoints, data, cfg: CurvatureConfig = CurvatureConfig(),
                         train_ids=None) -> ScoreTable:
    """Input-space loss curvature averaged over training checkpoints."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    train_ids = data.train_ids if train_ids is None else np.asarray(train_ids, dtype=np.int64)
    t0 = time.perf_counter()
    x = data.inputs[train_ids]
    labels = data.labels[train_ids]
    probes = sign_probes(cfg.seed, cfg.n_probes, x.shape)
    total = np.zeros(len(train_ids))
    for model in checkpoints:
        grad_fn = lambda z, m=model: nn_core.input_gradients(m, Batch(z, labels))
        total += finite_difference_curvature(grad_fn, x, probes, cfg.h)
    return ScoreTable(train_ids, total / len(checkpoints), "loss_curvature",
                      time.perf_counter() - t0)


def checkpoint_interval(epochs: int) -> int:
    return max(1, epochs // 10)


def rank_average(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(len(x))
    start = 0
    while start < len(x):
        stop = start + 1
        while stop < len(x) and sorted_x[stop] == sorted_x[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def _values(a):
    if isinstance(a, ScoreTable):
        return a.ids, a.scores
    a = np.asarray(a, dtype=np.float64)
    return np.arange(len(a)), a


def spearman(a, b) -> float:
    """Rank correlation over ids present and defined in both inputs.

    Accepts ScoreTables (matched by example id) or plain equal-length arrays.
    Returns NaN when either side has constant ranks.
    """
    ids_a, va = _values(a)
    ids_b, vb = _values(b)
    common, ia, ib = np.intersect1d(ids_a, ids_b, return_indices=True)
    va, vb = va[ia], vb[ib]
    keep = ~(np.isnan(va) | np.isnan(vb))
    if keep.sum() < 3:
        raise ValueError("spearman needs at least 3 common defined ids")
    ra, rb = rank_average(va[keep]), rank_average(vb[keep])
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        return float("nan")
    return float(np.clip((ra * rb).sum() / denom, -1.0, 1.0))


def fidelity_report(mem: ScoreTable, proxies, retrain_time: float) -> list[dict]:
    """One row per proxy with its rank correlation and relative cost."""
    rows = []
    for table in proxies:
        rows.append({
            "proxy": table.kind,
            "spearman_vs_mem": spearman(table, mem),
            "wall_time_s": table.wall_time,
            "pct_of_mem_time": 100.0 * table.wall_time / mem.wall_time if mem.wall_time else float("nan"),
            "pct_of_retrain_time": 100.0 * table.wall_time / retrain_time if retrain_time else float("nan"),
        })
    return rows


def write_fidelity_csv(rows, path, columns=FIDELITY_COLUMNS, preamble: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(preamble)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], str) else repr(float(row[c])) for c in columns])


def proxy_table(kind: str, data, train_cfg: TrainConfig, model: ModelState | None = None,
                train_ids=None, seed: int = 0, holdout_cfg: HoldoutConfig | None = None,
                curvature_cfg: CurvatureConfig | None = None) -> ScoreTable:
    """Compute one proxy for ``train_ids`` (default: the whole train split).

    Learning-event proxies come from a fresh training run seeded with ``seed``;
    holdout retraining and loss curvature read the supplied ``model``.
    """
    train_ids = data.train_ids if train_ids is None else np.asarray(train_ids, dtype=np.int64)
    if kind in LEARNING_EVENT_FIELDS:
        cfg = train_cfg.with_seed(seed)
        res = train(fresh_model(data, cfg), data, train_ids, cfg)
        return learning_event_proxies(res.events, res.log_time)[kind]
    if model is None:
        raise ValueError(f"{kind} proxy needs a trained model")
    if kind == "holdout_retraining":
        hcfg = holdout_cfg or HoldoutConfig.from_train(train_cfg)
        return holdout_retraining_proxy(model, data, replace(hcfg, seed=seed), train_ids)
    if kind == "loss_curvature":
        ccfg = curvature_cfg or CurvatureConfig()
        return loss_curvature_proxy([model], data, replace(ccfg, seed=seed), train_ids)
    raise ValueError(f"unknown proxy kind {kind!r}")
