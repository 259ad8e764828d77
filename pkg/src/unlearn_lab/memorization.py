"""Memorization scores: subsampled ensemble estimator and exact leave-one-out.

mem(i) = P[model trained with i predicts y_i] - P[model trained without i predicts y_i]
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .scores import ScoreTable
from .trainer import TrainConfig, accuracy, fresh_model, snapshot, train

log = logging.getLogger(__name__)

LOO_MAX_TRAIN = 64


@dataclass(frozen=True)
class MemConfig:
    n_models: int = 100
    subset_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.n_models < 2:
            raise ValueError("need at least two models")
        if not 0.0 < self.subset_fraction < 1.0:
            raise ValueError("subset_fraction must lie in (0, 1)")


def model_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), 7, int(index)]).generate_state(1)[0])


def _subset_mask(seed: int, index: int, n: int, m: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 11, int(index)])
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=m, replace=False)] = True
    return mask


def _member_run(data, train_ids, train_cfg, mem_cfg, k):
    n = len(train_ids)
    m = max(1, int(round(mem_cfg.subset_fraction * n)))
    mask = _subset_mask(mem_cfg.seed, k, n, m)
    cfg = train_cfg.with_seed(model_seed(mem_cfg.seed, k))
    res = train(fresh_model(data, cfg), data, train_ids[mask], cfg, log_events=False)
    correct = snapshot(res.model, data, train_ids)[3].astype(bool)
    return k, mask, correct


def aggregate(runs, n: int):
    """Keyed mean of in-subset and out-of-subset correctness.

    ``runs`` is an iterable of ``(index, in_mask, correct)``; the result does
    not depend on its order.
    """
    in_hits = np.zeros(n, dtype=np.int64)
    in_count = np.zeros(n, dtype=np.int64)
    out_hits = np.zeros(n, dtype=np.int64)
    out_count = np.zeros(n, dtype=np.int64)
    for _, mask, correct in sorted(runs, key=lambda r: r[0]):
        in_count += mask
        out_count += ~mask
        in_hits += mask & correct
        out_hits += ~mask & correct
    with np.errstate(invalid="ignore", divide="ignore"):
        score = in_hits / in_count - out_hits / out_count
    score[(in_count == 0) | (out_count == 0)] = np.nan
    return score, in_count, out_count


def estimate_memorization(data, train_cfg: TrainConfig, mem_cfg: MemConfig = MemConfig(),
                          n_jobs: int = 1, train_ids=None) -> ScoreTable:
    """Train ``n_models`` models on random subsets and difference their hit rates.

    Examples never left out (or never included) get NaN and are listed in
    ``undefined_ids`` rather than being given a made-up value.
    """
    t0 = time.perf_counter()
    train_ids = data.train_ids if train_ids is None else np.asarray(train_ids, dtype=np.int64)
    args = [(data, train_ids, train_cfg, mem_cfg, k) for k in range(mem_cfg.n_models)]
    if n_jobs == 1:
        runs = [_member_run(*a) for a in args]
    else:
        runs = Parallel(n_jobs=n_jobs)(delayed(_member_run)(*a) for a in args)
    score, _, _ = aggregate(runs, len(train_ids))
    table = ScoreTable(
        train_ids, score, "memorization", time.perf_counter() - t0,
        meta={"T": mem_cfg.n_models, "p": mem_cfg.subset_fraction, "seed": mem_cfg.seed},
    )
    if table.undefined_ids.size:
        log.warning("%d examples have undefined memorization scores", table.undefined_ids.size)
    return table


def exact_loo(data, train_cfg: TrainConfig, n_seeds: int = 20, seed: int = 0) -> ScoreTable:
    """Leave-one-out memorization averaged over ``n_seeds`` training seeds."""
    train_ids = data.train_ids
    n = len(train_ids)
    if n > LOO_MAX_TRAIN:
        raise ValueError(f"exact_loo is limited to {LOO_MAX_TRAIN} train examples, got {n}")
    if n_seeds < 10:
        raise ValueError("exact_loo needs at least 10 seeds")
    t0 = time.perf_counter()
    with_hits = np.zeros(n)
    without_hits = np.zeros(n)
    for s in range(n_seeds):
        cfg = train_cfg.with_seed(model_seed(seed, s))
        full = train(fresh_model(data, cfg), data, train_ids, cfg, log_events=False).model
        with_hits += snapshot(full, data, train_ids)[3]
        for j, i in enumerate(train_ids):
            rest = np.delete(train_ids, j)
            model = train(fresh_model(data, cfg), data, rest, cfg, log_events=False).model
            without_hits[j] += accuracy(model, data, [i])
    score = (with_hits - without_hits) / n_seeds
    return ScoreTable(train_ids, score, "memorization", time.perf_counter() - t0,
                      meta={"S": n_seeds, "seed": seed, "estimator": "exact_loo"})
