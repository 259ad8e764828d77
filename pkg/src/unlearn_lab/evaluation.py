"""Unlearning quality metrics: ToW, ToW-MIA, MIA score, Gini and Lorenz."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .trainer import accuracy, snapshot


@dataclass
class EvalReport:
    acc_forget_u: float
    acc_retain_u: float
    acc_test_u: float
    acc_forget_r: float
    acc_retain_r: float
    acc_test_r: float
    mia_u: float
    mia_r: float
    tow: float
    tow_mia: float
    wall_time_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def tow_from_gaps(forget_gap: float, retain_gap: float, test_gap: float) -> float:
    return (1.0 - forget_gap) * (1.0 - retain_gap) * (1.0 - test_gap)


def _accuracies(model, data, task):
    for name, ids in (("forget", task.forget_ids), ("retain", task.retain_ids),
                      ("test", data.test_ids)):
        if len(ids) == 0:
            raise ValueError(f"{name} split is empty")
    return (accuracy(model, data, task.forget_ids), accuracy(model, data, task.retain_ids),
            accuracy(model, data, data.test_ids))


def tow(model_u, model_r, data, task) -> float:
    """Product of (1 - |accuracy gap|) over forget, retain and test splits."""
    au, ar = _accuracies(model_u, data, task), _accuracies(model_r, data, task)
    return tow_from_gaps(*(abs(u - r) for u, r in zip(au, ar)))


@dataclass(frozen=True)
class MIAConfig:
    n_samples: int = 1000
    seed: int = 0
    iterations: int = 500
    l2: float = 1e-3
    lr: float = 0.5


def mia_features(model, data, ids) -> np.ndarray:
    p_true, _, entropy, _, loss = snapshot(model, data, ids)
    return np.column_stack([p_true, entropy, loss])


class LinearMIA:
    """L2-regularised logistic regression on standardised features.

    Label 1 means "training" (member), 0 means "non-training".
    """

    def __init__(self, iterations=500, l2=1e-3, lr=0.5):
        self.iterations, self.l2, self.lr = iterations, l2, lr

    def fit(self, x, y):
        y = np.asarray(y, dtype=np.float64)
        if len(np.unique(y)) < 2:
            raise ValueError("membership classifier needs both classes to train")
        self.mu = x.mean(axis=0)
        self.sd = x.std(axis=0)
        self.sd[self.sd == 0] = 1.0
        z = (x - self.mu) / self.sd
        self.w = np.zeros(z.shape[1])
        self.b = 0.0
        n = len(y)
        for _ in range(self.iterations):
            p = 1.0 / (1.0 + np.exp(-(z @ self.w + self.b)))
            r = p - y
            self.w -= self.lr * (z.T @ r / n + self.l2 * self.w)
            self.b -= self.lr * r.mean()
        return self

    def predict(self, x) -> np.ndarray:
        z = (x - self.mu) / self.sd
        return (z @ self.w + self.b > 0).astype(np.int8)


def true_negative_rate(predictions) -> float:
    """Share of queried examples labelled non-training."""
    predictions = np.asarray(predictions)
    return float(np.mean(predictions == 0))


def mia_score(model, data, task, cfg: MIAConfig = MIAConfig()) -> float:
    """Fraction of the forget set a retain-vs-test attack calls non-training."""
    n = min(cfg.n_samples, len(task.retain_ids), len(data.test_ids))
    if n < 1 or len(task.forget_ids) == 0:
        raise ValueError("MIA needs non-empty retain, test and forget sets")
    rng = np.random.default_rng([int(cfg.seed), 17])
    pos = rng.choice(task.retain_ids, size=n, replace=False)
    neg = rng.choice(data.test_ids, size=n, replace=False)
    x = np.vstack([mia_features(model, data, pos), mia_features(model, data, neg)])
    y = np.concatenate([np.ones(n), np.zeros(n)])
    clf = LinearMIA(cfg.iterations, cfg.l2, cfg.lr).fit(x, y)
    return true_negative_rate(clf.predict(mia_features(model, data, task.forget_ids)))


def evaluate(model_u, model_r, data, task, mia_cfg: MIAConfig = MIAConfig(),
             wall_time_s: float = 0.0, mia_r: float | None = None) -> EvalReport:
    """Full report for one unlearned model against its retrained oracle.

    ``mia_r`` may be passed in when the oracle's MIA score is already known.
    """
    au = _accuracies(model_u, data, task)
    ar = _accuracies(model_r, data, task)
    m_u = mia_score(model_u, data, task, mia_cfg)
    m_r = mia_score(model_r, data, task, mia_cfg) if mia_r is None else mia_r
    gaps = [abs(u - r) for u, r in zip(au, ar)]
    return EvalReport(
        *au, *ar, m_u, m_r,
        tow=tow_from_gaps(*gaps),
        tow_mia=tow_from_gaps(abs(m_u - m_r), gaps[1], gaps[2]),
        wall_time_s=wall_time_s,
    )


def tow_mia(model_u, model_r, data, task, mia_cfg: MIAConfig = MIAConfig()) -> float:
    return evaluate(model_u, model_r, data, task, mia_cfg).tow_mia


def _prepare(scores) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("need at least one score")
    if np.isnan(x).any():
        raise ValueError("NaN in scores")
    x = np.sort(np.maximum(x, 0.0))
    if x.sum() == 0:
        raise ValueError("Gini/Lorenz undefined for all-zero scores")
    return x


def gini(scores) -> float:
    """Gini coefficient; negative values are clamped to zero first."""
    x = _prepare(scores)
    n = len(x)
    ranks = np.arange(1, n + 1)
    g = 2.0 * np.sum(ranks * x) / (n * x.sum()) - (n + 1) / n
    return float(max(g, 0.0))  # equal scores can round a hair below zero


def lorenz(scores) -> np.ndarray:
    """(population share, score share) points from (0, 0) to (1, 1)."""
    x = _prepare(scores)
    n = len(x)
    alpha = np.arange(n + 1) / n
    beta = np.concatenate([[0.0], np.cumsum(x) / x.sum()])
    beta[-1] = 1.0
    return np.column_stack([alpha, beta])
