"""Synthetic long-tailed classification data and forget-set selection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .nn_core import Batch

CLEAN, ATYPICAL, NOISY = "clean", "atypical", "noisy"
PROVENANCE = (CLEAN, ATYPICAL, NOISY)
SPLITS = ("train", "holdout_test")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Dataset:
    """Ids are row positions: train rows first, then holdout/test rows."""

    inputs: np.ndarray
    labels: np.ndarray
    original_labels: np.ndarray
    provenance: np.ndarray
    split: np.ndarray
    n_classes: int
    seed: int

    def __post_init__(self):
        n = len(self.labels)
        for name in ("inputs", "original_labels", "provenance", "split"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has wrong length")
        if not set(np.unique(self.split)) <= set(SPLITS):
            raise ValueError("unknown split tag")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.n_classes:
            raise ValueError("label out of range")
        for arr in (self.inputs, self.labels, self.original_labels, self.provenance, self.split):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def train_ids(self) -> np.ndarray:
        return np.flatnonzero(self.split == "train")

    @property
    def test_ids(self) -> np.ndarray:
        return np.flatnonzero(self.split == "holdout_test")

    def ids_with(self, provenance: str) -> np.ndarray:
        return np.flatnonzero((self.provenance == provenance) & (self.split == "train"))

    def batch(self, ids, labels=None) -> Batch:
        ids = np.asarray(ids, dtype=np.int64)
        return Batch(self.inputs[ids], self.labels[ids] if labels is None else labels)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and self.seed == other.seed
            and self.inputs.tobytes() == other.inputs.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.original_labels, other.original_labels)
            and np.array_equal(self.provenance, other.provenance)
            and np.array_equal(self.split, other.split)
        )


@dataclass(frozen=True)
class UnlearnTask:
    forget_ids: np.ndarray
    retain_ids: np.ndarray

    def __post_init__(self):
        f = np.unique(np.asarray(self.forget_ids, dtype=np.int64))
        r = np.unique(np.asarray(self.retain_ids, dtype=np.int64))
        if len(f) != len(self.forget_ids) or len(r) != len(self.retain_ids):
            raise ValueError("duplicate ids in unlearning task")
        if np.intersect1d(f, r).size:
            raise ValueError("forget and retain sets overlap")
        object.__setattr__(self, "forget_ids", f)
        object.__setattr__(self, "retain_ids", r)

    @property
    def train_ids(self) -> np.ndarray:
        return np.union1d(self.forget_ids, self.retain_ids)

    @classmethod
    def from_forget(cls, forget_ids, pool) -> "UnlearnTask":
        forget_ids = np.asarray(forget_ids, dtype=np.int64)
        pool = np.asarray(pool, dtype=np.int64)
        if not np.isin(forget_ids, pool).all():
            raise ValueError("forget ids outside the training pool")
        return cls(forget_ids, np.setdiff1d(pool, forget_ids))


def _sample_split(rng, n, n_classes, means, sub_centers, atypical_fraction, std):
    labels = rng.permutation(np.arange(n) % n_classes)
    n_atyp = _round_half_up(atypical_fraction * n)
    atypical = np.zeros(n, dtype=bool)
    atypical[rng.choice(n, size=n_atyp, replace=False)] = True
    x = means[labels] + std * rng.standard_normal((n, means.shape[1]))
    if n_atyp:
        per_class = sub_centers.shape[1]
        which = rng.integers(0, per_class, size=n_atyp)
        centers = sub_centers[labels[atypical], which]
        x[atypical] = centers + std * rng.standard_normal((n_atyp, means.shape[1]))
    return x, labels, atypical


def make_dataset(n_classes=10, n_train=2000, n_test=1000, input_dim=20,
                 atypical_fraction=0.05, noise_fraction=0.1, seed=0,
                 separation=3.0, cluster_std=1.0) -> Dataset:
    """Gaussian class clusters plus rare off-cluster subpopulations.

    Each class owns one main cluster and ``ceil(10 a / (1 - a))`` atypical
    subpopulations centred ``3 * cluster_std`` away from the class mean (same
    spread as the main cluster), so every subpopulation is sampled at most a
    tenth as often as the main cluster. Exactly ``round(noise_fraction * n_train)``
    non-atypical train examples receive a label drawn uniformly from the other
    classes.
    """
    for name, frac in (("atypical_fraction", atypical_fraction), ("noise_fraction", noise_fraction)):
        if not 0.0 <= frac <= 0.5:
            raise ValueError(f"{name} must lie in [0, 0.5], got {frac}")
    if min(n_classes, n_train, n_test, input_dim) <= 0:
        raise ValueError("sizes must be positive")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    n_noisy = _round_half_up(noise_fraction * n_train)
    if n_noisy > n_train - _round_half_up(atypical_fraction * n_train):
        raise ValueError("not enough clean examples to flip")

    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, input_dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    n_sub = max(1, math.ceil(10 * atypical_fraction / (1 - atypical_fraction)))
    dirs = rng.standard_normal((n_classes, n_sub, input_dim))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    sub_centers = means[:, None, :] + 3.0 * cluster_std * dirs

    x_tr, y_tr, atyp_tr = _sample_split(rng, n_train, n_classes, means, sub_centers,
                                        atypical_fraction, cluster_std)
    x_te, y_te, atyp_te = _sample_split(rng, n_test, n_classes, means, sub_centers,
                                        atypical_fraction, cluster_std)

    prov_tr = np.where(atyp_tr, ATYPICAL, CLEAN).astype(object)
    presented = y_tr.copy()
    noisy = rng.choice(np.flatnonzero(~atyp_tr), size=n_noisy, replace=False)
    shift = rng.integers(1, n_classes, size=n_noisy)
    presented[noisy] = (y_tr[noisy] + shift) % n_classes
    prov_tr[noisy] = NOISY

    return Dataset(
        inputs=np.vstack([x_tr, x_te]),
        labels=np.concatenate([presented, y_te]),
        original_labels=np.concatenate([y_tr, y_te]),
        provenance=np.concatenate([prov_tr, np.where(atyp_te, ATYPICAL, CLEAN).astype(object)]),
        split=np.array(["train"] * n_train + ["holdout_test"] * n_test, dtype=object),
        n_classes=int(n_classes),
        seed=int(seed),
    )


def select_forget(scores, band_size: int, bands=("low", "medium", "high"), pool=None):
    """Forget set made of the lowest, median-centred and highest scoring bands.

    Scores are memorization-aligned first; ties go to the smaller example id.
    Undefined (NaN) scores never enter the forget set.
    """
    pool = scores.ids if pool is None else np.asarray(pool, dtype=np.int64)
    values = scores.alignment * scores.lookup(pool)
    defined = ~np.isnan(values)
    cand, vals = pool[defined], values[defined]
    n, N = len(cand), int(band_size)
    if N < 1:
        raise ValueError("band_size must be >= 1")
    if len(bands) * N > n:
        raise ValueError(f"need {len(bands) * N} scored examples, have {n}")
    order = cand[np.lexsort((cand, vals))]
    picks = []
    for band in bands:
        if band == "low":
            picks.append(order[:N])
        elif band == "high":
            picks.append(order[n - N:])
        elif band == "medium":
            start = n // 2 - N // 2
            picks.append(order[start:start + N])
        else:
            raise ValueError(f"unknown band {band!r}")
    forget = np.concatenate(picks)
    if len(np.unique(forget)) != len(forget):
        raise ValueError("score bands overlap; band_size too large for pool")
    return UnlearnTask.from_forget(forget, pool)


def write_dataset_csv(data: Dataset, path, preamble: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(preamble)
        fh.write(f"# n_classes={data.n_classes} seed={data.seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split", "label", "original_label", "provenance"]
                   + [f"x{j}" for j in range(data.input_dim)])
        for i in range(len(data)):
            w.writerow([i, data.split[i], int(data.labels[i]), int(data.original_labels[i]),
                        data.provenance[i]] + [repr(float(v)) for v in data.inputs[i]])


def read_dataset_csv(path) -> Dataset:
    meta = {}
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
            else:
                lines.append(line)
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    if header[:5] != ["id", "split", "label", "original_label", "provenance"]:
        raise ValueError(f"{path}: unexpected header {header[:5]}")
    if [int(r[0]) for r in body] != list(range(len(body))):
        raise ValueError(f"{path}: ids must be 0..n-1 in order")
    return Dataset(
        inputs=np.array([[float(v) for v in r[5:]] for r in body]),
        labels=np.array([int(r[2]) for r in body]),
        original_labels=np.array([int(r[3]) for r in body]),
        provenance=np.array([r[4] for r in body], dtype=object),
        split=np.array([r[1] for r in body], dtype=object),
        n_classes=int(meta["n_classes"]),
        seed=int(meta["seed"]),
    )
