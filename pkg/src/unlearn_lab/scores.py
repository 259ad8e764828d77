"""Per-example score tables shared by the memorization estimator and proxies."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

# +1: larger value = more memorized; -1: larger value = less memorized
ALIGNMENT = {
    "memorization": 1,
    "holdout_retraining": 1,
    "loss_curvature": 1,
    "confidence": -1,
    "max_confidence": -1,
    "entropy": -1,
    "binary_accuracy": -1,
}

PROXY_KINDS = tuple(k for k in ALIGNMENT if k != "memorization")


@dataclass
class ScoreTable:
    """Scores keyed by example id; NaN marks an undefined score."""

    ids: np.ndarray
    scores: np.ndarray
    kind: str
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ALIGNMENT:
            raise ValueError(f"unknown score kind {self.kind!r}")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.ids.shape != self.scores.shape or self.ids.ndim != 1:
            raise ValueError("ids and scores must be 1-D arrays of equal length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate example ids in score table")

    @property
    def alignment(self) -> int:
        return ALIGNMENT[self.kind]

    @property
    def undefined_ids(self) -> np.ndarray:
        return self.ids[np.isnan(self.scores)]

    def aligned(self) -> np.ndarray:
        """Scores flipped so that larger always means more memorized."""
        return self.alignment * self.scores

    def as_dict(self) -> dict[int, float]:
        return {int(i): float(s) for i, s in zip(self.ids, self.scores)}

    def lookup(self, ids) -> np.ndarray:
        order = np.argsort(self.ids)
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, ids, sorter=order)
        pos = np.minimum(pos, len(order) - 1)
        found = self.ids[order[pos]] == ids
        if not found.all():
            raise KeyError(f"ids missing from {self.kind} table: {ids[~found][:5].tolist()}")
        return self.scores[order[pos]]

    def subset(self, ids) -> "ScoreTable":
        ids = np.asarray(ids, dtype=np.int64)
        return ScoreTable(ids, self.lookup(ids), self.kind, self.wall_time, dict(self.meta))


def write_score_csv(table: ScoreTable, path, preamble: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if preamble:
            fh.write(preamble)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "kind", "score", "alignment"])
        for i, s in zip(table.ids, table.scores):
            w.writerow([int(i), table.kind, "nan" if np.isnan(s) else repr(float(s)), table.alignment])


def read_score_csv(path) -> ScoreTable:
    ids, scores, kinds = [], [], set()
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in rows:
            ids.append(int(row["example_id"]))
            scores.append(float(row["score"]))
            kinds.add(row["kind"])
    if len(kinds) != 1:
        raise ValueError(f"{path}: expected a single score kind, found {sorted(kinds)}")
    return ScoreTable(np.array(ids), np.array(scores), kinds.pop())


def sidecar(table: ScoreTable, **extra) -> str:
    payload = {"kind": table.kind, "undefined_ids": table.undefined_ids.tolist()}
    payload.update(table.meta)
    payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
