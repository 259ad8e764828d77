"""RUM^F: memorization-ordered sequential unlearning, with vanilla and
shuffle controls and the multi-step stability experiment."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import UnlearnTask, select_forget
from .evaluation import EvalReport, MIAConfig, evaluate, gini
from .proxies import CurvatureConfig, HoldoutConfig, proxy_table
from .trainer import TrainConfig
from .unlearn import UnlearnConfig, retrain, unlearn

APPROACHES = ("rum_f", "vanilla", "shuffle")


@dataclass
class RumPlan:
    partition: list
    algorithm: UnlearnConfig

    @property
    def K(self) -> int:
        return len(self.partition)

    def __post_init__(self):
        self.partition = [np.asarray(p, dtype=np.int64) for p in self.partition]
        if not self.partition:
            raise ValueError("plan needs at least one subset")
        flat = np.concatenate(self.partition)
        if len(np.unique(flat)) != len(flat):
            raise ValueError("plan subsets overlap")


@dataclass
class StepRecord:
    step: int
    forget_ids: np.ndarray
    retain_size: int
    wall_time: float


@dataclass
class RumResult:
    model: object
    steps: list
    wall_time: float


def ids_digest(ids) -> str:
    ids = np.sort(np.asarray(ids, dtype=np.int64))
    return hashlib.sha256(ids.astype("<i8").tobytes()).hexdigest()[:16]


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), 23, int(step)]).generate_state(1)[0])


def _split_even(ordered, k):
    return [chunk.copy() for chunk in np.array_split(np.asarray(ordered, dtype=np.int64), k)]


def refine(scores, task: UnlearnTask, K: int) -> list:
    """Order the forget set from least to most memorized and cut it into K
    contiguous chunks whose sizes differ by at most one."""
    if K < 1:
        raise ValueError("K must be >= 1")
    forget = task.forget_ids
    if K > len(forget):
        raise ValueError("K exceeds the forget-set size")
    values = scores.alignment * scores.lookup(forget)
    if np.isnan(values).any():
        raise ValueError("forget set contains examples with undefined scores")
    order = forget[np.lexsort((forget, values))]
    return _split_even(order, K)


def random_partition(task: UnlearnTask, K: int, seed: int) -> list:
    if K < 2:
        raise ValueError("shuffle control needs K >= 2")
    rng = np.random.default_rng([int(seed), 29])
    return _split_even(rng.permutation(task.forget_ids), K)


def rum_f(model, data, task: UnlearnTask, plan: RumPlan, train_cfg=None) -> RumResult:
    """Unlearn the plan's subsets in order.

    Step i forgets subset i while retaining D_r plus every later subset.
    """
    t0 = time.perf_counter()
    if not np.array_equal(np.sort(np.concatenate(plan.partition)), task.forget_ids):
        raise ValueError("plan does not cover the forget set")
    steps = []
    for i, subset in enumerate(plan.partition):
        later = plan.partition[i + 1:]
        retain = np.union1d(task.retain_ids, np.concatenate(later)) if later else task.retain_ids
        step_task = UnlearnTask(subset, retain)
        cfg = plan.algorithm.with_seed(step_seed(plan.algorithm.seed, i))
        model, seconds = unlearn(model, data, step_task, cfg, train_cfg)
        steps.append(StepRecord(i + 1, subset, len(retain), seconds))
    return RumResult(model, steps, time.perf_counter() - t0)


def vanilla(model, data, task: UnlearnTask, cfg: UnlearnConfig, train_cfg=None) -> RumResult:
    """The whole forget set in one step."""
    return rum_f(model, data, task, RumPlan([task.forget_ids], cfg), train_cfg)


def shuffle_control(model, data, task: UnlearnTask, cfg: UnlearnConfig, K: int = 3,
                    seed: int = 0, train_cfg=None) -> RumResult:
    """Sequential unlearning over a seeded random equal-size partition."""
    return rum_f(model, data, task, RumPlan(random_partition(task, K, seed), cfg), train_cfg)


def run_approach(approach: str, model, data, task, cfg: UnlearnConfig, scores=None, K: int = 3,
                 seed: int = 0, train_cfg=None) -> RumResult:
    if approach == "vanilla":
        return vanilla(model, data, task, cfg, train_cfg)
    if approach == "rum_f":
        return rum_f(model, data, task, RumPlan(refine(scores, task, K), cfg), train_cfg)
    if approach == "shuffle":
        return shuffle_control(model, data, task, cfg, K, seed, train_cfg)
    raise ValueError(f"unknown approach {approach!r}")


@dataclass(frozen=True)
class SequentialConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    mia: MIAConfig = field(default_factory=MIAConfig)
    K: int = 3
    tracks: tuple = ("rum_f", "vanilla")
    proxy_seed: int = 0
    holdout: HoldoutConfig | None = None
    curvature: CurvatureConfig | None = None


@dataclass
class SequentialStep:
    step: int
    approach: str
    report: EvalReport
    gini_before: float
    gini_after: float
    forget_ids: np.ndarray

    def record(self) -> dict:
        return {
            "step": self.step,
            "approach": self.approach,
            "tow": self.report.tow,
            "tow_mia": self.report.tow_mia,
            "gini": self.gini_after,
            "wall_time_s": self.report.wall_time_s,
            "forget_ids_digest": ids_digest(self.forget_ids),
        }


def sequential_seed(seed: int, step: int) -> int:
    """Step 1 keeps the base seed so a one-step run matches the single-shot one."""
    return int(seed) if step == 1 else step_seed(seed, step)


def sequential_stability(data, model, proxy_kind: str, cfg: SequentialConfig, n_steps: int,
                         band_size: int, initial=None) -> dict:
    """Repeated select -> unlearn -> evaluate -> remove cycles per track.

    Returns ``{"steps": {track: [SequentialStep]}, "gini": {track: [g0, ..., g_n]}}``.
    Proxies are recomputed on each track's current model and remaining pool
    before every step and once after the last one. ``initial`` may supply
    the step-0 score table.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    pool = data.train_ids
    if 3 * band_size * n_steps > len(pool):
        raise ValueError(
            f"{n_steps} steps of 3 x {band_size} examples exhaust the {len(pool)}-example pool")
    if initial is None:
        initial = proxy_table(proxy_kind, data, cfg.train, model=model, train_ids=pool,
                              seed=cfg.proxy_seed, holdout_cfg=cfg.holdout,
                              curvature_cfg=cfg.curvature)
    elif initial.kind != proxy_kind:
        raise ValueError(f"initial table is {initial.kind}, expected {proxy_kind}")
    g0 = gini(initial.scores)
    steps, ginis = {}, {}
    for track in cfg.tracks:
        current, scores, working = model, initial, pool
        steps[track], ginis[track] = [], [g0]
        for step in range(1, n_steps + 1):
            task = select_forget(scores, band_size, pool=working)
            useed = sequential_seed(cfg.unlearn.seed, step)
            result = run_approach(track, current, data, task, cfg.unlearn.with_seed(useed),
                                  scores=scores, K=cfg.K, seed=useed, train_cfg=cfg.train)
            oracle, _ = retrain(data, task, cfg.train)
            report = evaluate(result.model, oracle, data, task, cfg.mia,
                              wall_time_s=result.wall_time)
            current, working = result.model, task.retain_ids
            scores = proxy_table(proxy_kind, data, cfg.train, model=current, train_ids=working,
                                 seed=step_seed(cfg.proxy_seed, step), holdout_cfg=cfg.holdout,
                                 curvature_cfg=cfg.curvature)
            ginis[track].append(gini(scores.scores))
            steps[track].append(SequentialStep(step, track, report, ginis[track][-2],
                                               ginis[track][-1], task.forget_ids))
    return {"steps": steps, "gini": ginis}


def non_increasing(series) -> bool:
    return all(b <= a for a, b in zip(series, series[1:]))
