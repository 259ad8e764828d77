import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearn_lab.data import Dataset, make_dataset
from unlearn_lab.memorization import (MemConfig, aggregate, estimate_memorization, exact_loo,
                                      model_seed)
from unlearn_lab.trainer import TrainConfig


def _runs(in_correct, out_correct):
    """Runs for a single example: given in-subset and out-of-subset outcomes."""
    runs = []
    for k, c in enumerate(in_correct):
        runs.append((k, np.array([True]), np.array([bool(c)])))
    for k, c in enumerate(out_correct, start=len(in_correct)):
        runs.append((k, np.array([False]), np.array([bool(c)])))
    return runs


def test_always_correct_scores_zero():
    score, _, _ = aggregate(_runs([1] * 5, [1] * 5), 1)
    assert score[0] == 0.0


def test_in_point_nine_out_point_one():
    score, n_in, n_out = aggregate(_runs([1] * 9 + [0], [1] + [0] * 9), 1)
    assert score[0] == pytest.approx(0.8, abs=1e-15)
    assert (n_in[0], n_out[0]) == (10, 10)


def test_never_held_out_is_undefined():
    score, _, _ = aggregate(_runs([1, 1, 0], []), 1)
    assert np.isnan(score[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_aggregate_ignores_completion_order(seed):
    rng = np.random.default_rng(seed)
    n = 7
    runs = [(k, rng.random(n) < 0.7, rng.random(n) < 0.5) for k in range(12)]
    a, _, _ = aggregate(runs, n)
    order = rng.permutation(len(runs))
    b, _, _ = aggregate([runs[i] for i in order], n)
    np.testing.assert_array_equal(a, b)
    ok = ~np.isnan(a)
    assert np.all((a[ok] >= -1) & (a[ok] <= 1))


def test_mem_config_validation():
    with pytest.raises(ValueError):
        MemConfig(n_models=1)
    with pytest.raises(ValueError):
        MemConfig(subset_fraction=1.0)


def test_model_seeds_differ():
    seeds = {model_seed(0, k) for k in range(50)}
    assert len(seeds) == 50


def test_estimator_jobs_invariant_and_bounded(small_data):
    cfg = TrainConfig(epochs=4, batch_size=32, hidden=(8,))
    mem = MemConfig(n_models=6, seed=2)
    a = estimate_memorization(small_data, cfg, mem, n_jobs=1)
    b = estimate_memorization(small_data, cfg, mem, n_jobs=2)
    np.testing.assert_array_equal(a.scores, b.scores)
    ok = ~np.isnan(a.scores)
    assert np.all((a.scores[ok] >= -1) & (a.scores[ok] <= 1))
    np.testing.assert_array_equal(a.ids, small_data.train_ids)
    assert a.meta == {"T": 6, "p": 0.7, "seed": 2}
    assert a.wall_time > 0


def test_exact_loo_guards(small_data):
    with pytest.raises(ValueError, match="limited"):
        exact_loo(small_data, TrainConfig(), n_seeds=10)
    tiny = make_dataset(n_classes=2, n_train=10, n_test=4, input_dim=2, seed=0)
    with pytest.raises(ValueError, match="at least 10"):
        exact_loo(tiny, TrainConfig(), n_seeds=5)


def _duplicated(seed=0):
    """12 distinct training points each present twice (some with flipped labels)."""
    base = make_dataset(n_classes=3, n_train=12, n_test=6, input_dim=4, atypical_fraction=0.0,
                        noise_fraction=0.25, seed=seed)
    tr, te = base.train_ids, base.test_ids
    order = np.concatenate([tr, tr, te])
    return Dataset(
        inputs=base.inputs[order].copy(), labels=base.labels[order].copy(),
        original_labels=base.original_labels[order].copy(),
        provenance=base.provenance[order].copy(),
        split=np.array(["train"] * 24 + ["holdout_test"] * 6, dtype=object),
        n_classes=3, seed=seed,
    )


def test_exact_loo_duplicates_have_small_scores():
    d = _duplicated()
    cfg = TrainConfig(epochs=20, batch_size=8, hidden=(16,))
    loo = exact_loo(d, cfg, n_seeds=10, seed=0)
    assert np.all(np.abs(loo.scores) <= 0.2)


def test_exact_loo_easy_examples_score_zero():
    d = make_dataset(n_classes=2, n_train=16, n_test=4, input_dim=3, atypical_fraction=0.0,
                     noise_fraction=0.0, separation=8.0, cluster_std=0.3, seed=1)
    loo = exact_loo(d, TrainConfig(epochs=20, batch_size=8, hidden=(8,)), n_seeds=10)
    np.testing.assert_array_equal(loo.scores, 0.0)
