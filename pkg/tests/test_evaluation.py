import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearn_lab.data import NOISY, UnlearnTask
from unlearn_lab.evaluation import (EvalReport, LinearMIA, MIAConfig, evaluate, gini, lorenz,
                                    mia_score, tow, tow_from_gaps, tow_mia, true_negative_rate)
from unlearn_lab.unlearn import retrain

from oracles import trapezoid_gini

nonneg = st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=1, max_size=40).filter(
    lambda xs: sum(xs) > 1e-6)


@pytest.fixture(scope="module")
def task(small_data):
    ids = small_data.train_ids
    return UnlearnTask.from_forget(ids[::8], ids)


def test_tow_hand_case():
    value = tow_from_gaps(0.10, 0.01, 0.02)
    assert value == pytest.approx(0.9 * 0.99 * 0.98, abs=1e-12)
    assert round(value, 3) == 0.873


def test_tow_mia_hand_case():
    assert tow_from_gaps(0.2, 0.0, 0.0) == pytest.approx(0.8, abs=1e-15)


def test_tow_of_model_with_itself(small_data, small_trained, task):
    assert tow(small_trained.model, small_trained.model, small_data, task) == 1.0
    cfg = MIAConfig(n_samples=50, seed=1)
    assert tow_mia(small_trained.model, small_trained.model, small_data, task, cfg) == 1.0


def test_tow_is_symmetric_and_bounded(small_data, small_trained, small_cfg, task):
    other, _ = retrain(small_data, task, small_cfg)
    a = tow(small_trained.model, other, small_data, task)
    b = tow(other, small_trained.model, small_data, task)
    assert a == b and 0 <= a <= 1


def test_true_negative_rate_extremes():
    assert true_negative_rate(np.zeros(7)) == 1.0
    assert true_negative_rate(np.ones(7)) == 0.0


def test_mia_rejects_single_class():
    with pytest.raises(ValueError, match="both classes"):
        LinearMIA().fit(np.zeros((4, 3)), np.ones(4))


def test_linear_mia_separates_shifted_features():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(2, 1, (200, 3)), rng.normal(-2, 1, (200, 3))])
    y = np.concatenate([np.ones(200), np.zeros(200)])
    clf = LinearMIA().fit(x, y)
    assert np.mean(clf.predict(x) == y) > 0.95


def test_mia_score_deterministic_and_bounded(small_data, small_trained, task):
    cfg = MIAConfig(n_samples=60, seed=3)
    a = mia_score(small_trained.model, small_data, task, cfg)
    assert a == mia_score(small_trained.model, small_data, task, cfg)
    assert 0.0 <= a <= 1.0


def test_retrained_model_sees_noisy_forget_set_as_held_out(default_runs):
    data, cfg, res = default_runs[0]
    task = UnlearnTask.from_forget(data.ids_with(NOISY), data.train_ids)
    oracle, _ = retrain(data, task, cfg)
    mcfg = MIAConfig(seed=0)
    m_r = mia_score(oracle, data, task, mcfg)
    m_o = mia_score(res.model, data, task, mcfg)
    assert m_r > 0.8
    # the original model only partly memorises the noisy rows, so its score sits well below
    assert m_r - m_o > 0.2


def test_evaluate_report_fields(small_data, small_trained, small_cfg, task):
    other, _ = retrain(small_data, task, small_cfg)
    rep = evaluate(small_trained.model, other, small_data, task, MIAConfig(n_samples=50),
                   wall_time_s=1.5)
    keys = set(json.loads(rep.to_json()))
    assert keys == {"acc_forget_u", "acc_retain_u", "acc_test_u", "acc_forget_r",
                    "acc_retain_r", "acc_test_r", "mia_u", "mia_r", "tow", "tow_mia",
                    "wall_time_s"}
    for k in keys - {"wall_time_s"}:
        assert 0.0 <= getattr(rep, k) <= 1.0
    expected = (1 - abs(rep.mia_u - rep.mia_r)) * (1 - abs(rep.acc_retain_u - rep.acc_retain_r)) \
        * (1 - abs(rep.acc_test_u - rep.acc_test_r))
    assert rep.tow_mia == pytest.approx(expected, abs=1e-15)
    assert isinstance(rep, EvalReport)


def test_empty_split_is_rejected(small_data, small_trained):
    bad = UnlearnTask(np.array([], dtype=np.int64), small_data.train_ids)
    with pytest.raises(ValueError, match="forget split is empty"):
        tow(small_trained.model, small_trained.model, small_data, bad)


def test_gini_hand_values():
    assert gini([0, 0, 0, 1]) == pytest.approx(0.75, abs=1e-12)
    assert gini([3, 3, 3]) == pytest.approx(0.0, abs=1e-15)
    assert gini([5.0]) == 0.0
    # negatives are clamped to zero
    assert gini([-4, 0, 0, 1]) == pytest.approx(0.75, abs=1e-12)


@pytest.mark.parametrize("bad", [[0, 0], [], [1.0, np.nan]])
def test_gini_rejects_degenerate_input(bad):
    with pytest.raises(ValueError):
        gini(bad)


@settings(max_examples=100, deadline=None)
@given(nonneg, st.floats(1e-3, 1e3))
def test_gini_is_scale_invariant_and_bounded(xs, c):
    g = gini(xs)
    assert 0.0 <= g <= 1.0
    assert gini(np.asarray(xs) * c) == pytest.approx(g, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(nonneg)
def test_gini_matches_lorenz_area(xs):
    assert gini(xs) == pytest.approx(trapezoid_gini(xs), abs=1e-9)
    curve = lorenz(xs)
    area = np.sum((curve[1:, 0] - curve[:-1, 0]) * (curve[1:, 1] + curve[:-1, 1]) / 2)
    assert gini(xs) == pytest.approx(2 * (0.5 - area), abs=1e-9)


def test_lorenz_shape():
    c = lorenz([0, 0, 0, 1])
    np.testing.assert_array_equal(c[0], [0, 0])
    np.testing.assert_array_equal(c[-1], [1, 1])
    assert [0.75, 0.0] in c.tolist()
    eq = lorenz([2, 2, 2, 2])
    np.testing.assert_allclose(eq[:, 1], eq[:, 0], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(nonneg)
def test_lorenz_monotone_and_convex(xs):
    c = lorenz(xs)
    assert np.all(np.diff(c[:, 1]) >= -1e-15)
    slopes = np.diff(c[:, 1]) / np.diff(c[:, 0])
    assert np.all(np.diff(slopes) >= -1e-9)
    assert np.all(c[:, 1] <= c[:, 0] + 1e-12)
