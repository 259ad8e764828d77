import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from unlearn_lab.data import make_dataset  # noqa: E402
from unlearn_lab.trainer import TrainConfig, fresh_model, train  # noqa: E402


@pytest.fixture(scope="session")
def small_data():
    return make_dataset(n_classes=4, n_train=240, n_test=120, input_dim=6,
                        atypical_fraction=0.05, noise_fraction=0.1, seed=3)


@pytest.fixture(scope="session")
def small_cfg():
    return TrainConfig(epochs=8, batch_size=32, base_lr=0.05, hidden=(16,), seed=1)


@pytest.fixture(scope="session")
def small_trained(small_data, small_cfg):
    return train(fresh_model(small_data, small_cfg), small_data, small_data.train_ids, small_cfg,
                 checkpoint_every=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPT_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def default_runs():
    """Default dataset and fully trained model for each evaluation seed."""
    from unlearn_lab.proxies import checkpoint_interval

    runs = {}
    for seed in ACCEPT_SEEDS:
        data = make_dataset(seed=seed)
        cfg = TrainConfig(seed=seed)
        res = train(fresh_model(data, cfg), data, data.train_ids, cfg,
                    checkpoint_every=checkpoint_interval(cfg.epochs))
        runs[seed] = (data, cfg, res)
    return runs


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
