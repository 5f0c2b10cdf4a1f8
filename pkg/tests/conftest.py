"""Shared fixtures and the --runslow switch."""

import pytest
import structlog

from marginmatch.config import build_config


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run desk-scale training experiments"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


SMALL_RUN = [
    "data.unlabeled_count=120",
    "data.test_count=60",
    "data.per_class_labeled=3",
    "data.threshold_min_count=6",
    "data.feature_dim=4",
    "model.hidden_widths=[8]",
    "batch_size=4",
    "nu=3",
    "total_steps=40",
    "outputs.decision_log_interval=1",
]


@pytest.fixture(autouse=True)
def reset_logging():
    """The CLI binds structlog to the runner's stderr; undo that after each test."""
    yield
    structlog.reset_defaults()


@pytest.fixture
def small_config(tmp_path):
    """A run small enough to train in well under a second."""

    def make(*overrides):
        return build_config({}, [*SMALL_RUN, f"outputs.directory={tmp_path / 'run'}", *overrides])

    return make
