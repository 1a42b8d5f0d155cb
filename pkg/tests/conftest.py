"""Shared fixtures, the ``--runslow`` switch and the acceptance summary."""

from __future__ import annotations

import numpy as np
import pytest

from mskpinn import data as dat
from mskpinn import default_limb_model, default_muscle_set
from mskpinn import train as tr

_CRITERIA: dict[int, list[str]] = {}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="also run the full-profile end-to-end tests (tens of minutes)")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-profile runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="full-profile run; use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        for line in _CRITERIA[number]:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def record_criterion():
    """``record(number, title, passed, detail)`` prints one PASS/FAIL line and keeps it for the summary."""

    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}"
        if detail:
            line += f" | {detail}"
        print(line)
        _CRITERIA.setdefault(number, []).append(line)
        return passed

    return record


@pytest.fixture(scope="session")
def limb():
    return default_limb_model()


@pytest.fixture(scope="session")
def muscles():
    return default_muscle_set()


@pytest.fixture(scope="session")
def smoke_trials(limb, muscles):
    """Three SO-labelled synthetic gait cycles (the smoke profile's data)."""
    return tr.synthetic_trials(limb, muscles, tr.PROFILES["smoke"]["cycles"], seed=0)


@pytest.fixture(scope="session")
def smoke_prepared(limb, muscles, smoke_trials):
    return [tr.prepare_trial(limb, muscles, t) for t in smoke_trials]


def clip_trial(trial: tr.Trial, n_frames: int, start: int = 0) -> tr.Trial:
    """The first ``n_frames`` frames (from ``start``) of a trial, labels included."""
    sl = slice(start, start + n_frames)
    tj = trial.trajectory
    traj = dat.JointTrajectory(tj.time[sl], tj.q[sl], tj.qdot[sl], tj.qddot[sl], tj.force_plate[sl],
                               tj.cop_plate[sl], tj.contact[sl], dict(tj.metadata))
    take = lambda a: None if a is None else np.asarray(a)[sl]  # noqa: E731
    return tr.Trial(traj, take(trial.activations), take(trial.forces), f"{trial.name}_clip{start}")


@pytest.fixture(scope="session")
def tiny_prepared(limb, muscles, smoke_trials):
    """Two short labelled trials (40 frames, 11 windows each) for fast training tests."""
    clips = [clip_trial(smoke_trials[0], 40, 0), clip_trial(smoke_trials[1], 40, 100)]
    return [tr.prepare_trial(limb, muscles, t) for t in clips]


@pytest.fixture(scope="session")
def mini_train_config():
    """A network small enough to train for hundreds of epochs in seconds."""
    return tr.TrainConfig(epochs=4, batch_size=8, d_joint=4, n_heads=2, d_integrated=4, d_gru=3,
                          gru_layers=2, head_hidden=(5,), checkpoint_every=2, seed=3)
