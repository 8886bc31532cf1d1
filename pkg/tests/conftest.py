import dataclasses

import pytest

from recon3dpx.network import NetworkConfig
from recon3dpx.phantom import DatasetSpec, build_dataset
from recon3dpx.train import TrainConfig, train

OVERFIT_LR = 3e-3
OVERFIT_STEPS = 300

_criteria: list[str] = []


@pytest.fixture
def report(capsys):
    """Print one acceptance line straight to the terminal and remember it."""

    def emit(number: int, ok: bool, text: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {text}"
        _criteria.append(line)
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 subjects x 1 pose: 2 train, 1 val, 1 test sample."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    build_dataset(root, DatasetSpec(n_subjects=4, seed=11, angle_classes=((0.0, 0.0),), split_fractions=(0.5, 0.25, 0.25)))
    return root


@pytest.fixture(scope="session")
def overfit_dataset(tmp_path_factory):
    """4 training samples (distinct subjects, neutral pose), no val/test."""
    root = tmp_path_factory.mktemp("overfit") / "data"
    build_dataset(root, DatasetSpec(n_subjects=4, seed=0, angle_classes=((0.0, 0.0),), split_fractions=(1.0, 0.0, 0.0)))
    return root


def overfit_config(dataset) -> TrainConfig:
    return TrainConfig(
        dataset=str(dataset),
        network=NetworkConfig(),
        lr=OVERFIT_LR,
        batch_size=2,
        epochs=OVERFIT_STEPS // 2,
        max_steps=OVERFIT_STEPS,
        eval_every=OVERFIT_STEPS // 2,
        checkpoint_every=OVERFIT_STEPS // 2,
        seed=0,
    )


@pytest.fixture(scope="session")
def overfit_runs(tmp_path_factory, overfit_dataset):
    """Two identical 300-step runs; returns [(last_ckpt, record, seconds), ...]."""
    import time

    cfg = overfit_config(overfit_dataset)
    runs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(f"overfit_{name}")
        start = time.perf_counter()
        ckpt, record = train(cfg, out)
        runs.append((ckpt, record, time.perf_counter() - start))
    return runs


def short_config(dataset, **changes) -> TrainConfig:
    base = TrainConfig(dataset=str(dataset), lr=1e-3, batch_size=2, epochs=2, seed=0)
    return dataclasses.replace(base, **changes)
