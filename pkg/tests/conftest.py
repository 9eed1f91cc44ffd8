import csv
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

TESTS = Path(__file__).parent
sys.path.insert(0, str(TESTS))  # for the oracles module

TOY = TESTS / "data" / "toy"
TOY_REAL, TOY_FAKE = TOY / "real", TOY / "fake"
TOY_STEPS = 200


@dataclass
class ToyRun:
    checkpoint: Path
    log: Path
    seconds: float
    losses: list


def train_toy(out_dir) -> ToyRun:
    """The reference overfit run: 16 + 16 toy images, 200 steps, seed 0, default training settings."""
    from glff.model import GLFFConfig
    from glff.training import TrainConfig, train

    out = Path(out_dir) / "toy.pt"
    t0 = time.perf_counter()
    train(TOY_REAL, TOY_FAKE, TrainConfig(max_steps=TOY_STEPS, seed=0), out, GLFFConfig.toy())
    seconds = time.perf_counter() - t0
    log = out.with_name(out.name + ".log.csv")
    with open(log, newline="") as f:
        losses = [float(row["loss"]) for row in csv.DictReader(f)]
    return ToyRun(out, log, seconds, losses)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> ToyRun:
    return train_toy(tmp_path_factory.mktemp("toy_run"))


@pytest.fixture(scope="session")
def toy_model(toy_run):
    from glff.model import load_checkpoint

    model, _ = load_checkpoint(toy_run.checkpoint)
    return model


@pytest.fixture(scope="session")
def toy_fakes():
    from glff.imaging import list_images, load_image

    return [load_image(p) for p in list_images(TOY_FAKE)]


# one line per acceptance criterion, filled in by tests/test_acceptance.py
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, name, detail = CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {name}: {detail}")
