import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from denkf.simulator import SyntheticArmConfig, canonical_datasets  # noqa: E402
from denkf.training import TrainConfig, init_models, train  # noqa: E402

# Desk-scale training recipe shared by the slow tests. Paper defaults
# (lr 1e-5, E 32, init spread 0.1) stay the TrainConfig defaults; these
# overrides make 50 epochs on one CPU core converge within minutes.
DESK_TRAIN = dict(epochs=50, lr=1e-3, ensemble_size=16, batch_size=64, init_std=1.0, seed=0)
D1_SECONDS = 60.0
HOLDOUT_FRACTION = 0.2

ACCEPTANCE: dict = {}


def record(criterion: int, passed: bool, detail: str):
    """Register one acceptance outcome; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@dataclass
class TrainedFix:
    untrained: object
    models: object
    history: list
    train: object
    heldout: object


@pytest.fixture(scope="session")
def arm_cfg():
    return SyntheticArmConfig()


@pytest.fixture(scope="session")
def d1(arm_cfg):
    return canonical_datasets(arm_cfg, D1_SECONDS, 0, names=["D1"])[0]


@pytest.fixture(scope="session")
def trained_fix(d1):
    """Fix variant trained 50 epochs on the first 80% of synthetic D1 at 50 Hz."""
    cut = int(round(len(d1) * (1 - HOLDOUT_FRACTION)))
    tr, te = d1.slice(0, cut, "D1-train"), d1.slice(cut, len(d1), "D1-heldout")
    untrained = init_models("fix", [tr], seed=1)
    state = train(untrained, [tr], TrainConfig(**DESK_TRAIN))
    return TrainedFix(untrained, state.models, state.history, tr, te)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
