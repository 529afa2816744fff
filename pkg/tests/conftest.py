from __future__ import annotations

import numpy as np
import pytest

from ssmcfar.datagen import SceneConfig, generate
from ssmcfar.model import DetectorConfig, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    return generate(SceneConfig(grid=(16, 8), clutter="mixed", seed=3), 12, counts=(8, 2, 2))


@pytest.fixture
def tiny_model():
    return init_model(DetectorConfig(L=32, N=4, H=2, seed=1))


# Acceptance checks append "criterion N: PASS/FAIL ..." lines here; they are
# printed together at the end of the run so they survive output capture.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, label: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number} [{label}]: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
