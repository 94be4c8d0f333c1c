import numpy as np
import pytest

from mos.backbone import BackboneConfig, build_backbone
from mos.numerics import make_rng

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_backbone():
    return build_backbone(BackboneConfig(8, 16, 16, 2, init_seed=7, init_scale=0.3))


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
