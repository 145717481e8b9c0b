import numpy as np
import pytest

from anchorsense.channel import Waveform
from anchorsense.harness.config import load_scenario
from anchorsense.scene import (AnchorPoint, DynamicTarget, Position2D, Scene, StaticObject)

# lines reported by the acceptance tests, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scenario():
    return load_scenario()


@pytest.fixture
def small_waveform():
    return Waveform(n_subcarriers=32, n_symbols=16, n_tx=2, n_rx=4)


@pytest.fixture
def small_scene():
    return Scene(
        ue_position=Position2D(60.0, 40.0),
        ue_rotation_rho=np.deg2rad(20.0),
        anchors=(AnchorPoint(Position2D(0.0, 11.1)), AnchorPoint(Position2D(12.3, 3.8))),
        static_objects=(StaticObject(Position2D(-30.0, 50.0), 5.0),),
        dynamic_targets=(DynamicTarget(Position2D(45.1, 9.2), doppler=-650.0),),
    )
