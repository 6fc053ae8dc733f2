import pytest

from pianofinger.keyboard import KeyboardGeometry
from pianofinger.simulator import SimConfig, default_geometry, generate_piece, render_pose_stream


@pytest.fixture(scope="session")
def geometry():
    return default_geometry()


@pytest.fixture(scope="session")
def synthetic_geometry():
    # 900x300 frame, keyboard occupying rows 100-200 and columns 50-850
    return KeyboardGeometry.from_band(50, 850, 100, 200, 900, 300)


@pytest.fixture(scope="session")
def clean_piece(geometry):
    piece = generate_piece(SimConfig(seed=3, n_notes=120), geometry)
    return piece, render_pose_stream(piece, geometry)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
