import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sim2radar.presets import ifr_preset  # noqa: E402

import report  # noqa: E402


@pytest.fixture
def ifr_config():
    return ifr_preset(elevation_resolution_deg=2.0, elevation_fov_deg=40.0)


def pytest_terminal_summary(terminalreporter):
    if report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(report.LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
