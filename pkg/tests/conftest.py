import numpy as np
import pytest

from picar.mesh import adjacency, build_mesh


@pytest.fixture(scope="session")
def unit_mesh():
    """Mesh over 300 uniform points, about 500 vertices."""
    rng = np.random.default_rng(11)
    locs = rng.uniform(size=(300, 2))
    return locs, build_mesh(locs, 500, 0.1, seed=3)


@pytest.fixture(scope="session")
def unit_adjacency(unit_mesh):
    return adjacency(unit_mesh[1])


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")
    config._criteria_lines = []


@pytest.fixture
def record_criterion(request):
    """Print and keep one ``PASS``/``FAIL`` line per acceptance criterion."""

    def record(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
        request.config._criteria_lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
