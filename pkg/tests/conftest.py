import numpy as np
import pytest

from headfield.headmodel import GeometrySpec, build_scene, make_grid, voxelate

# acceptance-criterion outcomes registered by tests/test_acceptance.py
ACCEPTANCE_RESULTS = []


def register_acceptance(number, description, passed, detail=""):
    ACCEPTANCE_RESULTS.append((number, description, bool(passed), detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, desc, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        line = f"[criterion {num}] {status} - {desc}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_scene():
    return build_scene(GeometrySpec())


@pytest.fixture(scope="session")
def smoke_grid(default_scene):
    return make_grid(default_scene.geometry, default_scene, "smoke")


@pytest.fixture(scope="session")
def smoke_model(default_scene, smoke_grid):
    return voxelate(default_scene, smoke_grid)
