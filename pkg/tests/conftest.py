import time

import numpy as np
import pytest

from bimanip.certificate import compute_certificate, placement_grids
from bimanip.scene import load_scene

# acceptance verdicts, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
# wall time spent building the shared placement grids, per scene
GRID_SECONDS: dict[str, float] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def box():
    return load_scene("box")


@pytest.fixture(scope="session")
def lshape():
    return load_scene("lshape")


@pytest.fixture(scope="session")
def box_grids(box):
    t = time.monotonic()
    g = placement_grids(box)
    GRID_SECONDS["box"] = time.monotonic() - t
    return g


@pytest.fixture(scope="session")
def box_cert(box, box_grids):
    return compute_certificate(box, 0, grids=box_grids)


@pytest.fixture(scope="session")
def lshape_grids(lshape):
    t = time.monotonic()
    g = placement_grids(lshape)
    GRID_SECONDS["lshape"] = time.monotonic() - t
    return g
