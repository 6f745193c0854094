import numpy as np
import pytest

from gimotion.grid import GridGeometry
from gimotion.phantom import DoseBlob, PhantomSpec, TubeSpec, make_phantom

ACCEPTANCE_LINES: list[str] = []


def small_tube_spec(**kw) -> PhantomSpec:
    """A short round-capped tube along x on a 40x32x32 grid (1.5 mm voxels)."""
    tube = TubeSpec("gut", 1, "line", {"start": [14.0, 24.0, 24.0], "end": [44.0, 24.0, 24.0]},
                    radius=8.0, caps="round")
    base = dict(dims=(40, 32, 32), spacing=(1.5, 1.5, 1.5), organs=(tube,), texture_amplitude=0.1,
                texture_sigma_mm=4.0, dose=(DoseBlob((30.0, 24.0, 24.0), 8.0, 20.0),), seed=3)
    base.update(kw)
    return PhantomSpec(**base)


@pytest.fixture(scope="session")
def small_tube():
    return make_phantom(small_tube_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def geo16():
    return GridGeometry((16, 14, 12), (1.0, 1.5, 2.0), (-3.0, 2.0, 5.0))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
