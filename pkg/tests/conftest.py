import numpy as np
import pytest

from fesurrogate import fesolver as fe
from fesurrogate.geometry import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(PhantomSpec())


@pytest.fixture(scope="session")
def small_phantom():
    spec = PhantomSpec(grid_resolution=(5, 5, 5), gland_radii=(0.032, 0.03, 0.028),
                       cz_radii=(0.018, 0.016, 0.016), gland_center=(0.04, 0.04, 0.04),
                       bone_offset=0.08)
    return generate_phantom(spec)


@pytest.fixture(scope="session")
def small_dataset(small_phantom):
    samples, stats = fe.generate_dataset(small_phantom, 6, fe.MaterialRanges(), 0.004,
                                         seed=3, workers=1)
    return samples, stats


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(LINES):
            terminalreporter.write_line(LINES[k])
