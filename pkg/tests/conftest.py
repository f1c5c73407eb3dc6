import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from repeat.phantom import PhantomSpec, generate_phantom, respiratory_for_target
from repeat.volume_io import Geometry, ImageVolume, Kind

settings.register_profile("repeat", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repeat")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def oblique_geometry():
    c, s = np.cos(0.3), np.sin(0.3)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Geometry((7, 6, 5), (0.8, 1.25, 2.5), (-12.5, 3.0, 40.0), rot)


@pytest.fixture
def small_volume(rng):
    return ImageVolume.from_array(rng.normal(0.0, 100.0, (9, 8, 7)), spacing=(1.5, 2.0, 2.5),
                                  origin=(-5.0, 2.0, 10.0))


@pytest.fixture(scope="session")
def phantom96():
    """Default 96^3, 2 mm phantom and its liver mask."""
    return generate_phantom(PhantomSpec())


@pytest.fixture(scope="session")
def respiratory8(phantom96):
    return respiratory_for_target(phantom96[1], 8.0)


def box_mask(dims, lo, hi, spacing=(1.0, 1.0, 1.0)):
    data = np.zeros(dims)
    data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1.0
    return ImageVolume.from_array(data, spacing=spacing, kind=Kind.MASK)


# criterion number -> (name, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, name, passed, detail):
    ACCEPTANCE[number] = (name, bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {number}. {name}: {detail}")
