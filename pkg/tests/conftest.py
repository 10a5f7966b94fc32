import numpy as np
import pytest

from spectral_dps import physics
from spectral_dps.projector import Geometry


@pytest.fixture(scope="session")
def small_geom():
    return Geometry(image_size=16, n_views=24, n_det=24, det_pitch=0.8, pixel_size=0.8)


@pytest.fixture(scope="session")
def desk_geom():
    # n_views / 2 odd, so the two dual-kVp tubes never repeat an opposed ray
    return Geometry(image_size=32, n_views=122, n_det=48, det_pitch=1.0, pixel_size=0.8)


@pytest.fixture(params=["dual-kvp", "dual-layer"])
def kind(request):
    return request.param


def random_density(rng, n, lo=0.0, hi=1.0):
    return np.stack([rng.uniform(lo, hi, (n, n)), 0.3 * rng.uniform(lo, hi, (n, n))])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make(kind, geom, **kw):
    return physics.make_system(kind, geom.n_views, **kw)


# -- acceptance verdicts ----------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}
N_CRITERIA = 11


def record(number: int, title: str, passed: bool, detail: str = ""):
    ACCEPTANCE[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            title, ok, detail = ACCEPTANCE[n]
            tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
        else:
            tr.write_line(f"[FAIL] {n:2d}. no verdict (test errored, was skipped or deselected)")
