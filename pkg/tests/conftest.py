import numpy as np
import pytest

from beamkit.spatial import default_geometry, direction_grid, elevated_source
from beamkit.steering import synthesize_sphere_hrtf_set

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def geom():
    return default_geometry()


@pytest.fixture(scope="session")
def sphere_sets(geom):
    """Rigid-sphere sets at 1.1 m and 2 m horizontal distance, sources 0.73 m above the head."""
    sets = {}
    for d in (1.1, 2.0):
        src = elevated_source(90.0, d)
        dirs = direction_grid(5.0, src.direction.elevation_polar_deg, (0.0, 355.0))
        sets[d] = synthesize_sphere_hrtf_set(geom, 0.06, src.distance_m, dirs)
    return sets


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def design_specs(sphere_sets):
    """HRTF-based and free-field designs over the frontal half plane, looking at the target (broadside)."""
    from beamkit.design import DesignSpec, FrequencyGrid
    from beamkit.steering import FreeField

    hs = sphere_sets[1.1]
    look = hs.directions[hs.index_of(elevated_source(90.0, 1.1).direction)]
    dirs = tuple(d for d in hs.directions if d.azimuth_deg <= 180.0)
    grid = FrequencyGrid.uniform()
    return {
        "hrtf": DesignSpec(grid, dirs, look, -10.0, 1024, hs),
        "freefield": DesignSpec(grid, dirs, look, -10.0, 1024, FreeField()),
    }


@pytest.fixture(scope="session")
def hrtf_beamformer(design_specs, geom):
    from beamkit.design import design_fir

    return design_fir(design_specs["hrtf"], geom)[0]
