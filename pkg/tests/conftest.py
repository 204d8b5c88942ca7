import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flametomo.fields import PhantomConfig, make_phantom
from flametomo.geometry import GridGeometry, default_cameras
from flametomo.render import LineByLineKappa, Scene
from flametomo.spectra import WavenumberGrid, load_line_database

settings.register_profile("flametomo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("flametomo")

SPECIES = ("CO2", "H2O", "CH4")


@pytest.fixture(scope="session")
def db():
    return load_line_database()


@pytest.fixture(scope="session")
def unit_geom():
    return GridGeometry((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0), (4, 4, 4))


@pytest.fixture(scope="session")
def small_grid():
    return WavenumberGrid(660.0, 679.0, 1.0)


@pytest.fixture(scope="session")
def small_scene(db, unit_geom, small_grid):
    """4^3 grid, one 2x2 camera, 20 line-by-line points, exact absorption."""
    cams = default_cameras(unit_geom, 2)[:1]
    return Scene.build(unit_geom, cams, small_grid, db, SPECIES, resolution=4.0,
                       kappa_model=LineByLineKappa(db, small_grid, SPECIES))


@pytest.fixture(scope="session")
def small_truth(unit_geom):
    return make_phantom(PhantomConfig(), unit_geom)


def random_interior_field(geom, seed=0, n_species=3):
    """Temperatures and fractions well inside the squashing bounds."""
    rng = np.random.default_rng(seed)
    T = rng.uniform(900.0, 1800.0, geom.n_cells)
    X = rng.uniform(0.02, 0.2, (geom.n_cells, n_species))
    return T, X
