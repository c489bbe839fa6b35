import os
import sys

SCRIPTS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "scripts")
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from pwe_solver import Material, NormStats, PweConfig, RssVolume  # noqa: E402
from tunnel_geometry import COARSE_MESH_FACTOR, GridSpec, make_cross_section  # noqa: E402


@pytest.fixture
def small_config():
    return PweConfig(
        frequency=2.4e9,
        section=make_cross_section("rectangular"),
        material=Material(eps_r=5.0, sigma=0.01),
        tx=(0.0, 2.0),
        length=5.0,
        mesh_factor=COARSE_MESH_FACTOR,
    )


@pytest.fixture
def synthetic_volume(small_config):
    """Small random dB volume with a config, on a 6x5 grid."""
    rng = np.random.default_rng(3)
    grid = GridSpec(nx=6, ny=5, delta=0.4, x_origin=-1.0, y_origin=0.2)
    slices = rng.uniform(-90.0, -10.0, (4, 6, 5)).astype(np.float32)
    z = np.arange(1, 5) * small_config.delta_z
    return RssVolume(slices=slices, z=z, grid=grid, config=small_config,
                     stats=NormStats(-95.0, -5.0), normalized=False)
