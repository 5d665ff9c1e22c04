import numpy as np
import pytest
import torch

from nloscal.scene import SceneConfig, WallGrid
from nloscal.synthetic import PICOSECOND, plane_scene
from nloscal.transient import render_mesh

torch.set_num_threads(max(1, torch.get_num_threads()))


def small_scene(wall_res=8, num_bins=256, volume_depth=16, hemisphere=8):
    """Confocal 0.5 m wall with a matching-pitch volume, cheap enough for unit tests."""
    wall = WallGrid.planar((0.5, 0.5), (wall_res, wall_res))
    cfg = SceneConfig(bin_width=32 * PICOSECOND, num_bins=num_bins,
                      volume_origin=(-0.25, -0.25, 0.2), volume_extent=(0.5, 0.5, 0.4),
                      volume_resolution=(wall_res, wall_res, volume_depth),
                      hemisphere_resolution=hemisphere)
    return wall, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def plane():
    """Acceptance plane scene: 32 x 32 wall, 512 bins, plane at 0.5 m."""
    return plane_scene()


@pytest.fixture(scope="session")
def plane_hr(plane):
    """Ground-truth H_r of the plane rendered with the fine hemisphere grid."""
    return render_mesh(plane.mesh, plane.wall, plane.render_cfg,
                       threads=torch.get_num_threads())


# --- acceptance report ----------------------------------------------------------------

CRITERIA = ("A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8", "A9")
ACCEPTANCE = {}


def record(key, ok, detail):
    """Store one criterion outcome for the end-of-run summary and return ``ok``."""
    ACCEPTANCE[key] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in CRITERIA:
        ok, detail = ACCEPTANCE.get(key, (False, "did not run to completion"))
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
