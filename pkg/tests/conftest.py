import numpy as np
import pytest

from angio4d import geometry, phantom
from angio4d.dataset import AngioDataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> AngioDataset:
    """A small but complete synthetic dataset shared across tests:
    4 views, 3 phases, 32x32 detector, 48^3 volume."""
    out = tmp_path_factory.mktemp("data") / "small"
    tree, motion, background = phantom.build_default_phantom(seed=7, n_phases=3)
    poses = geometry.default_pose_set()[:4]
    det = geometry.DetectorGrid(32, 32, pixel_pitch_mm=9.0)
    return phantom.synthesize_dataset(
        str(out),
        tree,
        motion,
        background,
        poses,
        det,
        n_phases=3,
        grid_resolution=48,
        oversample=1,
        base_samples=128,
        phantom_info={"seed": 7},
    )
