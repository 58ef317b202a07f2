import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from stereovo.camera import backproject_grid, default_rig, project_points
from stereovo.fields import DepthMap, FlowField, PixelMask, make_frame_pair, pixel_grid


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running sweeps, deselect with -m 'not slow'")


def plane_pair(rig, depth=0.5, v=(0.0, 0.0, 0.0), masks=()):
    """
    Exact pair over a fronto-parallel plane for a translation-only pose

    The previous depth stays constant, so bilinear sampling is exact and
    the residuals vanish at the true pose.
    """
    H, W = rig.shape
    v = np.asarray(v, dtype=float)
    ones = np.ones((H, W), dtype=bool)
    depth_t = DepthMap(np.full((H, W), depth), ones)
    depth_prev = DepthMap(np.full((H, W), depth + v[2]), ones)
    P = backproject_grid(rig.intr, depth_t.data)
    if np.any(v):
        uv, _ = project_points(rig.intr, P + v)
        flow = FlowField(uv - pixel_grid((H, W)))
    else:
        flow = FlowField.zeros((H, W))
    return make_frame_pair(rig, depth_t, depth_prev, flow, masks=masks)


@pytest.fixture
def small_rig():
    return default_rig(40, 32)


@pytest.fixture
def make_plane_pair():
    return plane_pair


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def empty_mask(small_rig):
    return PixelMask.empty(small_rig.shape)
