import time

import numpy as np
import pytest
from pydantic import ValidationError

from stereovo.camera import (StereoRig, backproject, backproject_grid, default_rig, depth_from_parallax,
                             depth_to_disparity, disparity_to_depth, normalize_depth, project,
                             project_points)
from stereovo.errors import BehindCameraError, InvalidArgumentError, InvalidPixelError
from stereovo.fields import DepthMap, ParallaxFlow


def test_project_optical_axis():
    rig = StereoRig()
    assert np.array_equal(project(rig.intr, [0, 0, 1, 1]), [rig.cx, rig.cy])


def test_project_inverse_construction():
    intr = StereoRig().intr
    u, v, z = 12.25, 200.5, 0.37
    X = [z * (u - intr.cx) / intr.fx, z * (v - intr.cy) / intr.fy, z, 1.0]
    assert np.allclose(project(intr, X), [u, v], atol=1e-10)


def test_project_behind_camera():
    intr = StereoRig().intr
    with pytest.raises(BehindCameraError):
        project(intr, [0.1, 0.1, 0.0])
    with pytest.raises(BehindCameraError):
        project(intr, [0.1, 0.1, -1.0])
    uv, ok = project_points(intr, np.array([[0, 0, 1.0], [0, 0, -1.0]]))
    assert ok.tolist() == [True, False]
    assert np.all(np.isnan(uv[1]))


def test_project_backproject_round_trip(rng):
    rig = StereoRig()
    start = time.time()
    depth = rng.uniform(0.05, 1.0, size=rig.shape)
    P = backproject_grid(rig.intr, depth)
    uv, ok = project_points(rig.intr, P)
    v, u = np.mgrid[0:rig.height, 0:rig.width]
    assert ok.all()
    assert np.max(np.abs(uv - np.stack([u, v], axis=-1))) < 1e-9
    assert time.time() - start < 1.0


def test_backproject_principal_point():
    rig = default_rig(33, 25)
    depth = DepthMap(np.ones(rig.shape), np.ones(rig.shape, dtype=bool))
    X = backproject(rig.intr, depth, (rig.cx, rig.cy))
    assert np.array_equal(X, [0, 0, 1, 1])


def test_backproject_is_homogeneous_in_depth():
    rig = default_rig(33, 25)
    ones = np.ones(rig.shape, dtype=bool)
    X1 = backproject(rig.intr, DepthMap(np.full(rig.shape, 0.3), ones), (3, 20))
    X2 = backproject(rig.intr, DepthMap(np.full(rig.shape, 0.6), ones), (3, 20))
    assert np.allclose(X2[:3], 2 * X1[:3], atol=0)


def test_backproject_guards():
    rig = default_rig(8, 6)
    valid = np.ones(rig.shape, dtype=bool)
    valid[2, 3] = False
    depth = DepthMap(np.where(valid, 0.5, 0.0), valid)
    with pytest.raises(InvalidPixelError):
        backproject(rig.intr, depth, (3, 2))
    with pytest.raises(InvalidArgumentError):
        backproject(rig.intr, depth, (8, 0))


def test_disparity_to_depth():
    rig = StereoRig(fx=500, fy=500, baseline=0.005)
    assert disparity_to_depth(rig, 25) == pytest.approx(0.1, abs=1e-15)
    assert disparity_to_depth(rig, 12.5) == pytest.approx(2 * disparity_to_depth(rig, 25))
    assert np.isnan(disparity_to_depth(rig, 0.0))
    assert np.isnan(disparity_to_depth(rig, 0.2))
    out = disparity_to_depth(rig, np.array([25.0, 0.0, -3.0]))
    assert out[0] == pytest.approx(0.1)
    assert np.isnan(out[1:]).all()
    assert depth_to_disparity(rig, 0.1) == pytest.approx(25.0)


def test_normalize_depth():
    rig = StereoRig(d_max=0.2)
    d = normalize_depth(rig, np.array([[0.1, 0.2, 0.25, np.nan, -0.1, 0.0]]))
    assert d.data[0, 0] == pytest.approx(0.5)
    assert d.data[0, 1] == 1.0
    assert d.valid.tolist() == [[True, True, False, False, False, False]]
    assert np.all(d.data[~d.valid] == 0)


def test_depth_from_parallax():
    rig = default_rig(10, 8)
    disparity = rig.fx * rig.baseline / 0.1
    parallax = ParallaxFlow(np.stack([np.full(rig.shape, -disparity), np.zeros(rig.shape)], axis=-1))
    assert np.allclose(depth_from_parallax(rig, parallax), 0.1, atol=1e-15)


def test_rig_validation():
    with pytest.raises(ValidationError):
        StereoRig(width=100)
    with pytest.raises(ValidationError):
        StereoRig(fx=-1)
    with pytest.raises(ValidationError):
        StereoRig(focal=300)
    rig = default_rig(64, 48)
    assert rig.shape == (48, 64)
    assert rig.fx == pytest.approx(52.0)
