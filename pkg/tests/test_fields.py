import numpy as np
import pytest

from stereovo import lie
from stereovo.camera import backproject, default_rig
from stereovo.config import MaskConfig
from stereovo.errors import DegenerateFrameError, InvalidArgumentError
from stereovo.fields import (DepthMap, FlowField, FramePair, PixelMask, WeightMap, bilinear_sample,
                             build_omega, make_frame_pair, polygon_mask, specularity_mask,
                             warp_backproject)
from stereovo.synth import CameraPath, SceneSpec, SurfaceSpec, TextureSpec, render_sequence


def test_bilinear_integer_position_is_exact(rng):
    data = rng.normal(size=(6, 7))
    val, ok = bilinear_sample(data, None, np.array([[3.0, 2.0], [6.0, 5.0], [0.0, 0.0]]))
    assert ok.all()
    assert np.array_equal(val, [data[2, 3], data[5, 6], data[0, 0]])


def test_bilinear_midpoint():
    data = np.zeros((3, 3))
    data[1, 0], data[1, 1] = 2.0, 4.0
    val, ok = bilinear_sample(data, None, np.array([0.5, 1.0]))
    assert ok and val == 3.0


def test_bilinear_constant_is_exact(rng):
    data = np.full((9, 11), 0.7312)
    pos = rng.uniform([0, 0], [10, 8], size=(10, 2))
    val, ok = bilinear_sample(data, None, pos)
    assert ok.all()
    assert np.all(val == 0.7312)


def test_bilinear_validity():
    data = np.ones((4, 4))
    valid = np.ones((4, 4), dtype=bool)
    valid[1, 2] = False
    _, ok = bilinear_sample(data, valid, np.array([[1.5, 1.5], [1.0, 1.0], [3.5, 0.0], [-0.1, 0.0]]))
    assert ok.tolist() == [False, True, False, False]
    # a zero-weight invalid neighbor does not spoil the sample
    _, ok = bilinear_sample(data, valid, np.array([1.0, 1.5]))
    assert ok


def test_warp_backproject_zero_flow(small_rig, make_plane_pair):
    pair = make_plane_pair(small_rig)
    X, ok = warp_backproject(pair, (5, 7))
    assert ok
    assert np.allclose(X, backproject(small_rig.intr, pair.depth_prev, (5, 7)), atol=1e-15)


def test_warp_backproject_out_of_bounds(small_rig):
    ones = np.ones(small_rig.shape, dtype=bool)
    depth = DepthMap(np.full(small_rig.shape, 0.5), ones)
    flow = np.zeros(small_rig.shape + (2,))
    flow[..., 0] = 100.0
    pair = FramePair(depth, depth, FlowField(flow), PixelMask.empty(small_rig.shape), small_rig)
    _, ok = warp_backproject(pair, (3, 3))
    assert not ok


def test_warp_backproject_rigid_scene():
    rig = default_rig(48, 36)
    path = CameraPath(translation=(0.002, -0.001, 0.001), rotation=(0.004, np.radians(0.5), -0.002))
    seq = render_sequence(SceneSpec(rig=rig, surface=SurfaceSpec(kind='plane'),
                                    path=path, texture=TextureSpec(specular_spots=0), n_frames=2))
    pair = seq.pair(1)
    T = lie.exp_map(seq.gt_relative[0])
    checked = 0
    for u in range(2, 46, 5):
        for v in range(2, 34, 5):
            X, ok = warp_backproject(pair, (u, v))
            if not ok:
                continue
            expected = lie.apply(T, backproject(rig.intr, pair.depth_t, (u, v))[:3])
            assert np.max(np.abs(X[:3] - expected)) < 1e-6
            checked += 1
    assert checked > 50


def test_specularity_mask_cases():
    assert specularity_mask(np.zeros((6, 6, 3))).count == 0
    assert specularity_mask(np.full((6, 6, 3), 0.5), 0.98).count == 0
    image = np.zeros((7, 7, 3))
    image[3, 3] = 1.0
    m = specularity_mask(image, 0.98, dilate_px=1)
    expected = np.zeros((7, 7), dtype=bool)
    expected[2:5, 2:5] = True
    assert np.array_equal(m.data, expected)
    with pytest.raises(InvalidArgumentError):
        specularity_mask(np.full((2, 2, 3), 1.5))


def test_polygon_mask():
    m = polygon_mask((10, 10), [(1.5, 1.5), (5.5, 1.5), (5.5, 4.5), (1.5, 4.5)])
    assert m.count == 12
    assert m.data[2, 2] and not m.data[0, 0]


def test_build_omega_all_pixels(small_rig, make_plane_pair):
    omega = build_omega(make_plane_pair(small_rig))
    assert np.array_equal(omega, np.arange(small_rig.width * small_rig.height))


def test_build_omega_fully_masked(small_rig, make_plane_pair):
    full = PixelMask(np.ones(small_rig.shape, dtype=bool))
    with pytest.raises(DegenerateFrameError):
        build_omega(make_plane_pair(small_rig, masks=[full]))


def test_build_omega_checkerboard():
    rig = default_rig(4, 4)
    v, u = np.mgrid[0:4, 0:4]
    checker = PixelMask((u + v) % 2 == 1)
    ones = np.ones((4, 4), dtype=bool)
    depth = DepthMap(np.full((4, 4), 0.5), ones)
    pair = FramePair(depth, depth, FlowField.zeros((4, 4)), checker, rig)
    omega = build_omega(pair)
    assert omega.tolist() == [0, 2, 5, 7, 8, 10, 13, 15]


def test_frame_pair_requires_mask_over_invalid_depth(small_rig):
    valid = np.ones(small_rig.shape, dtype=bool)
    valid[0, 0] = False
    depth = DepthMap(np.where(valid, 0.5, 0.0), valid)
    with pytest.raises(InvalidArgumentError):
        FramePair(depth, depth, FlowField.zeros(small_rig.shape), PixelMask.empty(small_rig.shape), small_rig)
    pair = make_frame_pair(small_rig, depth, depth, FlowField.zeros(small_rig.shape))
    assert pair.mask.data[0, 0]
    assert 0 not in build_omega(pair)


def test_make_frame_pair_specularity(small_rig):
    ones = np.ones(small_rig.shape, dtype=bool)
    depth = DepthMap(np.full(small_rig.shape, 0.5), ones)
    image = np.full(small_rig.shape + (3,), 0.4)
    image[10, 10] = 1.0
    flow = FlowField.zeros(small_rig.shape)
    on = make_frame_pair(small_rig, depth, depth, flow, image_t=image, mask_cfg=MaskConfig(dilate_px=2))
    off = make_frame_pair(small_rig, depth, depth, flow, image_t=image,
                          mask_cfg=MaskConfig(use_specularity=False))
    assert on.mask.count == 25
    assert off.mask.count == 0


def test_raster_containers_validate():
    with pytest.raises(InvalidArgumentError):
        WeightMap(np.full((2, 2), 1.5))
    with pytest.raises(InvalidArgumentError):
        FlowField(np.zeros((2, 2, 3)))
    with pytest.raises(InvalidArgumentError):
        DepthMap(np.full((2, 2), np.nan), np.ones((2, 2), dtype=bool))
    d = DepthMap(np.full((2, 2), 0.5), np.ones((2, 2), dtype=bool))
    with pytest.raises(ValueError):
        d.data[0, 0] = 1.0
