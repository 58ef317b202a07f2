"""
Raster containers and the valid pixel set
Depth, flow, parallax, weights and masks over an (H, W) grid, bilinear
sampling, flow-target warping and the mask pipeline that defines Omega
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from matplotlib.path import Path
from scipy import ndimage

from .camera import EPS_Z, StereoRig, backproject_pixels
from .errors import DegenerateFrameError, InvalidArgumentError

logger = logging.getLogger(__name__)


def _readonly(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Normalized depth in (0, 1] with a validity raster"""
    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        data = _readonly(self.data)
        valid = _readonly(self.valid, dtype=bool)
        if data.ndim != 2 or valid.shape != data.shape:
            raise InvalidArgumentError(
                f"DepthMap needs matching 2D rasters, got {data.shape} and {valid.shape}")
        if not np.all(np.isfinite(data[valid])):
            raise InvalidArgumentError("DepthMap has non-finite values at valid pixels")
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'valid', valid)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class FlowField:
    """Pixel displacement from frame t to frame t-1, shape (H, W, 2)"""
    data: np.ndarray

    def __post_init__(self):
        data = _readonly(self.data)
        if data.ndim != 3 or data.shape[2] != 2:
            raise InvalidArgumentError(f"FlowField must be (H, W, 2), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("FlowField must be finite")
        object.__setattr__(self, 'data', data)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[:2]

    @classmethod
    def zeros(cls, shape) -> 'FlowField':
        return cls(np.zeros(tuple(shape) + (2,)))


@dataclass(frozen=True, eq=False)
class ParallaxFlow(FlowField):
    """Left->right stereo displacement; channel 0 is minus the disparity"""

    @property
    def disparity(self) -> np.ndarray:
        return -self.data[..., 0]


@dataclass(frozen=True, eq=False)
class WeightMap:
    data: np.ndarray

    def __post_init__(self):
        data = _readonly(self.data)
        if data.ndim != 2:
            raise InvalidArgumentError(f"WeightMap must be 2D, got {data.shape}")
        if not (np.all(np.isfinite(data)) and np.all(data >= 0) and np.all(data <= 1)):
            raise InvalidArgumentError("WeightMap values must lie in [0, 1]")
        object.__setattr__(self, 'data', data)

    @classmethod
    def uniform(cls, shape, value: float = 1.0) -> 'WeightMap':
        return cls(np.full(tuple(shape), float(value)))


@dataclass(frozen=True, eq=False)
class PixelMask:
    """True marks an excluded pixel"""
    data: np.ndarray

    def __post_init__(self):
        data = _readonly(self.data, dtype=bool)
        if data.ndim != 2:
            raise InvalidArgumentError(f"PixelMask must be 2D, got {data.shape}")
        object.__setattr__(self, 'data', data)

    @classmethod
    def empty(cls, shape) -> 'PixelMask':
        return cls(np.zeros(tuple(shape), dtype=bool))

    def __or__(self, other: 'PixelMask') -> 'PixelMask':
        return PixelMask(self.data | other.data)

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True, eq=False)
class FramePair:
    """
    Inputs of one relative pose solve between frames t-1 and t

    mask is the union of every exclusion and always covers the invalid
    pixels of both depth maps.
    """
    depth_t: DepthMap
    depth_prev: DepthMap
    flow: FlowField
    mask: PixelMask
    rig: StereoRig
    parallax_t: Optional[ParallaxFlow] = None
    parallax_prev: Optional[ParallaxFlow] = None
    image_t: Optional[np.ndarray] = None
    image_prev: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = self.depth_t.shape
        if shape != (self.rig.height, self.rig.width):
            raise InvalidArgumentError(
                f"Raster shape {shape} does not match the {self.rig.width}x{self.rig.height} rig")
        others = [self.depth_prev.shape, self.flow.shape, self.mask.data.shape]
        others += [p.shape for p in (self.parallax_t, self.parallax_prev) if p is not None]
        others += [im.shape[:2] for im in (self.image_t, self.image_prev) if im is not None]
        for s in others:
            if tuple(s) != shape:
                raise InvalidArgumentError(f"Raster shape {tuple(s)} differs from {shape}")
        invalid = ~self.depth_t.valid | ~self.depth_prev.valid
        if np.any(invalid & ~self.mask.data):
            raise InvalidArgumentError("Mask must cover the invalid pixels of both depth maps")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth_t.shape


def bilinear_sample(data: np.ndarray, valid: Optional[np.ndarray], pos) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bilinear interpolation at continuous positions

    Args:
        data: (H, W) or (H, W, C) raster
        valid: (H, W) boolean raster or None for all-valid
        pos: (..., 2) positions as (u, v)

    Returns:
        values (...) or (..., C) and a validity flag (...). A position is
        invalid outside [0, W-1] x [0, H-1] or when a neighbor with nonzero
        interpolation weight is invalid.
    """
    data = np.asarray(data, dtype=float)
    H, W = data.shape[:2]
    pos = np.asarray(pos, dtype=float)
    u, v = pos[..., 0], pos[..., 1]

    with np.errstate(invalid='ignore'):
        inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    u0 = np.floor(uc).astype(np.intp)
    v0 = np.floor(vc).astype(np.intp)
    a = uc - u0
    b = vc - v0
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)

    if valid is None:
        valid = np.ones((H, W), dtype=bool)
    clean = np.where(valid[..., None] if data.ndim == 3 else valid, data, 0.0)

    ok = inside.copy()
    for vi, ui, w in ((v0, u0, (1 - a) * (1 - b)), (v0, u1, a * (1 - b)),
                      (v1, u0, (1 - a) * b), (v1, u1, a * b)):
        ok &= valid[vi, ui] | (w == 0)

    if data.ndim == 3:
        a = a[..., None]
        b = b[..., None]
    top = clean[v0, u0] + a * (clean[v0, u1] - clean[v0, u0])
    bottom = clean[v1, u0] + a * (clean[v1, u1] - clean[v1, u0])
    out = top + b * (bottom - top)
    return out, ok


def pixel_grid(shape) -> np.ndarray:
    """(H, W, 2) raster of (u, v) pixel coordinates"""
    H, W = shape
    v, u = np.mgrid[0:H, 0:W].astype(float)
    return np.stack([u, v], axis=-1)


def flow_targets(pair: FramePair) -> np.ndarray:
    """x + F_t(x) for every pixel"""
    return pixel_grid(pair.shape) + pair.flow.data


def warp_backproject_grid(pair: FramePair) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Warped back-projection for every pixel at once

    Returns:
        targets (H, W, 2), points (H, W, 3) from D_{t-1} sampled at the
        targets, and a validity raster
    """
    targets = flow_targets(pair)
    depth, ok = bilinear_sample(pair.depth_prev.data, pair.depth_prev.valid, targets)
    points = backproject_pixels(pair.rig.intr, targets, depth)
    ok &= depth > EPS_Z
    return targets, points, ok


def warp_backproject(pair: FramePair, x) -> Tuple[np.ndarray, bool]:
    """
    Homogeneous point of D_{t-1} seen at x + F_t(x), with a validity flag

    Args:
        x: integer pixel (column, row)
    """
    u, v = int(x[0]), int(x[1])
    H, W = pair.shape
    if not (0 <= u < W and 0 <= v < H):
        raise InvalidArgumentError(f"Pixel ({u}, {v}) outside the {W}x{H} raster")
    target = np.array([u, v], dtype=float) + pair.flow.data[v, u]
    depth, ok = bilinear_sample(pair.depth_prev.data, pair.depth_prev.valid, target)
    point = np.append(backproject_pixels(pair.rig.intr, target, depth), 1.0)
    return point, bool(ok and depth > EPS_Z)


def specularity_mask(image: np.ndarray, threshold_frac: float = 0.98, dilate_px: int = 2) -> PixelMask:
    """Max-intensity detection followed by a square dilation"""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3:
        raise InvalidArgumentError(f"Expected an (H, W, C) image, got {image.shape}")
    if np.any(image < 0) or np.any(image > 1):
        raise InvalidArgumentError("Image intensities must lie in [0, 1]")
    hits = image.max(axis=2) >= threshold_frac
    if dilate_px > 0 and hits.any():
        structure = np.ones((2 * dilate_px + 1, 2 * dilate_px + 1), dtype=bool)
        hits = ndimage.binary_dilation(hits, structure=structure)
    return PixelMask(hits)


def polygon_mask(shape, vertices: Sequence[Tuple[float, float]]) -> PixelMask:
    """Pixels whose centers fall inside a (u, v) polygon"""
    H, W = shape
    path = Path(np.asarray(vertices, dtype=float))
    inside = path.contains_points(pixel_grid(shape).reshape(-1, 2))
    return PixelMask(inside.reshape(H, W))


def make_frame_pair(rig: StereoRig, depth_t: DepthMap, depth_prev: DepthMap, flow: FlowField,
                    masks: Iterable[PixelMask] = (), parallax_t: Optional[ParallaxFlow] = None,
                    parallax_prev: Optional[ParallaxFlow] = None,
                    image_t: Optional[np.ndarray] = None, image_prev: Optional[np.ndarray] = None,
                    mask_cfg=None) -> FramePair:
    """
    Assemble a FramePair whose mask is the union of the given masks, the
    invalid depth pixels and, if mask_cfg enables it, the specularities of
    image_t
    """
    excluded = ~depth_t.valid | ~depth_prev.valid
    for m in masks:
        excluded = excluded | m.data
    if mask_cfg is not None and mask_cfg.use_specularity and image_t is not None:
        spec = specularity_mask(image_t, mask_cfg.specular_threshold, mask_cfg.dilate_px)
        logger.debug("Specularity mask covers %d pixels", spec.count)
        excluded = excluded | spec.data
    return FramePair(depth_t=depth_t, depth_prev=depth_prev, flow=flow, mask=PixelMask(excluded),
                     rig=rig, parallax_t=parallax_t, parallax_prev=parallax_prev,
                     image_t=image_t, image_prev=image_prev)


def build_omega(pair: FramePair) -> np.ndarray:
    """
    Row-major flat indices v * W + u of the pixels that enter the objective

    Excludes masked pixels, invalid depth, invalid warp targets and points
    that would project behind the camera at the identity pose.

    Raises:
        DegenerateFrameError: if no pixel survives
    """
    _, _, warp_ok = warp_backproject_grid(pair)
    keep = ~pair.mask.data & pair.depth_t.valid & warp_ok & (pair.depth_t.data > EPS_Z)
    omega = np.flatnonzero(keep)
    if omega.size == 0:
        raise DegenerateFrameError("No valid pixels left after masking")
    return omega


def omega_coordinates(omega: np.ndarray, width: int) -> np.ndarray:
    """Flat indices -> (N, 2) integer (u, v) pixels"""
    omega = np.asarray(omega)
    return np.stack([omega % width, omega // width], axis=-1)
