"""
Pinhole camera model
Projection, back-projection, stereo disparity and depth normalization

Pixel centers sit on integer coordinates: pixel (u, v) is column u, row v,
and rasters are indexed [v, u].
"""

from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import BehindCameraError, InvalidArgumentError, InvalidPixelError

# Points with z at or below this are behind the camera
EPS_Z = 1e-6
# Disparities at or below this many pixels give no usable depth
EPS_DISP = 0.25


class PinholeIntrinsics(BaseModel):
    """Focal lengths and principal point, all in pixels"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


class StereoRig(BaseModel):
    """
    Rectified stereo pair sharing one set of intrinsics

    The default rig is the desk-scale 320x256 raster with a 5 mm baseline
    and 0.2 scene units of maximum expected depth.
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    fx: float = Field(260.0, gt=0, description="Focal length along u (px)")
    fy: float = Field(260.0, gt=0, description="Focal length along v (px)")
    cx: float = Field(159.5, description="Principal point column (px)")
    cy: float = Field(127.5, description="Principal point row (px)")
    baseline: float = Field(0.005, gt=0, description="Stereo baseline (scene units)")
    d_max: float = Field(0.2, gt=0, description="Maximum expected depth (scene units)")
    width: int = Field(320, gt=0)
    height: int = Field(256, gt=0)

    @model_validator(mode='after')
    def check_principal_point(self):
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) outside the "
                f"{self.width}x{self.height} raster")
        return self

    @property
    def intr(self) -> PinholeIntrinsics:
        return PinholeIntrinsics(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy)

    @property
    def shape(self) -> Tuple[int, int]:
        """Raster shape as (rows, cols)"""
        return self.height, self.width


def default_rig(width: int = 320, height: int = 256, baseline: float = 0.005,
                d_max: float = 0.2) -> StereoRig:
    """Rig with fx = fy = 0.8125 * width and a centered principal point"""
    f = 0.8125 * width
    return StereoRig(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                     baseline=baseline, d_max=d_max, width=width, height=height)


def project(intr: PinholeIntrinsics, X) -> np.ndarray:
    """
    Project a 3D point (3-vector or homogeneous 4-vector) to pixel coordinates

    Raises:
        BehindCameraError: if the depth component is not above EPS_Z
    """
    X = np.asarray(X, dtype=float)
    if X.shape not in ((3,), (4,)):
        raise InvalidArgumentError(f"Expected a 3- or 4-vector, got shape {X.shape}")
    x, y, z = X[:3]
    if not z > EPS_Z:
        raise BehindCameraError(f"Point depth {z} is not in front of the camera")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def project_points(intr: PinholeIntrinsics, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised projection of (..., 3) points

    Returns:
        pixels (..., 2) and a boolean in-front mask; pixels of points behind
        the camera are set to NaN
    """
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    ok = z > EPS_Z
    zs = np.where(ok, z, 1.0)
    uv = np.stack([intr.fx * X[..., 0] / zs + intr.cx,
                   intr.fy * X[..., 1] / zs + intr.cy], axis=-1)
    uv[~ok] = np.nan
    return uv, ok


def backproject_pixels(intr: PinholeIntrinsics, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """(N, 2) pixel positions with (N,) depths -> (N, 3) points"""
    uv = np.asarray(uv, dtype=float)
    d = np.asarray(depth, dtype=float)
    return np.stack([d * (uv[..., 0] - intr.cx) / intr.fx,
                     d * (uv[..., 1] - intr.cy) / intr.fy,
                     d], axis=-1)


def backproject_grid(intr: PinholeIntrinsics, depth: np.ndarray) -> np.ndarray:
    """Back-project a whole (H, W) depth raster to an (H, W, 3) point raster"""
    depth = np.asarray(depth, dtype=float)
    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W].astype(float)
    return backproject_pixels(intr, np.stack([u, v], axis=-1), depth)


def backproject(intr: PinholeIntrinsics, depth, x) -> np.ndarray:
    """
    Homogeneous 3D point (x, y, z, 1) seen at integer pixel x = (u, v)

    Args:
        depth: DepthMap (normalized units)
        x: pixel as (column, row)
    """
    u, v = int(x[0]), int(x[1])
    H, W = depth.data.shape
    if not (0 <= u < W and 0 <= v < H):
        raise InvalidArgumentError(f"Pixel ({u}, {v}) outside the {W}x{H} raster")
    if not depth.valid[v, u]:
        raise InvalidPixelError(f"Depth is invalid at pixel ({u}, {v})")
    X = backproject_pixels(intr, np.array([u, v], dtype=float), depth.data[v, u])
    return np.append(X, 1.0)


def disparity_to_depth(rig: StereoRig, disparity, eps: float = EPS_DISP):
    """
    depth = fx * baseline / disparity

    Disparities at or below eps map to NaN, the invalid-depth marker.
    Accepts scalars or arrays.
    """
    d = np.asarray(disparity, dtype=float)
    ok = d > eps
    out = np.where(ok, rig.fx * rig.baseline / np.where(ok, d, 1.0), np.nan)
    return float(out) if out.ndim == 0 else out


def depth_to_disparity(rig: StereoRig, depth):
    z = np.asarray(depth, dtype=float)
    if np.any(z <= 0):
        raise InvalidArgumentError("Depth must be positive to compute disparity")
    out = rig.fx * rig.baseline / z
    return float(out) if out.ndim == 0 else out


def normalize_depth(rig: StereoRig, depth_raw: np.ndarray):
    """
    Divide raw depth (scene units) by d_max

    Values above d_max, non-positive or non-finite values are marked
    invalid (data 0) instead of being clamped.
    """
    from .fields import DepthMap

    raw = np.asarray(depth_raw, dtype=float)
    with np.errstate(invalid='ignore'):
        valid = np.isfinite(raw) & (raw > 0) & (raw <= rig.d_max)
    data = np.where(valid, raw, 0.0) / rig.d_max
    return DepthMap(data=data, valid=valid)


def depth_from_parallax(rig: StereoRig, parallax) -> np.ndarray:
    """
    Raw depth (scene units) from a left->right parallax flow

    The horizontal displacement of a point seen by the right camera is
    -disparity, so disparity = -parallax[..., 0].
    """
    return disparity_to_depth(rig, -np.asarray(parallax.data, dtype=float)[..., 0])
