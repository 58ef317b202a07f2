"""
Weighted 2D/3D geometric residuals
Pose objective over Omega with analytic first derivatives

For a pixel k with back-projected point P_k (frame t) and warped point Q_k
(frame t-1 sampled at the flow target):

    r2_k = s * |proj(exp(p) P_k) - target_k|      s = sqrt(1 / (W * H))
    r3_k = |exp(p) P_k - Q_k|
    r_k  = w2_k * r2_k + w3_k * r3_k
    f(p) = sum_k r_k^2

Derivatives use the right perturbation exp(p + d) ~ exp(p) exp(J_r(p) d).
"""

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from . import lie
from .camera import EPS_Z, PinholeIntrinsics, backproject_pixels
from .config import ResidualMode
from .errors import InvalidArgumentError, NumericalFailureError
from .fields import (FramePair, WeightMap, build_omega, omega_coordinates,
                     warp_backproject_grid)

logger = logging.getLogger(__name__)

HESSIAN_STEP = 1e-6


def _as_vector(p) -> np.ndarray:
    if isinstance(p, lie.TangentPose):
        return p.vector
    return np.asarray(p, dtype=float).reshape(6)


def _raster(w) -> np.ndarray:
    return np.asarray(w.data if isinstance(w, WeightMap) else w, dtype=float)


@dataclass(frozen=True, eq=False)
class ResidualWorkspace:
    """Per-pixel quantities that do not depend on the pose, gathered over Omega"""
    omega: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    target: np.ndarray
    scale2d: float
    w2d: np.ndarray
    w3d: np.ndarray
    intr: PinholeIntrinsics
    shape: tuple

    def __post_init__(self):
        n = len(self.omega)
        for name in ('P', 'Q', 'target', 'w2d', 'w3d'):
            if len(getattr(self, name)) != n:
                raise InvalidArgumentError(f"Workspace array {name} does not match |Omega| = {n}")
        if not self.scale2d > 0:
            raise InvalidArgumentError("scale2d must be positive")

    @property
    def size(self) -> int:
        return len(self.omega)

    def with_weights(self, w2d, w3d) -> 'ResidualWorkspace':
        """Copy with new (H, W) weight rasters gathered over Omega"""
        return self.with_omega_weights(_raster(w2d).ravel()[self.omega],
                                       _raster(w3d).ravel()[self.omega])

    def with_omega_weights(self, w2d: np.ndarray, w3d: np.ndarray) -> 'ResidualWorkspace':
        return replace(self, w2d=np.asarray(w2d, dtype=float), w3d=np.asarray(w3d, dtype=float))

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Omega-indexed values -> (H, W) raster, zero elsewhere"""
        out = np.zeros(self.shape[0] * self.shape[1])
        out[self.omega] = values
        return out.reshape(self.shape)


def build_workspace(pair: FramePair, w2d=None, w3d=None, mode: ResidualMode = 'combined') -> ResidualWorkspace:
    """
    Precompute everything the objective needs for one frame pair

    Args:
        w2d, w3d: (H, W) weight rasters or WeightMaps; default uniform 1
        mode: 'combined' keeps both terms, '2d' zeroes the 3D weights and
            '3d' zeroes the 2D weights
    """
    omega = build_omega(pair)
    H, W = pair.shape
    uv = omega_coordinates(omega, W).astype(float)
    depth = pair.depth_t.data.ravel()[omega]
    P = backproject_pixels(pair.rig.intr, uv, depth)

    targets, points, _ = warp_backproject_grid(pair)
    target = targets.reshape(-1, 2)[omega]
    Q = points.reshape(-1, 3)[omega]

    w2 = np.ones(len(omega)) if w2d is None else _raster(w2d).ravel()[omega]
    w3 = np.ones(len(omega)) if w3d is None else _raster(w3d).ravel()[omega]
    if mode == '2d':
        w3 = np.zeros_like(w3)
    elif mode == '3d':
        w2 = np.zeros_like(w2)
    elif mode != 'combined':
        raise InvalidArgumentError(f"Unknown residual mode {mode!r}")

    logger.debug("Workspace with %d of %d pixels", len(omega), H * W)
    return ResidualWorkspace(omega=omega, P=P, Q=Q, target=target,
                             scale2d=float(np.sqrt(1.0 / (W * H))),
                             w2d=w2, w3d=w3, intr=pair.rig.intr, shape=(H, W))


class ResidualTerms(NamedTuple):
    """Per-pixel residuals and their (N, 6) pose Jacobians"""
    r2: np.ndarray
    r3: np.ndarray
    J2: np.ndarray
    J3: np.ndarray
    behind: np.ndarray


def _pose_rows(g: np.ndarray, R: np.ndarray, P: np.ndarray, Jr: np.ndarray) -> np.ndarray:
    """Rows g^T R [I, -[P]x] J_r for (N, 3) point gradients g"""
    a = g @ R
    return np.concatenate([a, np.cross(P, a)], axis=1) @ Jr


def residual_terms(ws: ResidualWorkspace, p, jacobians: bool = True,
                   index: Optional[slice] = None) -> ResidualTerms:
    xi = _as_vector(p)
    T = lie.exp_vector(xi)
    P = ws.P if index is None else ws.P[index]
    Q = ws.Q if index is None else ws.Q[index]
    target = ws.target if index is None else ws.target[index]
    R = T.R
    Y = P @ R.T + T.t

    e3 = Y - Q
    r3 = np.linalg.norm(e3, axis=1)

    z = Y[:, 2]
    front = z > EPS_Z
    zs = np.where(front, z, 1.0)
    fx, fy = ws.intr.fx, ws.intr.fy
    proj = np.stack([fx * Y[:, 0] / zs + ws.intr.cx, fy * Y[:, 1] / zs + ws.intr.cy], axis=1)
    e2 = proj - target
    n2 = np.linalg.norm(e2, axis=1)
    r2 = np.where(front, ws.scale2d * n2, 0.0)

    if not jacobians:
        return ResidualTerms(r2, r3, None, None, ~front)

    Jr = lie.right_jacobian(xi)
    safe3 = np.where(r3 > 0, r3, 1.0)
    g3 = np.where((r3 > 0)[:, None], e3 / safe3[:, None], 0.0)
    J3 = _pose_rows(g3, R, P, Jr)

    use2 = front & (n2 > 0)
    u2 = np.where(use2[:, None], e2 / np.where(use2, n2, 1.0)[:, None], 0.0)
    g2 = np.stack([u2[:, 0] * fx / zs,
                   u2[:, 1] * fy / zs,
                   -(u2[:, 0] * fx * Y[:, 0] + u2[:, 1] * fy * Y[:, 1]) / zs ** 2], axis=1)
    J2 = ws.scale2d * _pose_rows(g2, R, P, Jr)
    return ResidualTerms(r2, r3, J2, J3, ~front)


def residual_2d(ws: ResidualWorkspace, p, k: int) -> float:
    _check_index(ws, k)
    return float(residual_terms(ws, p, jacobians=False, index=slice(k, k + 1)).r2[0])


def residual_3d(ws: ResidualWorkspace, p, k: int) -> float:
    _check_index(ws, k)
    return float(residual_terms(ws, p, jacobians=False, index=slice(k, k + 1)).r3[0])


def residual_combined(ws: ResidualWorkspace, p, k: int) -> float:
    _check_index(ws, k)
    t = residual_terms(ws, p, jacobians=False, index=slice(k, k + 1))
    return float(ws.w2d[k] * t.r2[0] + ws.w3d[k] * t.r3[0])


def _check_index(ws: ResidualWorkspace, k: int):
    if not 0 <= k < ws.size:
        raise InvalidArgumentError(f"Pixel index {k} outside Omega of size {ws.size}")


def combined_residuals(ws: ResidualWorkspace, p) -> np.ndarray:
    t = residual_terms(ws, p, jacobians=False)
    return ws.w2d * t.r2 + ws.w3d * t.r3


def _finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise NumericalFailureError(f"Non-finite {what}")
    return value


def objective(ws: ResidualWorkspace, p) -> float:
    """sum_k r_k^2, reduced with numpy's pairwise summation"""
    r = combined_residuals(ws, p)
    return float(_finite(np.sum(r * r), 'objective'))


def evaluate(ws: ResidualWorkspace, p):
    """
    Objective, gradient and behind-camera count in one pass

    Returns:
        (f, grad, behind_count)
    """
    t = residual_terms(ws, p)
    r = ws.w2d * t.r2 + ws.w3d * t.r3
    J = ws.w2d[:, None] * t.J2 + ws.w3d[:, None] * t.J3
    f = _finite(np.sum(r * r), 'objective')
    g = _finite(np.sum(2.0 * r[:, None] * J, axis=0), 'gradient')
    return float(f), g, int(t.behind.sum())


def objective_gradient(ws: ResidualWorkspace, p) -> np.ndarray:
    return evaluate(ws, p)[1]


def objective_hessian(ws: ResidualWorkspace, p, step: float = HESSIAN_STEP) -> np.ndarray:
    """Central differences of the analytic gradient, symmetrised"""
    xi = _as_vector(p)
    H = np.empty((6, 6))
    for i in range(6):
        d = np.zeros(6)
        d[i] = step
        H[:, i] = (objective_gradient(ws, xi + d) - objective_gradient(ws, xi - d)) / (2 * step)
    return 0.5 * (H + H.T)
