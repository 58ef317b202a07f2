"""
SE(3) Lie group utilities
Tangent poses, rigid transforms and the exp/log maps between them

Tangent vectors are ordered (v, w): translation first, rotation second.
A relative pose p_t maps points in frame-t coordinates into frame-(t-1)
coordinates, so chaining is T_world_t = T_world_(t-1) * exp(p_t).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm_frechet
from scipy.spatial.transform import Rotation

from .errors import DegenerateRotationError, InvalidArgumentError

# Below this angle Rodrigues and V(w) use their series expansions
SMALL_ANGLE = 1e-6
# log_map refuses rotations closer than this to pi
PI_MARGIN = 1e-6
ORTHO_TOL = 1e-9


def skew(x: np.ndarray) -> np.ndarray:
    """Hat operator for 3-vectors; works on (..., 3) arrays"""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (3, 3))
    out[..., 0, 1] = -x[..., 2]
    out[..., 0, 2] = x[..., 1]
    out[..., 1, 0] = x[..., 2]
    out[..., 1, 2] = -x[..., 0]
    out[..., 2, 0] = -x[..., 1]
    out[..., 2, 1] = x[..., 0]
    return out


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class TangentPose:
    """Element of se(3): v translation (scene units), w axis-angle (radians)"""
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'v', _frozen(self.v, (3,)))
        object.__setattr__(self, 'w', _frozen(self.w, (3,)))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])

    @classmethod
    def from_vector(cls, xi) -> 'TangentPose':
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(v=xi[:3], w=xi[3:])

    @classmethod
    def zero(cls) -> 'TangentPose':
        return cls(v=np.zeros(3), w=np.zeros(3))

    def __repr__(self):
        return f"TangentPose(v={self.v.tolist()}, w={self.w.tolist()})"


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3) acting as X -> R X + t"""
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = _frozen(self.R, (3, 3))
        t = _frozen(self.t, (3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("RigidTransform entries must be finite")
        ortho_err = np.linalg.norm(R.T @ R - np.eye(3))
        if ortho_err > ORTHO_TOL:
            raise InvalidArgumentError(f"R is not orthonormal (|R^T R - I| = {ortho_err:.3e})")
        det = np.linalg.det(R)
        if abs(det - 1.0) > ORTHO_TOL:
            raise InvalidArgumentError(f"R is not a proper rotation (det = {det:.12f})")
        object.__setattr__(self, 'R', R)
        object.__setattr__(self, 't', t)

    @classmethod
    def identity(cls) -> 'RigidTransform':
        return cls(R=np.eye(3), t=np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> 'RigidTransform':
        M = np.asarray(M, dtype=float)
        return cls(R=M[:3, :3], t=M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def __matmul__(self, other: 'RigidTransform') -> 'RigidTransform':
        return compose(self, other)

    def __repr__(self):
        return f"RigidTransform(R={self.R.tolist()}, t={self.t.tolist()})"


def _coefficients(theta: float):
    """A = sin(th)/th, B = (1-cos(th))/th^2, C = (th-sin(th))/th^3"""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta ** 2, (theta - s) / theta ** 3


def _exp_parts(xi: np.ndarray):
    """Rotation matrix and left Jacobian V(w) for a 6-vector"""
    w = xi[3:]
    theta = float(np.linalg.norm(w))
    A, B, C = _coefficients(theta)
    W = skew(w)
    W2 = W @ W
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    return R, V


def exp_vector(xi) -> RigidTransform:
    """exp_map on a raw 6-vector"""
    xi = np.asarray(xi, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise InvalidArgumentError(f"Tangent vector must be finite, got {xi.tolist()}")
    R, V = _exp_parts(xi)
    return RigidTransform(R=R, t=V @ xi[:3])


def exp_map(p: TangentPose) -> RigidTransform:
    """
    Exponential map se(3) -> SE(3)

    Rotation by Rodrigues' formula, translation t = V(w) v.
    """
    return exp_vector(p.vector)


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in [0, pi], accurate near zero"""
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(math.atan2(s, c))


def log_map(T: RigidTransform) -> TangentPose:
    """Logarithm SE(3) -> se(3), canonical chart |w| < pi"""
    R = T.R
    half_vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(half_vee))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)

    if theta > math.pi - PI_MARGIN:
        raise DegenerateRotationError(
            f"Rotation angle {theta:.9f} rad is too close to pi for a unique logarithm")

    if theta < SMALL_ANGLE:
        w = half_vee * (1.0 + theta * theta / 6.0)
    else:
        w = half_vee * (theta / s)

    _, V = _exp_parts(np.concatenate([np.zeros(3), w]))
    v = np.linalg.solve(V, T.t)
    return TangentPose(v=v, w=w)


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    return RigidTransform(R=A.R @ B.R, t=A.R @ B.t + A.t)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.R.T
    return RigidTransform(R=Rt, t=-(Rt @ T.t))


def apply(T: RigidTransform, X) -> np.ndarray:
    """R X + t for a 3-vector or an (N, 3) array of points"""
    X = np.asarray(X, dtype=float)
    return X @ T.R.T + T.t


def hat(xi) -> np.ndarray:
    """4x4 twist matrix of a 6-vector"""
    xi = np.asarray(xi, dtype=float).reshape(6)
    M = np.zeros((4, 4))
    M[:3, :3] = skew(xi[3:])
    M[:3, 3] = xi[:3]
    return M


def vee(M: np.ndarray) -> np.ndarray:
    return np.array([M[0, 3], M[1, 3], M[2, 3], M[2, 1], M[0, 2], M[1, 0]])


_BASIS = [hat(e) for e in np.eye(6)]


def right_jacobian(xi) -> np.ndarray:
    """
    Right Jacobian of the exponential map at xi

    Column i is vee(exp(xi)^-1 d exp(xi)/d xi_i), so that
    exp(xi + d) ~= exp(xi) exp(J_r d) for small d.
    """
    A = hat(xi)
    J = np.empty((6, 6))
    for i, E in enumerate(_BASIS):
        T, L = expm_frechet(A, E)
        J[:, i] = vee(_inverse_matrix(T) @ L)
    return J


def _inverse_matrix(M: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    Rt = M[:3, :3].T
    out[:3, :3] = Rt
    out[:3, 3] = -Rt @ M[:3, 3]
    return out


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w), Hamilton convention, w >= 0"""
    q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    if q[3] < 0:
        q = -q
    # map -0.0 to 0.0
    return q + 0.0


def matrix_from_quat(q) -> np.ndarray:
    return Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix()


def random_tangent(rng: np.random.Generator, max_angle: float = 3.0,
                   max_translation: float = 1.0,
                   min_angle: float = 0.0) -> TangentPose:
    """Random canonical tangent with |w| in [min_angle, max_angle]"""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(min_angle, max_angle)
    v = rng.uniform(-max_translation, max_translation, size=3)
    return TangentPose(v=v, w=axis * angle)
