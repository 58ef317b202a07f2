"""
Synthetic stereo scene simulator
Exact depth, optical flow, parallax flow, textures, masks and ground-truth
poses for breathing, scanning and deforming scenarios

The surface is a graph over the normalized image coordinates (xi, eta) of
camera 0, which is also the world frame:

    S(xi, eta) = Z(xi, eta) * (xi, eta, 1)

Breathing moves S along the optical axis by the sinusoidal depth change and
drags it sideways by a fixed fraction of that change, so the lateral world
coordinates stay put when the drift is zero. A deforming patch adds a
smooth bump times a displacement vector. A pixel of camera t is rendered by
solving for the surface coordinates that project onto it, so depth and
flow are exact up to the Newton tolerance.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from . import lie
from .camera import EPS_Z, StereoRig, default_rig, normalize_depth
from .config import MaskConfig, RunConfig
from .errors import InvalidArgumentError, SpecInvalidError
from .fields import (DepthMap, FlowField, FramePair, ParallaxFlow, PixelMask,
                     make_frame_pair, pixel_grid, polygon_mask)
from .trajeval import Trajectory

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_ITERS = 40
NEWTON_STEP = 1e-7
# Normalized 3D motion above this marks a pixel as deformed
LABEL_TOL = 1e-5

LABEL_RIGID, LABEL_BREATHING, LABEL_PATCH = 0, 1, 2


@dataclass(frozen=True)
class SurfaceSpec:
    kind: str = 'heightfield'
    depth: float = 0.1
    tilt: Tuple[float, float] = (0.0, 0.0)
    radius: float = 0.15
    seed: int = 0
    amplitude: float = 0.05
    smoothness: float = 0.3

    def __post_init__(self):
        if self.kind not in ('plane', 'sphere_patch', 'heightfield'):
            raise SpecInvalidError(f"Unknown surface kind {self.kind!r}")
        if not self.depth > 0:
            raise SpecInvalidError("Surface depth must be positive")
        if not 0 <= self.amplitude < 1:
            raise SpecInvalidError("Heightfield amplitude must lie in [0, 1)")


@dataclass(frozen=True)
class CameraPath:
    """
    Per-frame camera motion in scene units / radians

    With a period the step is modulated by cos(2 pi t / period) so the
    camera sways instead of drifting away.
    """
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    period: Optional[float] = None

    @property
    def is_static(self) -> bool:
        return not (any(self.translation) or any(self.rotation))

    def step(self, t: int) -> lie.TangentPose:
        """Motion of frame t relative to frame t-1"""
        k = 1.0 if self.period is None else np.cos(2 * np.pi * t / self.period)
        return lie.TangentPose(v=np.asarray(self.translation) * k, w=np.asarray(self.rotation) * k)


@dataclass(frozen=True)
class Breathing:
    """
    Sinusoidal depth change inside a feathered disk (pixels)

    A point at depth Z moves by dz = Z * a * sin(2 pi t / period) * mask along
    the optical axis and by lateral * dz in world X and Y.
    """
    amplitude: float = 0.02
    period: float = 30.0
    center: Optional[Tuple[float, float]] = None
    radius: Optional[float] = None
    falloff: float = 10.0
    lateral: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not 0 <= self.amplitude < 0.1:
            raise SpecInvalidError(f"Breathing amplitude {self.amplitude} outside [0, 0.1)")
        if not self.period > 0:
            raise SpecInvalidError("Breathing period must be positive")
        if len(self.lateral) != 2 or not np.all(np.isfinite(self.lateral)):
            raise SpecInvalidError(f"Breathing drift must be two finite numbers, got {self.lateral}")


@dataclass(frozen=True)
class PatchDeformation:
    center: Tuple[float, float]
    radius: float
    displacement: Tuple[float, float, float]
    period: float = 20.0


@dataclass(frozen=True)
class TextureSpec:
    seed: int = 0
    cell: float = 0.04
    specular_spots: int = 3
    spot_sigma: float = 1.5


@dataclass(frozen=True)
class NoiseSpec:
    depth_sigma: float = 0.0
    flow_sigma: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class SceneSpec:
    rig: StereoRig
    surface: SurfaceSpec = field(default_factory=SurfaceSpec)
    path: CameraPath = field(default_factory=CameraPath)
    breathing: Optional[Breathing] = None
    patch: Optional[PatchDeformation] = None
    texture: TextureSpec = field(default_factory=TextureSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    n_frames: int = 150
    instrument_polygon: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        if self.n_frames < 2:
            raise SpecInvalidError(f"A sequence needs at least 2 frames, got {self.n_frames}")


@dataclass(frozen=True, eq=False)
class SyntheticFrame:
    image: np.ndarray
    depth_raw: np.ndarray
    depth: DepthMap
    flow: FlowField
    parallax: ParallaxFlow
    mask: PixelMask
    label: np.ndarray


@dataclass(frozen=True, eq=False)
class SyntheticSequence:
    frames: List[SyntheticFrame]
    gt_relative: List[lie.TangentPose]
    gt_trajectory: Trajectory
    rig: StereoRig

    def __len__(self):
        return len(self.frames)

    def pair(self, t: int, mask_cfg: Optional[MaskConfig] = None) -> FramePair:
        """FramePair between frames t-1 and t"""
        if not 1 <= t < len(self.frames):
            raise InvalidArgumentError(f"No pair ending at frame {t}")
        cur, prev = self.frames[t], self.frames[t - 1]
        return make_frame_pair(self.rig, cur.depth, prev.depth, cur.flow, masks=[cur.mask],
                               parallax_t=cur.parallax, parallax_prev=prev.parallax,
                               image_t=cur.image, image_prev=prev.image, mask_cfg=mask_cfg)

    def pairs(self, mask_cfg: Optional[MaskConfig] = None) -> Iterator[Tuple[int, FramePair]]:
        for t in range(1, len(self.frames)):
            yield t, self.pair(t, mask_cfg)

    def dataset(self, mask_cfg: Optional[MaskConfig] = None) -> List[Tuple[FramePair, lie.TangentPose]]:
        """(pair, ground-truth relative pose) samples for weight fitting"""
        return [(pair, self.gt_relative[t - 1]) for t, pair in self.pairs(mask_cfg)]


def feathered_disk(shape, center, radius: Optional[float], falloff: float) -> np.ndarray:
    """1 inside the disk, smoothstep down to 0 over falloff pixels"""
    return _disk(pixel_grid(shape), center, radius, falloff)


def _disk(uv: np.ndarray, center, radius, falloff) -> np.ndarray:
    if radius is None:
        return np.ones(uv.shape[:-1])
    r = np.hypot(uv[..., 0] - center[0], uv[..., 1] - center[1])
    if falloff <= 0:
        return (r <= radius).astype(float)
    s = np.clip((radius + falloff - r) / falloff, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def breathing_deformation(base_depth, amplitude: float, period: float, frame_idx,
                          spatial_mask=1.0) -> np.ndarray:
    """
    d' = d * (1 + a * sin(2 pi frame / period) * mask)

    Args:
        spatial_mask: weights in [0, 1], see feathered_disk
    """
    if not 0 <= amplitude < 0.1:
        raise InvalidArgumentError(f"Breathing amplitude {amplitude} outside [0, 0.1)")
    if not period > 0:
        raise InvalidArgumentError("Breathing period must be positive")
    phase = np.sin(2.0 * np.pi * frame_idx / period)
    return np.asarray(base_depth, dtype=float) * (1.0 + amplitude * phase * np.asarray(spatial_mask))


class _Scene:
    """Evaluates the deformed surface of a SceneSpec"""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.rig = spec.rig
        s = spec.surface
        if s.kind == 'heightfield':
            rng = np.random.default_rng([s.seed, 1])
            n = 4
            angle = rng.uniform(0, 2 * np.pi, n)
            freq = rng.uniform(0.5, 1.5, n) * 2 * np.pi / s.smoothness
            self._kx = np.cos(angle) * freq
            self._ky = np.sin(angle) * freq
            self._phase = rng.uniform(0, 2 * np.pi, n)
            amps = rng.uniform(0.5, 1.0, n)
            self._amps = amps / amps.sum()

    def ray_depth(self, xi, eta) -> np.ndarray:
        s = self.spec.surface
        if s.kind == 'plane':
            denom = 1.0 + s.tilt[0] * xi + s.tilt[1] * eta
            return np.where(denom > 0, s.depth / np.where(denom > 0, denom, 1.0), np.nan)
        if s.kind == 'sphere_patch':
            c = s.depth + s.radius
            n2 = xi * xi + eta * eta + 1.0
            disc = c * c - n2 * (c * c - s.radius * s.radius)
            with np.errstate(invalid='ignore'):
                return (c - np.sqrt(disc)) / n2
        h = sum(a * np.sin(kx * xi + ky * eta + ph)
                for a, kx, ky, ph in zip(self._amps, self._kx, self._ky, self._phase))
        return s.depth * (1.0 + s.amplitude * h)

    def camera0_pixels(self, xi, eta) -> np.ndarray:
        r = self.rig
        return np.stack([r.fx * xi + r.cx, r.fy * eta + r.cy], axis=-1)

    def patch_offset(self, xi, eta, t) -> np.ndarray:
        p = self.spec.patch
        if p is None:
            return np.zeros(np.shape(xi) + (3,))
        uv = self.camera0_pixels(xi, eta)
        r2 = ((uv[..., 0] - p.center[0]) ** 2 + (uv[..., 1] - p.center[1]) ** 2) / p.radius ** 2
        bump = np.clip(1.0 - r2, 0.0, None) ** 3
        b = np.sin(2 * np.pi * t / p.period)
        return (b * bump)[..., None] * np.asarray(p.displacement)

    def points(self, xi, eta, t) -> np.ndarray:
        Z = self.ray_depth(xi, eta)
        S = np.stack([Z * xi, Z * eta, Z], axis=-1)
        br = self.spec.breathing
        if br is not None:
            center = br.center if br.center is not None else (self.rig.cx, self.rig.cy)
            m = _disk(self.camera0_pixels(xi, eta), center, br.radius, br.falloff)
            dz = breathing_deformation(Z, br.amplitude, br.period, t, m) - Z
            S = S + dz[..., None] * np.array([br.lateral[0], br.lateral[1], 1.0])
        return S + self.patch_offset(xi, eta, t)


def _project(rig: StereoRig, q: np.ndarray):
    z = q[..., 2]
    zs = np.where(z > EPS_Z, z, 1.0)
    return rig.fx * q[..., 0] / zs + rig.cx, rig.fy * q[..., 1] / zs + rig.cy, z


def _initial_coords(rig: StereoRig, T_wc: lie.RigidTransform, depth: float, u, v):
    xi = (u - rig.cx) / rig.fx
    eta = (v - rig.cy) / rig.fy
    if np.array_equal(T_wc.R, np.eye(3)) and not np.any(T_wc.t):
        return xi, eta
    X = lie.apply(T_wc, np.stack([xi * depth, eta * depth, np.full_like(xi, depth)], axis=-1))
    return X[:, 0] / X[:, 2], X[:, 1] / X[:, 2]


def _solve_coords(scene: _Scene, T_cw: lie.RigidTransform, t: int, xi, eta, u, v):
    """Newton on (xi, eta) so that camera t sees the surface point at (u, v)"""
    rig = scene.rig

    def F(a, b, ua, va):
        pu, pv, z = _project(rig, lie.apply(T_cw, scene.points(a, b, t)))
        return pu - ua, pv - va, z

    xi, eta = xi.copy(), eta.copy()
    active = np.arange(len(xi))
    h = NEWTON_STEP
    for _ in range(NEWTON_ITERS):
        a, b = xi[active], eta[active]
        fu, fv, z = F(a, b, u[active], v[active])
        if not (np.all(np.isfinite(fu)) and np.all(np.isfinite(fv))) or np.any(z <= EPS_Z):
            raise SpecInvalidError(f"Frame {t}: some pixel rays miss the surface")
        err = np.maximum(np.abs(fu), np.abs(fv))
        todo = err > NEWTON_TOL
        if not todo.any():
            return xi, eta
        active, a, b, fu, fv = active[todo], a[todo], b[todo], fu[todo], fv[todo]
        ua, va = u[active], v[active]
        up_u, up_v, _ = F(a + h, b, ua, va)
        dn_u, dn_v, _ = F(a - h, b, ua, va)
        j11, j21 = (up_u - dn_u) / (2 * h), (up_v - dn_v) / (2 * h)
        up_u, up_v, _ = F(a, b + h, ua, va)
        dn_u, dn_v, _ = F(a, b - h, ua, va)
        j12, j22 = (up_u - dn_u) / (2 * h), (up_v - dn_v) / (2 * h)
        det = j11 * j22 - j12 * j21
        if np.any(np.abs(det) < 1e-12) or not np.all(np.isfinite(det)):
            raise SpecInvalidError(f"Frame {t}: surface is seen edge-on")
        xi[active] = a - (j22 * fu - j12 * fv) / det
        eta[active] = b - (-j21 * fu + j11 * fv) / det
    raise SpecInvalidError(f"Frame {t}: surface intersection did not converge")


def _texture_grid(scene: _Scene):
    tex = scene.spec.texture
    rig = scene.rig
    margin = 0.5
    lo = np.array([-rig.cx / rig.fx - margin, -rig.cy / rig.fy - margin])
    hi = np.array([(rig.width - 1 - rig.cx) / rig.fx + margin, (rig.height - 1 - rig.cy) / rig.fy + margin])
    n = np.ceil((hi - lo) / tex.cell).astype(int) + 4
    grid = np.random.default_rng([tex.seed, 2]).uniform(0.0, 1.0, size=(n[1], n[0]))
    return grid, lo


def _render_image(scene: _Scene, grid, lo, xi, eta, spots, instrument) -> np.ndarray:
    H, W = scene.rig.shape
    tex = scene.spec.texture
    coords = [((eta - lo[1]) / tex.cell).reshape(H, W), ((xi - lo[0]) / tex.cell).reshape(H, W)]
    noise = np.clip(ndimage.map_coordinates(grid, coords, order=3, mode='mirror'), 0.0, 1.0)
    base = 0.25 + 0.5 * noise
    image = np.stack([0.9 * base + 0.05, 0.55 * base + 0.05, 0.5 * base + 0.05], axis=-1)
    uv = pixel_grid((H, W))
    for c in spots:
        blob = np.exp(-((uv[..., 0] - c[0]) ** 2 + (uv[..., 1] - c[1]) ** 2) / (2 * tex.spot_sigma ** 2))
        image = np.maximum(image, blob[..., None])
    if instrument is not None:
        image[instrument] = 0.15
    return np.clip(image, 0.0, 1.0)


def render_sequence(spec: SceneSpec, progress: bool = False) -> SyntheticSequence:
    """
    Render every frame of a scene

    Raises:
        SpecInvalidError: if a ray misses the surface or a depth leaves (0, d_max]
    """
    scene = _Scene(spec)
    rig = spec.rig
    H, W = rig.shape
    uv = pixel_grid((H, W)).reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]

    steps = [spec.path.step(t) for t in range(1, spec.n_frames)]
    poses = [lie.RigidTransform.identity()]
    for st in steps:
        poses.append(lie.compose(poses[-1], lie.exp_map(st)))

    instrument = None
    if spec.instrument_polygon is not None:
        instrument = polygon_mask((H, W), spec.instrument_polygon).data
    mask = PixelMask(instrument) if instrument is not None else PixelMask.empty((H, W))

    spot_rng = np.random.default_rng([spec.texture.seed, 3])
    spots = [(int(spot_rng.integers(2, W - 2)), int(spot_rng.integers(2, H - 2)))
             for _ in range(spec.texture.specular_spots)] if W > 4 and H > 4 else []
    grid, lo = _texture_grid(scene)

    frames = []
    for t in tqdm(range(spec.n_frames), desc="Rendering frames", disable=not progress):
        T_wc = poses[t]
        T_cw = lie.inverse(T_wc)
        xi0, eta0 = _initial_coords(rig, T_wc, spec.surface.depth, u, v)
        xi, eta = _solve_coords(scene, T_cw, t, xi0, eta0, u, v)

        M_t = scene.points(xi, eta, t)
        q = lie.apply(T_cw, M_t)
        depth = q[:, 2]
        if np.any(depth <= 0) or np.any(depth > rig.d_max):
            raise SpecInvalidError(
                f"Frame {t}: depth range [{depth.min():.4g}, {depth.max():.4g}] leaves (0, {rig.d_max}]")
        pu, pv, _ = _project(rig, q)

        if t == 0:
            flow = np.zeros((H * W, 2))
            label = np.zeros(H * W, dtype=np.int8)
        else:
            M_prev = scene.points(xi, eta, t - 1)
            q_prev = lie.apply(lie.inverse(poses[t - 1]), M_prev)
            if np.any(q_prev[:, 2] <= EPS_Z):
                raise SpecInvalidError(f"Frame {t}: surface behind camera {t - 1}")
            qu, qv, _ = _project(rig, q_prev)
            flow = np.stack([qu - pu, qv - pv], axis=-1)
            motion = np.linalg.norm(M_t - M_prev, axis=1) / rig.d_max
            patch_motion = np.linalg.norm(scene.patch_offset(xi, eta, t) - scene.patch_offset(xi, eta, t - 1),
                                          axis=1) / rig.d_max
            label = np.where(patch_motion > LABEL_TOL, LABEL_PATCH,
                             np.where(motion > LABEL_TOL, LABEL_BREATHING, LABEL_RIGID)).astype(np.int8)

        noise_rng = np.random.default_rng([spec.noise.seed, t])
        depth_raw = depth.reshape(H, W)
        if spec.noise.depth_sigma > 0:
            depth_raw = depth_raw + noise_rng.normal(0.0, spec.noise.depth_sigma, size=(H, W))
        # stereo depth and disparity share one measurement
        parallax = np.stack([-rig.fx * rig.baseline / depth_raw, np.zeros((H, W))], axis=-1)
        flow = flow.reshape(H, W, 2)
        if spec.noise.flow_sigma > 0:
            if t > 0:
                flow = flow + noise_rng.normal(0.0, spec.noise.flow_sigma, size=(H, W, 2))
            parallax[..., 0] += noise_rng.normal(0.0, spec.noise.flow_sigma, size=(H, W))

        image = _render_image(scene, grid, lo, xi, eta, spots, instrument)
        frames.append(SyntheticFrame(image=image, depth_raw=depth_raw, depth=normalize_depth(rig, depth_raw),
                                     flow=FlowField(flow), parallax=ParallaxFlow(parallax),
                                     mask=mask, label=label.reshape(H, W)))

    gt_relative = [lie.TangentPose(v=st.v / rig.d_max, w=st.w) for st in steps]
    trajectory = Trajectory(stamps=np.arange(spec.n_frames, dtype=float), poses=poses)
    logger.info("Rendered %d frames at %dx%d", spec.n_frames, W, H)
    return SyntheticSequence(frames=frames, gt_relative=gt_relative, gt_trajectory=trajectory, rig=rig)


def scenario_preset(name: str, seed: int = 0, rig: Optional[StereoRig] = None,
                    n_frames: int = 150) -> SceneSpec:
    """
    Deterministic scene for one of the three scenario categories

    breathing: static camera, a central disk of tissue rising and drifting
        sideways, 0.5 to 3 px of flow per frame at 320x256
    scanning: swaying camera over faintly breathing tissue, with stereo
        depth noise of 3 mm
    deforming: static camera, faint breathing plus a patch pushed back and
        forth
    """
    rig = rig or default_rig()
    W, H = rig.width, rig.height
    surface = SurfaceSpec(kind='heightfield', depth=rig.d_max / 2, seed=seed)
    breathing = Breathing(amplitude=0.03, period=20.0, center=(rig.cx, rig.cy),
                          radius=0.3 * W, falloff=0.1 * W, lateral=(0.5, 0.25))
    texture = TextureSpec(seed=seed)
    base = SceneSpec(rig=rig, surface=surface, breathing=breathing, texture=texture,
                     noise=NoiseSpec(seed=seed), n_frames=n_frames)
    if name == 'breathing':
        return base
    if name == 'scanning':
        return replace(base, breathing=replace(breathing, amplitude=0.002),
                       path=CameraPath(translation=(0.0015, 0.0005, 0.0005),
                                       rotation=(0.002, -0.003, 0.001), period=60.0),
                       noise=NoiseSpec(depth_sigma=0.003, seed=seed))
    if name == 'deforming':
        return replace(base, breathing=replace(breathing, amplitude=0.005),
                       patch=PatchDeformation(center=(0.65 * W, 0.5 * H), radius=0.15 * W,
                                              displacement=(0.006, 0.0, -0.004), period=20.0))
    raise InvalidArgumentError(f"Unknown scenario preset {name!r}")


def spec_from_config(cfg: RunConfig) -> SceneSpec:
    """Preset named in the [scenario] section with its overrides applied"""
    sc = cfg.scenario
    spec = scenario_preset(sc.preset, seed=sc.seed, rig=cfg.rig, n_frames=sc.n_frames)
    surface = spec.surface
    if sc.surface is not None:
        surface = replace(surface, kind=sc.surface)
    if sc.base_depth is not None:
        surface = replace(surface, depth=sc.base_depth)
    if sc.heightfield_amplitude is not None:
        surface = replace(surface, amplitude=sc.heightfield_amplitude)
    if sc.heightfield_smoothness is not None:
        surface = replace(surface, smoothness=sc.heightfield_smoothness)
    spec = replace(spec, surface=surface)

    if sc.translation is not None or sc.rotation is not None:
        path = spec.path
        spec = replace(spec, path=CameraPath(
            translation=tuple(sc.translation) if sc.translation is not None else path.translation,
            rotation=tuple(sc.rotation) if sc.rotation is not None else path.rotation,
            period=path.period))
    if spec.breathing is not None:
        if sc.breathing_amplitude is not None:
            spec = replace(spec, breathing=replace(spec.breathing, amplitude=sc.breathing_amplitude))
        if sc.breathing_period is not None:
            spec = replace(spec, breathing=replace(spec.breathing, period=sc.breathing_period))
    noise = spec.noise
    if sc.depth_noise is not None:
        noise = replace(noise, depth_sigma=sc.depth_noise)
    if sc.flow_noise is not None:
        noise = replace(noise, flow_sigma=sc.flow_noise)
    spec = replace(spec, noise=noise)
    if sc.instrument_polygon is not None:
        pts = sc.instrument_polygon
        spec = replace(spec, instrument_polygon=tuple(zip(pts[0::2], pts[1::2])))
    if sc.specular_spots is not None:
        spec = replace(spec, texture=replace(spec.texture, specular_spots=sc.specular_spots))
    return spec
