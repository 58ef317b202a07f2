"""
File formats
GVR1 rasters, text trajectories, INI run configuration and the sequence
directory layout

GVR1 layout (little-endian):
    bytes 0-3    magic b"GVR1"
    bytes 4-19   uint32 width, height, channels, flags (bit 0: validity plane)
    payload      channels planes of height x width float32, row-major
    [validity]   height x width uint8 (0 or 1) when flags bit 0 is set
"""

import configparser
import logging
import os
import re
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from . import lie
from .camera import StereoRig, depth_from_parallax, normalize_depth
from .config import SECTIONS, MaskConfig, RunConfig
from .errors import (ConfigError, RasterFormatError, SequenceLayoutError,
                     TrajectoryFormatError, UsageError)
from .fields import (DepthMap, FlowField, FramePair, ParallaxFlow, PixelMask, WeightMap,
                     make_frame_pair)
from .trajeval import Trajectory

logger = logging.getLogger(__name__)

MAGIC = b'GVR1'
HEADER = np.dtype([('magic', 'S4'), ('width', '<u4'), ('height', '<u4'),
                   ('channels', '<u4'), ('flags', '<u4')])
HEADER_SIZE = HEADER.itemsize
FLAG_VALIDITY = 1

QUAT_NORM_TOL = 1e-4
FRAME_KINDS = ('depth', 'flow', 'parallax', 'mask', 'img', 'label')
FRAME_FILE = re.compile(r'^(\d{6})\.(depth|flow|parallax|mask|img|label)\.gvr$')


@dataclass(frozen=True, eq=False)
class Raster:
    """float32 data of shape (H, W) or (H, W, C) with an optional validity raster"""
    data: np.ndarray
    valid: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[:2]


# Rasters

def write_raster(path: str, data: np.ndarray, valid: Optional[np.ndarray] = None) -> str:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[..., None]
    if data.ndim != 3:
        raise RasterFormatError(f"Raster must be (H, W) or (H, W, C), got {data.shape}")
    H, W, C = data.shape
    planes = np.ascontiguousarray(np.moveaxis(data, 2, 0).astype('<f4'))
    check = np.ones((H, W), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if check.shape != (H, W):
        raise RasterFormatError(f"Validity raster {check.shape} does not match ({H}, {W})")
    if not np.all(np.isfinite(planes[:, check])):
        raise RasterFormatError(f"{path}: non-finite values inside the valid region")

    header = np.zeros(1, dtype=HEADER)
    header[0] = (MAGIC, W, H, C, FLAG_VALIDITY if valid is not None else 0)
    try:
        with open(path, 'wb') as f:
            f.write(header.tobytes())
            f.write(planes.tobytes())
            if valid is not None:
                f.write(check.astype(np.uint8).tobytes())
    except OSError as exc:
        raise RasterFormatError(f"{path}: cannot write raster: {exc.strerror or exc}")
    return path


def read_raster(path: str) -> Raster:
    """
    Strict GVR1 reader; every format error names the byte offset

    Returns data as float32, shaped (H, W) for single-channel files.
    """
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as exc:
        raise RasterFormatError(f"{path}: cannot read raster: {exc.strerror or exc}")
    if len(blob) < HEADER_SIZE:
        raise RasterFormatError(f"{path}: truncated header at byte {len(blob)}")
    header = np.frombuffer(blob, dtype=HEADER, count=1)[0]
    if header['magic'] != MAGIC:
        raise RasterFormatError(f"{path}: bad magic {bytes(header['magic'])!r} at byte 0")
    W, H, C, flags = (int(header[k]) for k in ('width', 'height', 'channels', 'flags'))
    if flags & ~FLAG_VALIDITY:
        raise RasterFormatError(f"{path}: unknown flag bits {flags:#x} at byte 16")
    if C == 0:
        raise RasterFormatError(f"{path}: zero channels at byte 12")

    n = W * H
    payload_end = HEADER_SIZE + 4 * C * n
    has_valid = bool(flags & FLAG_VALIDITY)
    expected = payload_end + (n if has_valid else 0)
    if len(blob) < expected:
        raise RasterFormatError(f"{path}: truncated payload at byte {len(blob)}, expected {expected} bytes")
    if len(blob) > expected:
        raise RasterFormatError(f"{path}: trailing data at byte {expected}")

    planes = np.frombuffer(blob, dtype='<f4', count=C * n, offset=HEADER_SIZE).reshape(C, H, W)
    valid = None
    check = np.ones((H, W), dtype=bool)
    if has_valid:
        plane = np.frombuffer(blob, dtype=np.uint8, count=n, offset=payload_end)
        bad = np.flatnonzero(plane > 1)
        if bad.size:
            raise RasterFormatError(f"{path}: validity byte {plane[bad[0]]} at byte {payload_end + bad[0]}")
        valid = plane.reshape(H, W).astype(bool)
        check = valid

    bad = np.flatnonzero(~np.isfinite(planes) & check[None])
    if bad.size:
        raise RasterFormatError(f"{path}: non-finite value inside the valid region at byte "
                                f"{HEADER_SIZE + 4 * bad[0]}")

    data = np.moveaxis(planes, 0, 2).astype(np.float32)
    if C == 1:
        data = data[..., 0]
    return Raster(data=data, valid=valid)


# Trajectories

def _g(x: float) -> str:
    return '%.17g' % (float(x) + 0.0)


def write_trajectory(path: str, traj: Trajectory) -> str:
    """One line per pose: stamp tx ty tz qx qy qz qw"""
    try:
        with open(path, 'w') as f:
            for stamp, T in zip(traj.stamps, traj.poses):
                q = lie.quat_from_matrix(T.R)
                f.write(' '.join(_g(x) for x in (stamp, *T.t, *q)) + '\n')
    except OSError as exc:
        raise TrajectoryFormatError(f"{path}: cannot write trajectory: {exc.strerror or exc}")
    return path


def read_trajectory(path: str) -> Trajectory:
    stamps: List[float] = []
    poses: List[lie.RigidTransform] = []
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as exc:
        raise TrajectoryFormatError(f"{path}: cannot read trajectory: {exc.strerror or exc}")
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith('#'):
            continue
        fields = text.split()
        if len(fields) != 8:
            raise TrajectoryFormatError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            values = np.array([float(x) for x in fields])
        except ValueError:
            raise TrajectoryFormatError(f"{path}:{lineno}: non-numeric field")
        if not np.all(np.isfinite(values)):
            raise TrajectoryFormatError(f"{path}:{lineno}: non-finite value")
        q = values[4:]
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > QUAT_NORM_TOL:
            raise TrajectoryFormatError(f"{path}:{lineno}: quaternion norm {norm:.8f} is not 1")
        if stamps and values[0] <= stamps[-1]:
            raise TrajectoryFormatError(f"{path}:{lineno}: stamp {values[0]} does not increase")
        stamps.append(values[0])
        poses.append(lie.RigidTransform(R=lie.matrix_from_quat(q / norm), t=values[1:4]))
    if not poses:
        raise TrajectoryFormatError(f"{path}: no poses")
    return Trajectory(stamps=np.array(stamps), poses=poses)


# Run configuration

def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ', '.join(_g(v) for v in value)
    if isinstance(value, float):
        return _g(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def parse_overrides(pairs: Mapping[str, str]) -> Dict[str, Dict[str, str]]:
    """{'solver.max_iters': '50'} -> {'solver': {'max_iters': '50'}}"""
    out: Dict[str, Dict[str, str]] = {}
    for key, value in pairs.items():
        section, dot, name = key.partition('.')
        if not dot or not section or not name:
            raise UsageError(f"Override {key!r} must look like section.key")
        out.setdefault(section, {})[name] = value
    return out


def read_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Parse an INI run configuration and apply section.key overrides

    Raises:
        ConfigError: missing file, unknown section or key, or invalid value
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"Config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}")
    raw: Dict[str, Dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    for section, values in parse_overrides(overrides or {}).items():
        raw.setdefault(section, {}).update(values)
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config section(s): {', '.join(unknown)}")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc))


def write_run_config(path: str, cfg: RunConfig, sections=SECTIONS) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    dumped = cfg.model_dump()
    for section in sections:
        parser[section] = {k: _format_value(v) for k, v in dumped[section].items() if v is not None}
    try:
        with open(path, 'w') as f:
            parser.write(f)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot write config: {exc.strerror or exc}")
    return path


def write_rig(path: str, rig: StereoRig) -> str:
    return write_run_config(path, RunConfig(rig=rig), sections=('rig',))


def read_rig(path: str) -> StereoRig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise SequenceLayoutError(f"{path}: {exc}")
    if parser.sections() != ['rig']:
        raise SequenceLayoutError(f"{path}: expected exactly one [rig] section")
    return read_run_config(path).rig


# Weights

def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise SequenceLayoutError(f"{path}: cannot create directory: {exc.strerror or exc}")


def write_weights(out_dir: str, w2d: WeightMap, w3d: WeightMap) -> Tuple[str, str]:
    _ensure_dir(out_dir)
    p2 = write_raster(os.path.join(out_dir, 'weights_2d.gvr'), w2d.data)
    p3 = write_raster(os.path.join(out_dir, 'weights_3d.gvr'), w3d.data)
    return p2, p3


def read_weights(path_2d: str, path_3d: str, shape: Tuple[int, int]) -> Tuple[WeightMap, WeightMap]:
    maps = []
    for path in (path_2d, path_3d):
        r = read_raster(path)
        if r.data.shape != tuple(shape):
            raise RasterFormatError(f"{path}: weight raster {r.data.shape} does not match {tuple(shape)}")
        maps.append(WeightMap(r.data.astype(float)))
    return maps[0], maps[1]


# Sequence directories

def frame_path(seq_dir: str, t: int, kind: str) -> str:
    return os.path.join(seq_dir, f'{t:06d}.{kind}.gvr')


def write_sequence(seq_dir: str, sequence) -> str:
    """
    Write a SyntheticSequence: rig.cfg, gt.traj and per-frame rasters

    Depth is stored raw in scene units; flow is absent for frame 0.
    """
    _ensure_dir(seq_dir)
    write_rig(os.path.join(seq_dir, 'rig.cfg'), sequence.rig)
    write_trajectory(os.path.join(seq_dir, 'gt.traj'), sequence.gt_trajectory)
    for t, frame in enumerate(sequence.frames):
        raw = frame.depth_raw
        finite = np.isfinite(raw)
        write_raster(frame_path(seq_dir, t, 'depth'), np.where(finite, raw, 0.0),
                     None if finite.all() else finite)
        if t > 0:
            write_raster(frame_path(seq_dir, t, 'flow'), frame.flow.data)
        write_raster(frame_path(seq_dir, t, 'parallax'), frame.parallax.data)
        write_raster(frame_path(seq_dir, t, 'mask'), frame.mask.data.astype(np.float32))
        write_raster(frame_path(seq_dir, t, 'img'), frame.image)
        write_raster(frame_path(seq_dir, t, 'label'), frame.label.astype(np.float32))
    logger.info("Wrote %d frames to %s", len(sequence.frames), seq_dir)
    return seq_dir


@dataclass(frozen=True, eq=False)
class FrameData:
    depth: DepthMap
    depth_raw: np.ndarray
    flow: Optional[FlowField]
    parallax: Optional[ParallaxFlow]
    mask: PixelMask
    image: Optional[np.ndarray]
    label: Optional[np.ndarray]


class SequenceReader:
    """
    Lazy reader of a sequence directory

    Iterating yields (t, FramePair) for t = 1 .. n-1 in index order, loading
    each frame once.
    """

    def __init__(self, seq_dir: str, mask_cfg: Optional[MaskConfig] = None):
        if not os.path.isdir(seq_dir):
            raise SequenceLayoutError(f"Sequence directory not found: {seq_dir}")
        self.seq_dir = seq_dir
        self.mask_cfg = mask_cfg
        rig_path = os.path.join(seq_dir, 'rig.cfg')
        if not os.path.isfile(rig_path):
            raise SequenceLayoutError(f"{seq_dir}: missing rig.cfg")
        self.rig = read_rig(rig_path)

        found: Dict[int, set] = {}
        for name in os.listdir(seq_dir):
            m = FRAME_FILE.match(name)
            if m:
                found.setdefault(int(m.group(1)), set()).add(m.group(2))
        if not found:
            raise SequenceLayoutError(f"{seq_dir}: no frame files")
        n = max(found) + 1
        for t in range(n):
            kinds = found.get(t)
            if kinds is None:
                raise SequenceLayoutError(f"{seq_dir}: missing frame {t:06d}")
            if 'depth' not in kinds and 'parallax' not in kinds:
                raise SequenceLayoutError(f"{seq_dir}: frame {t:06d} has neither depth nor parallax")
            if t > 0 and 'flow' not in kinds:
                raise SequenceLayoutError(f"{seq_dir}: frame {t:06d} is missing its flow")
        self._kinds = found
        self.n_frames = n

        gt_path = os.path.join(seq_dir, 'gt.traj')
        self.gt_trajectory = read_trajectory(gt_path) if os.path.isfile(gt_path) else None
        if self.gt_trajectory is not None and len(self.gt_trajectory) != n:
            raise SequenceLayoutError(
                f"{seq_dir}: gt.traj has {len(self.gt_trajectory)} poses for {n} frames")

    def __len__(self):
        return self.n_frames

    @property
    def stamps(self) -> np.ndarray:
        if self.gt_trajectory is not None:
            return self.gt_trajectory.stamps
        return np.arange(self.n_frames, dtype=float)

    def _load(self, t: int, kind: str) -> Optional[Raster]:
        if kind not in self._kinds[t]:
            return None
        r = read_raster(frame_path(self.seq_dir, t, kind))
        if r.shape != self.rig.shape:
            raise SequenceLayoutError(
                f"{self.seq_dir}: frame {t:06d} {kind} is {r.shape}, rig expects {self.rig.shape}")
        return r

    def load_frame(self, t: int) -> FrameData:
        if not 0 <= t < self.n_frames:
            raise SequenceLayoutError(f"{self.seq_dir}: no frame {t}")
        depth_r = self._load(t, 'depth')
        parallax_r = self._load(t, 'parallax')
        parallax = ParallaxFlow(parallax_r.data.astype(float)) if parallax_r is not None else None
        if depth_r is not None:
            raw = depth_r.data.astype(float)
            if depth_r.valid is not None:
                raw = np.where(depth_r.valid, raw, np.nan)
        else:
            raw = depth_from_parallax(self.rig, parallax)
        flow_r = self._load(t, 'flow')
        mask_r = self._load(t, 'mask')
        img_r = self._load(t, 'img')
        label_r = self._load(t, 'label')
        mask = PixelMask(mask_r.data > 0.5) if mask_r is not None else PixelMask.empty(self.rig.shape)
        image = None
        if img_r is not None:
            if img_r.data.ndim != 3:
                raise SequenceLayoutError(f"{self.seq_dir}: frame {t:06d} image must have channels")
            image = img_r.data.astype(float)
        return FrameData(depth=normalize_depth(self.rig, raw), depth_raw=raw,
                         flow=FlowField(flow_r.data.astype(float)) if flow_r is not None else None,
                         parallax=parallax, mask=mask, image=image,
                         label=label_r.data.astype(np.int8) if label_r is not None else None)

    def make_pair(self, cur: FrameData, prev: FrameData) -> FramePair:
        return make_frame_pair(self.rig, cur.depth, prev.depth, cur.flow, masks=[cur.mask],
                               parallax_t=cur.parallax, parallax_prev=prev.parallax,
                               image_t=cur.image, image_prev=prev.image, mask_cfg=self.mask_cfg)

    def pairs(self) -> Iterator[Tuple[int, FramePair]]:
        prev = self.load_frame(0)
        for t in range(1, self.n_frames):
            cur = self.load_frame(t)
            yield t, self.make_pair(cur, prev)
            prev = cur

    __iter__ = pairs


def read_sequence(seq_dir: str, mask_cfg: Optional[MaskConfig] = None):
    """Load a whole sequence directory back into a SyntheticSequence"""
    from .solver import relative_poses
    from .synth import SyntheticFrame, SyntheticSequence

    reader = SequenceReader(seq_dir, mask_cfg)
    if reader.gt_trajectory is None:
        raise SequenceLayoutError(f"{seq_dir}: gt.traj is required to rebuild a sequence")
    frames = []
    for t in range(reader.n_frames):
        f = reader.load_frame(t)
        H, W = reader.rig.shape
        frames.append(SyntheticFrame(
            image=f.image if f.image is not None else np.zeros((H, W, 3)),
            depth_raw=f.depth_raw, depth=f.depth,
            flow=f.flow if f.flow is not None else FlowField.zeros((H, W)),
            parallax=f.parallax if f.parallax is not None else ParallaxFlow(np.zeros((H, W, 2))),
            mask=f.mask,
            label=f.label if f.label is not None else np.zeros((H, W), dtype=np.int8)))
    gt_rel = relative_poses(reader.gt_trajectory, scale=reader.rig.d_max)
    return SyntheticSequence(frames=frames, gt_relative=gt_rel,
                             gt_trajectory=reader.gt_trajectory, rig=reader.rig)
