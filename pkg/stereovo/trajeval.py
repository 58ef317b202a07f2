"""
Trajectory evaluation
ATE-RMSE after rigid alignment, RPE-trans / RPE-rot, and micro / macro
aggregation over several sequences
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import lie
from .errors import AlignmentError, InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamped absolute poses (world from camera)"""
    stamps: np.ndarray
    poses: Tuple[lie.RigidTransform, ...]

    def __post_init__(self):
        stamps = np.array(self.stamps, dtype=float).reshape(-1)
        stamps.flags.writeable = False
        poses = tuple(self.poses)
        if len(stamps) != len(poses):
            raise InvalidArgumentError(f"{len(stamps)} stamps for {len(poses)} poses")
        if len(stamps) > 1 and not np.all(np.diff(stamps) > 0):
            raise InvalidArgumentError("Trajectory stamps must be strictly increasing")
        object.__setattr__(self, 'stamps', stamps)
        object.__setattr__(self, 'poses', poses)

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([T.t for T in self.poses]).reshape(-1, 3)

    def transformed(self, S: lie.RigidTransform) -> 'Trajectory':
        """Left-multiply every pose by S"""
        return Trajectory(self.stamps, [lie.compose(S, T) for T in self.poses])


def _check_matching(est: Trajectory, gt: Trajectory):
    if len(est) != len(gt):
        raise AlignmentError(f"Trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        raise AlignmentError("Trajectories are empty")
    if not np.array_equal(est.stamps, gt.stamps):
        raise AlignmentError("Trajectory stamps do not match")


def align_rigid(src: np.ndarray, dst: np.ndarray) -> lie.RigidTransform:
    """
    Least-squares rigid transform S with S(src) ~ dst, no scale

    Cross-covariance SVD with the reflection fix.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return lie.RigidTransform(R=R, t=mu_d - R @ mu_s)


def ate_errors(est: Trajectory, gt: Trajectory, align: bool = True) -> np.ndarray:
    """Per-frame translational error after alignment"""
    _check_matching(est, gt)
    src, dst = est.positions, gt.positions
    if align:
        S = align_rigid(src, dst)
        src = lie.apply(S, src)
    return np.linalg.norm(src - dst, axis=1)


def ate_rmse(est: Trajectory, gt: Trajectory, align: bool = True) -> float:
    e = ate_errors(est, gt, align)
    return float(np.sqrt(np.mean(e * e)))


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Relative pose error series over a fixed frame gap

    Returns:
        (translational errors in scene units, rotational errors in degrees)
    """
    _check_matching(est, gt)
    if delta < 1:
        raise InvalidArgumentError(f"delta must be >= 1, got {delta}")
    if delta >= len(gt):
        raise AlignmentError(f"delta {delta} leaves no pairs in a {len(gt)}-pose trajectory")
    trans, rot = [], []
    for i in range(len(gt) - delta):
        d_gt = lie.compose(lie.inverse(gt.poses[i]), gt.poses[i + delta])
        d_est = lie.compose(lie.inverse(est.poses[i]), est.poses[i + delta])
        E = lie.compose(lie.inverse(d_gt), d_est)
        trans.append(np.linalg.norm(E.t))
        rot.append(np.degrees(lie.rotation_angle(E.R)))
    return np.array(trans), np.array(rot)


def per_frame_errors(est: Trajectory, gt: Trajectory, delta: int = 1, align: bool = True) -> pd.DataFrame:
    """One row per frame; RPE columns are NaN for the last delta frames"""
    ate = ate_errors(est, gt, align)
    t_err, r_err = rpe(est, gt, delta)
    n = len(gt)
    pad = np.full(n - len(t_err), np.nan)
    return pd.DataFrame({
        'frame': np.arange(n),
        'stamp': gt.stamps,
        'ate_error': ate,
        'rpe_trans': np.concatenate([t_err, pad]),
        'rpe_rot_deg': np.concatenate([r_err, pad]),
    })


def sequence_metrics(est: Trajectory, gt: Trajectory, name: str = 'sequence', delta: int = 1,
                     align: bool = True, group: Optional[str] = None) -> Dict:
    """ATE-RMSE and RPE mean / std for one sequence"""
    t_err, r_err = rpe(est, gt, delta)
    row = {
        'sequence': name,
        'n_frames': len(gt),
        'ate_rmse': ate_rmse(est, gt, align),
        'rpe_trans_mean': float(np.mean(t_err)),
        'rpe_trans_std': float(np.std(t_err)),
        'rpe_rot_mean': float(np.mean(r_err)),
        'rpe_rot_std': float(np.std(r_err)),
    }
    if group is not None:
        row['group'] = group
    return row


_METRICS = ['ate_rmse', 'rpe_trans_mean', 'rpe_rot_mean']


def aggregate_metrics(rows: Sequence[Dict], frames: Sequence[pd.DataFrame],
                      by: Optional[str] = None) -> pd.DataFrame:
    """
    Micro and macro averages over sequences

    micro pools every frame of every sequence; macro averages the
    per-sequence values and reports their spread. With by='group' one pair
    of rows is produced per group.

    Args:
        rows: sequence_metrics outputs
        frames: matching per_frame_errors outputs
    """
    if len(rows) != len(frames) or not rows:
        raise InvalidArgumentError("Need one per-frame table per sequence")
    table = pd.DataFrame(list(rows))
    labelled = [f.assign(sequence=r['sequence'], group=r.get('group')) for r, f in zip(rows, frames)]
    pooled = pd.concat(labelled, ignore_index=True)

    keys = [None] if by is None else list(pd.unique(table[by]))
    out: List[Dict] = []
    for key in keys:
        t = table if key is None else table[table[by] == key]
        p = pooled if key is None else pooled[pooled[by] == key]
        rt = p['rpe_trans'].dropna().to_numpy()
        rr = p['rpe_rot_deg'].dropna().to_numpy()
        ate = p['ate_error'].to_numpy()
        label = 'all' if key is None else key
        out.append({
            'aggregate': 'micro', 'group': label, 'n_sequences': len(t),
            'ate_rmse': float(np.sqrt(np.mean(ate * ate))), 'ate_rmse_std': np.nan,
            'rpe_trans_mean': float(np.mean(rt)), 'rpe_trans_std': float(np.std(rt)),
            'rpe_rot_mean': float(np.mean(rr)), 'rpe_rot_std': float(np.std(rr)),
        })
        macro = {'aggregate': 'macro', 'group': label, 'n_sequences': len(t)}
        for m in _METRICS:
            vals = t[m].to_numpy(dtype=float)
            macro[m] = float(np.mean(vals))
            macro[m.replace('_mean', '') + '_std'] = float(np.std(vals))
        out.append(macro)
    return pd.DataFrame(out)


def write_metrics_csv(df: pd.DataFrame, path: str) -> str:
    df.to_csv(path, index=False, float_format='%.12g')
    logger.info("Wrote %d metric rows to %s", len(df), path)
    return path
