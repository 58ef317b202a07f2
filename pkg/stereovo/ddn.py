"""
Implicit differentiation through the pose solve
Gradients of the l1 pose loss with respect to per-pixel weight maps, and
the weight-map fitting loop built on them
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import mlflow
import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm

from . import lie
from .config import FitConfig, SolverConfig
from .errors import FittingError, InvalidArgumentError, NumericalFailureError
from .fields import FramePair, WeightMap
from .monitoring import DDN_INVALID
from .residuals import ResidualWorkspace, build_workspace, objective_hessian, residual_terms
from .solver import SolveReport, solve_pose

logger = logging.getLogger(__name__)

COND_LIMIT = 1e10

sigmoid = expit


@dataclass(frozen=True, eq=False)
class WeightParams:
    """Unconstrained rasters; the weights are sigmoid(theta)"""
    theta2d: np.ndarray
    theta3d: np.ndarray

    def __post_init__(self):
        t2 = np.array(self.theta2d, dtype=float)
        t3 = np.array(self.theta3d, dtype=float)
        if t2.ndim != 2 or t2.shape != t3.shape:
            raise InvalidArgumentError(f"theta rasters must share a 2D shape, got {t2.shape} and {t3.shape}")
        object.__setattr__(self, 'theta2d', t2)
        object.__setattr__(self, 'theta3d', t3)

    @classmethod
    def uniform(cls, shape, theta: float = 0.0) -> 'WeightParams':
        return cls(np.full(tuple(shape), theta), np.full(tuple(shape), theta))

    @property
    def shape(self):
        return self.theta2d.shape

    def weights(self) -> Tuple[WeightMap, WeightMap]:
        return WeightMap(sigmoid(self.theta2d)), WeightMap(sigmoid(self.theta3d))


@dataclass(frozen=True, eq=False)
class DdnGradient:
    d_theta2d: np.ndarray
    d_theta3d: np.ndarray
    loss_value: float
    valid: bool
    reason: str = ''


def pose_loss(p_star: lie.TangentPose, p_gt: lie.TangentPose) -> float:
    """l1 distance in tangent coordinates"""
    diff = p_star.vector - p_gt.vector
    if not np.all(np.isfinite(diff)):
        raise InvalidArgumentError("Poses must be finite")
    return float(np.sum(np.abs(diff)))


def implicit_vjp(H: np.ndarray, B: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    Vector-Jacobian product through an argmin

    For y*(w) = argmin f(y, w) with H = d2f/dy2 and B = d2f/dy dw,
    dy*/dw = -H^-1 B, so v^T dy*/dw = -(H^-1 v)^T B for symmetric H.

    Raises:
        NumericalFailureError: if H is too ill-conditioned to invert
    """
    H = np.asarray(H, dtype=float)
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalFailureError(f"Hessian condition number {cond:.3e} exceeds {COND_LIMIT:.0e}")
    u = np.linalg.solve(H, np.asarray(v, dtype=float))
    return -(u @ np.asarray(B, dtype=float))


def _invalid(ws: ResidualWorkspace, loss: float, reason: str) -> DdnGradient:
    DDN_INVALID.labels(reason=reason).inc()
    zero = np.zeros(ws.shape)
    return DdnGradient(zero, zero.copy(), loss, False, reason)


def implicit_gradient(ws: ResidualWorkspace, report: SolveReport, p_gt: lie.TangentPose,
                      hessian_step: float = 1e-6) -> DdnGradient:
    """
    dL/dtheta for L = |p* - p_gt|_1 at the solved pose p*

    The mixed partial of the objective with respect to the pose and one
    pixel weight is 2 [r_j dr/dp + r dr_j/dp] for j in {2d, 3d}; the sign
    vector of p* - p_gt (0 at ties) is the loss subgradient.
    """
    loss = pose_loss(report.pose, p_gt)
    if report.status == 'nonsmooth':
        return _invalid(ws, loss, 'nonsmooth')
    if not report.converged:
        return _invalid(ws, loss, 'not_converged')

    v = np.sign(report.pose.vector - p_gt.vector)
    if not np.any(v):
        zero = np.zeros(ws.shape)
        return DdnGradient(zero, zero.copy(), loss, True)

    p = report.pose.vector
    H = objective_hessian(ws, p, step=hessian_step)
    t = residual_terms(ws, p)
    r = ws.w2d * t.r2 + ws.w3d * t.r3
    Jr = ws.w2d[:, None] * t.J2 + ws.w3d[:, None] * t.J3
    B2 = 2.0 * (t.r2[:, None] * Jr + r[:, None] * t.J2)
    B3 = 2.0 * (t.r3[:, None] * Jr + r[:, None] * t.J3)
    try:
        d_w = implicit_vjp(H, np.concatenate([B2, B3]).T, v)
    except (NumericalFailureError, np.linalg.LinAlgError) as exc:
        logger.info("Skipping sample: %s", exc)
        return _invalid(ws, loss, 'ill_conditioned')
    d_w2, d_w3 = d_w[:ws.size], d_w[ws.size:]

    # sigmoid'(theta) = w (1 - w)
    d_t2 = d_w2 * ws.w2d * (1.0 - ws.w2d)
    d_t3 = d_w3 * ws.w3d * (1.0 - ws.w3d)
    return DdnGradient(ws.scatter(d_t2), ws.scatter(d_t3), loss, True)


@dataclass
class FitResult:
    params: WeightParams
    trace: pd.DataFrame
    best_iteration: int
    poses: List[lie.TangentPose] = field(default_factory=list)


class _Adam:
    def __init__(self, cfg: FitConfig, shape):
        self.cfg = cfg
        self.m = [np.zeros(shape), np.zeros(shape)]
        self.v = [np.zeros(shape), np.zeros(shape)]
        self.t = 0

    def step(self, thetas, grads):
        c = self.cfg
        self.t += 1
        out = []
        for i, (theta, g) in enumerate(zip(thetas, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            m_hat = self.m[i] / (1 - c.beta1 ** self.t)
            v_hat = self.v[i] / (1 - c.beta2 ** self.t)
            out.append(theta - c.step * m_hat / (np.sqrt(v_hat) + c.eps))
        return out


class _SGD:
    def __init__(self, cfg: FitConfig, shape):
        self.cfg = cfg

    def step(self, thetas, grads):
        return [theta - self.cfg.step * g for theta, g in zip(thetas, grads)]


def split_indices(n: int, val_split: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic train / validation split; at least one training sample"""
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(int(round(val_split * n)), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def fit_weight_maps(dataset: Sequence[Tuple[FramePair, lie.TangentPose]], params: WeightParams,
                    cfg: Optional[FitConfig] = None, solver_cfg: Optional[SolverConfig] = None,
                    progress: bool = False) -> FitResult:
    """
    Fit the weight rasters by gradient descent on the mean pose loss

    Row 0 of the trace is the evaluation of the initial parameters; each
    update adds one row. The returned parameters are those with the lowest
    validation loss (training loss when there is no validation set).

    Raises:
        FittingError: when no training sample yields a valid gradient
    """
    cfg = cfg or FitConfig()
    solver_cfg = solver_cfg or SolverConfig()
    # implicit gradients are only exact at a stationary point
    if solver_cfg.polish_steps < 2:
        solver_cfg = solver_cfg.model_copy(update={'polish_steps': 2})
    if not dataset:
        raise InvalidArgumentError("Cannot fit weights on an empty dataset")

    base = [build_workspace(pair) for pair, _ in dataset]
    targets = [p_gt for _, p_gt in dataset]
    train_idx, val_idx = split_indices(len(dataset), cfg.val_split, cfg.seed)
    logger.info("Fitting on %d training and %d validation pairs", len(train_idx), len(val_idx))

    warm: List[Optional[lie.TangentPose]] = [None] * len(dataset)
    optimizer = _Adam(cfg, params.shape) if cfg.optimizer == 'adam' else _SGD(cfg, params.shape)

    def run_sample(i, w2, w3, with_grad):
        ws = base[i].with_weights(w2, w3)
        report = solve_pose(ws, solver_cfg, init=warm[i])
        if with_grad:
            return report, implicit_gradient(ws, report, targets[i])
        return report, None

    use_mlflow = cfg.tracking_uri is not None
    if use_mlflow:
        mlflow.set_tracking_uri(cfg.tracking_uri)
        mlflow.start_run(run_name='fit_weight_maps')
        mlflow.log_params({**cfg.model_dump(exclude={'tracking_uri'}), 'n_train': len(train_idx),
                           'n_val': len(val_idx)})

    rows = []
    current = params
    best = (np.inf, params, 0)
    stale = 0
    start = time.time()
    try:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for it in tqdm(range(cfg.iters + 1), desc="Fitting weights", disable=not progress):
                w2, w3 = (m.data for m in current.weights())
                jobs = [(i, True) for i in train_idx] + [(i, False) for i in val_idx]
                results = list(pool.map(lambda job: run_sample(job[0], w2, w3, job[1]), jobs))

                reports = {i: r for (i, _), (r, _) in zip(jobs, results)}
                grads = [g for (i, flag), (_, g) in zip(jobs, results) if flag]
                for i, r in reports.items():
                    warm[i] = r.pose
                train_loss = float(np.mean([pose_loss(reports[i].pose, targets[i]) for i in train_idx]))
                val_loss = (float(np.mean([pose_loss(reports[i].pose, targets[i]) for i in val_idx]))
                            if len(val_idx) else np.nan)
                valid = [g for g in grads if g.valid]
                rows.append({'iteration': it, 'train_loss': train_loss, 'val_loss': val_loss,
                             'valid_samples': len(valid), 'train_samples': len(train_idx)})
                if use_mlflow:
                    mlflow.log_metric('train_loss', train_loss, step=it)
                    if len(val_idx):
                        mlflow.log_metric('val_loss', val_loss, step=it)

                score = val_loss if len(val_idx) else train_loss
                if score < best[0]:
                    best = (score, current, it)
                    stale = 0
                else:
                    stale += 1
                if it == cfg.iters:
                    break
                if cfg.patience and stale >= cfg.patience:
                    logger.info("Early stop at iteration %d (best %d)", it, best[2])
                    break
                if not valid:
                    raise FittingError(f"No valid training sample at iteration {it}")

                g2 = np.mean([g.d_theta2d for g in valid], axis=0)
                g3 = np.mean([g.d_theta3d for g in valid], axis=0)
                t2, t3 = optimizer.step([current.theta2d, current.theta3d], [g2, g3])
                current = WeightParams(t2, t3)
    finally:
        if use_mlflow:
            mlflow.log_metric('fit_seconds', time.time() - start)
            mlflow.end_run()

    trace = pd.DataFrame(rows)
    logger.info("Best loss %.6g at iteration %d", best[0], best[2])
    return FitResult(params=best[1], trace=trace, best_iteration=best[2],
                     poses=[p for p in warm if p is not None])


def write_loss_trace(result: FitResult, path: str) -> str:
    result.trace.to_csv(path, index=False, float_format='%.12g')
    return path
