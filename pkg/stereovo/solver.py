"""
Pose solver
L-BFGS with a strong-Wolfe line search on the weighted residual objective,
plus sequence estimation and trajectory chaining of the solved relative poses
"""

import logging
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import lie
from .config import RunConfig, SolverConfig
from .errors import DegenerateFrameError, InvalidArgumentError
from .fields import FramePair
from .monitoring import BEHIND_CAMERA, DEGENERATE_FRAMES, SOLVE_COUNT, SOLVE_ITERATIONS, SOLVE_LATENCY
from .residuals import ResidualWorkspace, build_workspace, evaluate, objective_hessian
from .trajeval import Trajectory

logger = logging.getLogger(__name__)

# A relative pose has six degrees of freedom
MIN_PIXELS = 6
# Length of the first trial step when no curvature history exists
FIRST_STEP = 1e-2
MAX_EXPANSIONS = 40
CURVATURE_EPS = 1e-10
# Finite-difference step for one-sided slopes at a kink of the 2D residual norm
KINK_STEP = 1e-7

REPORT_COLUMNS = ['frame', 'iterations', 'converged', 'final_objective', 'grad_norm',
                  'behind_camera_count', 'degenerate']


@dataclass(frozen=True)
class SolveReport:
    pose: lie.TangentPose
    iterations: int
    final_objective: float
    final_grad_norm: float
    converged: bool
    behind_camera_count: int
    status: str = 'converged'


class _Point:
    """One objective evaluation"""
    __slots__ = ('x', 'f', 'g', 'behind')

    def __init__(self, x, f, g, behind):
        self.x, self.f, self.g, self.behind = x, f, g, behind


def _two_loop(g: np.ndarray, history) -> np.ndarray:
    """H_k g by the L-BFGS two-loop recursion"""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    s, y, _ = history[-1]
    q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def _line_search(evaluate_at: Callable[[float], _Point], start: _Point, d: np.ndarray,
                 alpha0: float, cfg: SolverConfig, dphi0: Optional[float] = None) -> Optional[_Point]:
    """
    Strong-Wolfe line search: bracketing followed by zoom

    dphi0 overrides the initial slope g.d when the start sits on a kink.
    Returns the accepted point or None when the zoom gives up after
    cfg.max_bisections trials.
    """
    f0 = start.f
    dphi0 = float(np.dot(start.g, d)) if dphi0 is None else float(dphi0)
    c1, c2 = cfg.wolfe_c1, cfg.wolfe_c2

    def armijo_fails(pt, a):
        return not np.isfinite(pt.f) or pt.f > f0 + c1 * a * dphi0

    def zoom(a_lo, p_lo, a_hi, p_hi):
        for _ in range(cfg.max_bisections):
            width = a_hi - a_lo
            dphi_lo = float(np.dot(p_lo.g, d))
            denom = 2.0 * (p_hi.f - p_lo.f - dphi_lo * width)
            a = a_lo - dphi_lo * width * width / denom if np.isfinite(p_hi.f) and denom > 0 else np.nan
            lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
            margin = 0.1 * (hi - lo)
            if not (np.isfinite(a) and lo + margin <= a <= hi - margin):
                a = 0.5 * (a_lo + a_hi)
            pt = evaluate_at(a)
            if armijo_fails(pt, a) or pt.f >= p_lo.f:
                a_hi, p_hi = a, pt
                continue
            dphi = float(np.dot(pt.g, d))
            if abs(dphi) <= -c2 * dphi0:
                return pt
            if dphi * (a_hi - a_lo) >= 0:
                a_hi, p_hi = a_lo, p_lo
            a_lo, p_lo = a, pt
        return None

    a_prev, p_prev = 0.0, start
    a = alpha0
    for i in range(MAX_EXPANSIONS):
        pt = evaluate_at(a)
        if armijo_fails(pt, a) or (i > 0 and pt.f >= p_prev.f):
            return zoom(a_prev, p_prev, a, pt)
        dphi = float(np.dot(pt.g, d))
        if abs(dphi) <= -c2 * dphi0:
            return pt
        if dphi >= 0:
            return zoom(a, pt, a_prev, p_prev)
        a_prev, p_prev = a, pt
        a *= 2.0
    return None


def _polish(ws: ResidualWorkspace, current: _Point, steps: int, make_point) -> _Point:
    """Newton steps with the finite-difference Hessian, kept only while f does not rise and |g| drops"""
    for _ in range(steps):
        H = objective_hessian(ws, current.x)
        try:
            dx = np.linalg.solve(H, -current.g)
        except np.linalg.LinAlgError:
            break
        trial = make_point(current.x + dx)
        if not (np.isfinite(trial.f) and trial.f <= current.f
                and np.linalg.norm(trial.g) < np.linalg.norm(current.g)):
            break
        current = trial
    return current


def _kink_direction(make_point, current: _Point, d: np.ndarray,
                    tol: float) -> Optional[Tuple[np.ndarray, float]]:
    """
    Steepest one-sided slope among d and the coordinate axes

    At a pixel whose 2D error is exactly zero the gradient misses the cone
    of the norm, so g.d can promise descent that does not exist. Slopes are
    measured by forward differences instead. Returns (unit direction,
    slope) or None when no candidate descends by more than tol.
    """
    candidates = [d / np.linalg.norm(d)]
    for axis in np.eye(6):
        candidates.extend((axis, -axis))
    best = None
    for u in candidates:
        pt = make_point(current.x + KINK_STEP * u)
        if not np.isfinite(pt.f):
            continue
        slope = (pt.f - current.f) / KINK_STEP
        if best is None or slope < best[1]:
            best = (u, slope)
    if best is None or best[1] >= -tol:
        return None
    return best


def solve_pose(ws: ResidualWorkspace, cfg: Optional[SolverConfig] = None,
               init: Optional[lie.TangentPose] = None,
               callback: Optional[Callable[[int, float], None]] = None) -> SolveReport:
    """
    Minimise the weighted residual objective over the relative pose

    Args:
        ws: workspace of one frame pair
        cfg: solver settings, defaults if omitted
        init: starting pose, identity if omitted
        callback: called as callback(iteration, f) for the start point and
            every accepted iterate

    Raises:
        DegenerateFrameError: fewer than six pixels in Omega
    """
    cfg = cfg or SolverConfig()
    if ws.size < MIN_PIXELS:
        raise DegenerateFrameError(f"Only {ws.size} valid pixels, need at least {MIN_PIXELS}")
    x0 = np.zeros(6) if init is None else np.asarray(init.vector, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise InvalidArgumentError("Initial pose must be finite")

    start_time = time.perf_counter()
    behind_total = 0

    def make_point(x):
        nonlocal behind_total
        f, g, nb = evaluate(ws, x)
        behind_total += nb
        return _Point(x, f, g, nb)

    current = make_point(x0)
    best = current

    if not (np.any(ws.w2d) or np.any(ws.w3d)):
        logger.warning("All weights are zero; the objective is flat and the initial pose is returned")
        return _finish(current, 0, True, 'flat', behind_total, start_time)

    history = deque(maxlen=cfg.memory)
    status = 'max_iters'
    converged = False
    iterations = 0
    if callback is not None:
        callback(0, current.f)

    for iterations in range(cfg.max_iters + 1):
        gnorm = float(np.linalg.norm(current.g))
        if gnorm <= cfg.grad_tol:
            converged, status = True, 'converged'
            break
        if iterations == cfg.max_iters:
            break

        d = -_two_loop(current.g, history) if history else -current.g
        if np.dot(d, current.g) >= 0:
            history.clear()
            d = -current.g

        alpha0 = 1.0 if history else FIRST_STEP / np.linalg.norm(d)
        x = current.x
        accepted = _line_search(lambda a: make_point(x + a * d), current, d, alpha0, cfg)
        if accepted is None:
            kink = _kink_direction(make_point, current, d, cfg.grad_tol)
            if kink is None:
                status = 'nonsmooth'
                logger.info("No descent direction at iteration %d (f=%.6e, |g|=%.3e); "
                            "stopping on a kink of the 2D residual", iterations, current.f, gnorm)
                break
            u, slope = kink
            history.clear()
            accepted = _line_search(lambda a: make_point(x + a * u), current, u, FIRST_STEP, cfg,
                                    dphi0=slope)
        if accepted is None:
            status = 'line_search_failed'
            logger.info("Line search failed at iteration %d (f=%.6e, |g|=%.3e)",
                        iterations, current.f, gnorm)
            break

        s = accepted.x - current.x
        y = accepted.g - current.g
        sy = float(np.dot(s, y))
        if sy > CURVATURE_EPS * np.linalg.norm(s) * np.linalg.norm(y):
            history.append((s, y, 1.0 / sy))
        current = accepted
        if current.f <= best.f:
            best = current
        if callback is not None:
            callback(iterations + 1, current.f)
        if np.linalg.norm(s) < cfg.step_tol:
            converged, status = True, 'step_tol'
            iterations += 1
            break

    if cfg.polish_steps:
        best = _polish(ws, best, cfg.polish_steps, make_point)
        if np.linalg.norm(best.g) <= cfg.grad_tol and not converged:
            converged, status = True, 'converged'

    return _finish(best, iterations, converged, status, behind_total, start_time)


def _finish(pt: _Point, iterations: int, converged: bool, status: str, behind_total: int,
            start_time: float) -> SolveReport:
    outcome = 'flat' if status == 'flat' else ('converged' if converged else 'not_converged')
    SOLVE_COUNT.labels(outcome=outcome).inc()
    SOLVE_LATENCY.observe(time.perf_counter() - start_time)
    SOLVE_ITERATIONS.observe(iterations)
    BEHIND_CAMERA.inc(pt.behind)
    if not converged:
        logger.warning("Pose solve did not converge (%s) after %d iterations, |g|=%.3e",
                       status, iterations, np.linalg.norm(pt.g))
    logger.debug("Solve %s: %d iterations, f=%.6e, %d behind-camera evaluations",
                 status, iterations, pt.f, behind_total)
    return SolveReport(pose=lie.TangentPose.from_vector(pt.x), iterations=iterations,
                       final_objective=float(pt.f), final_grad_norm=float(np.linalg.norm(pt.g)),
                       converged=converged, behind_camera_count=int(pt.behind), status=status)


def chain_trajectory(poses: Sequence[lie.TangentPose], stamps: Optional[Sequence[float]] = None,
                     scale: float = 1.0) -> Trajectory:
    """
    Absolute poses from relative ones: T_0 = I, T_t = T_(t-1) exp(p_t)

    Args:
        poses: N relative poses; the result holds N + 1 absolute poses
        stamps: N + 1 timestamps, frame indices if omitted
        scale: multiplies translations, e.g. d_max to go from normalized
            to scene units
    """
    if len(poses) == 0:
        raise InvalidArgumentError("Cannot chain an empty pose sequence")
    stamps = np.arange(len(poses) + 1, dtype=float) if stamps is None else np.asarray(stamps, dtype=float)
    if len(stamps) != len(poses) + 1:
        raise InvalidArgumentError(f"Need {len(poses) + 1} stamps for {len(poses)} relative poses")
    absolute = [lie.RigidTransform.identity()]
    for p in poses:
        step = lie.exp_map(p)
        step = lie.RigidTransform(R=step.R, t=step.t * scale)
        absolute.append(lie.compose(absolute[-1], step))
    return Trajectory(stamps=stamps, poses=absolute)


def relative_poses(traj: Trajectory, scale: float = 1.0) -> List[lie.TangentPose]:
    """Inverse of chain_trajectory: log(T_(t-1)^-1 T_t) with translations divided by scale"""
    out = []
    for prev, cur in zip(traj.poses[:-1], traj.poses[1:]):
        step = lie.compose(lie.inverse(prev), cur)
        out.append(lie.log_map(lie.RigidTransform(R=step.R, t=step.t / scale)))
    return out


def estimate_sequence(pairs: Iterable[Tuple[int, FramePair]], cfg: RunConfig, w2d=None, w3d=None,
                      mode: Optional[str] = None, progress: bool = False,
                      total: Optional[int] = None) -> Tuple[List[lie.TangentPose], pd.DataFrame]:
    """
    Solve every frame pair of a sequence in order

    A degenerate pair repeats the previous relative pose and is flagged in
    the report, so the chained trajectory never has holes.

    Returns:
        (relative poses, per-frame report with columns frame, iterations,
        converged, final_objective, grad_norm, behind_camera_count, degenerate)
    """
    mode = mode or cfg.estimate.residuals
    poses: List[lie.TangentPose] = []
    rows = []
    previous = lie.TangentPose.zero()
    for t, pair in tqdm(pairs, total=total, desc="Estimating poses", disable=not progress):
        try:
            ws = build_workspace(pair, w2d, w3d, mode=mode)
            init = previous if cfg.solver.init_policy == 'previous_pose' else None
            report = solve_pose(ws, cfg.solver, init=init)
        except DegenerateFrameError as exc:
            DEGENERATE_FRAMES.inc()
            logger.warning("Frame %d is degenerate (%s); repeating the previous pose", t, exc)
            poses.append(previous)
            rows.append({'frame': t, 'iterations': 0, 'converged': False, 'final_objective': np.nan,
                         'grad_norm': np.nan, 'behind_camera_count': 0, 'degenerate': True})
            continue
        previous = report.pose
        poses.append(report.pose)
        rows.append({'frame': t, 'iterations': report.iterations, 'converged': report.converged,
                     'final_objective': report.final_objective, 'grad_norm': report.final_grad_norm,
                     'behind_camera_count': report.behind_camera_count, 'degenerate': False})
    return poses, pd.DataFrame(rows, columns=REPORT_COLUMNS)
