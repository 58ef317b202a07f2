"""
Command line entry points
simulate, estimate, evaluate, gradcheck and fitweights

Any RunConfig field can be overridden with --section.key value, e.g.
    python -m stereovo estimate --seq data/seq --out est.traj --solver.max_iters 50
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import lie
from .camera import default_rig
from .config import RunConfig, SolverConfig
from .ddn import WeightParams, fit_weight_maps, implicit_gradient, pose_loss, write_loss_trace
from .errors import EXIT_DATA, GradcheckFailure, SequenceLayoutError, StereoVOError, UsageError
from .io import (SequenceReader, read_run_config, read_sequence, read_trajectory, read_weights,
                 write_sequence, write_trajectory, write_weights)
from .monitoring import write_metrics
from .residuals import build_workspace, combined_residuals, objective, residual_terms
from .solver import chain_trajectory, estimate_sequence, solve_pose
from .synth import NoiseSpec, render_sequence, scenario_preset, spec_from_config
from .trajeval import aggregate_metrics, ate_rmse, per_frame_errors, sequence_metrics, write_metrics_csv

logger = logging.getLogger(__name__)

JACOBIAN_TOL = 1e-5
IMPLICIT_TOL = 1e-3
GRADCHECK_SIZE = 16


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting"""

    def error(self, message):
        raise UsageError(message)


def parse_override_args(tokens: Sequence[str]) -> Dict[str, str]:
    """['--solver.max_iters', '50', '--rig.fx=200'] -> {'solver.max_iters': '50', 'rig.fx': '200'}"""
    out: Dict[str, str] = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith('--') or '.' not in tok.split('=', 1)[0]:
            raise UsageError(f"Unrecognized argument {tok!r}")
        key, eq, value = tok[2:].partition('=')
        if not eq:
            if i + 1 >= len(tokens):
                raise UsageError(f"Override --{key} needs a value")
            value = tokens[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def load_config(args, overrides: Dict[str, str]) -> RunConfig:
    return read_run_config(args.config, overrides)


# simulate

def cmd_simulate(args, overrides) -> int:
    if args.seed is not None:
        overrides = {**overrides, 'scenario.seed': str(args.seed)}
    cfg = load_config(args, overrides)
    spec = spec_from_config(cfg)
    print(f"Simulating {cfg.scenario.preset} scene: {spec.n_frames} frames at "
          f"{cfg.rig.width}x{cfg.rig.height}, seed {cfg.scenario.seed}")
    seq = render_sequence(spec, progress=not args.quiet)
    write_sequence(args.out, seq)
    print(f"Saved sequence to {args.out}")
    return 0


# estimate

def cmd_estimate(args, overrides) -> int:
    if args.residuals is not None:
        overrides = {**overrides, 'estimate.residuals': args.residuals}
    cfg = load_config(args, overrides)
    reader = SequenceReader(args.seq, cfg.masks)
    if len(reader) < 2:
        raise SequenceLayoutError(f"{args.seq}: need at least 2 frames, found {len(reader)}")
    rig = reader.rig
    print(f"Loaded sequence {args.seq}: {len(reader)} frames at {rig.width}x{rig.height}")

    w2d = w3d = None
    if (args.weights_2d is None) != (args.weights_3d is None):
        raise UsageError("--weights-2d and --weights-3d must be given together")
    if args.weights_2d is not None:
        w2d, w3d = read_weights(args.weights_2d, args.weights_3d, rig.shape)
        print(f"Loaded weight maps {args.weights_2d}, {args.weights_3d}")

    poses, report = estimate_sequence(reader.pairs(), cfg, w2d, w3d, progress=not args.quiet,
                                      total=len(reader) - 1)
    trajectory = chain_trajectory(poses, reader.stamps, scale=rig.d_max)
    write_trajectory(args.out, trajectory)
    report_path = args.report or os.path.splitext(args.out)[0] + '_frames.csv'
    report.to_csv(report_path, index=False, float_format='%.12g')

    print(f"Saved trajectory to {args.out}")
    print(f"Saved per-frame report to {report_path}")
    print(f"  Converged: {int(report['converged'].sum())}/{len(report)}, "
          f"degenerate: {int(report['degenerate'].sum())}")
    if reader.gt_trajectory is not None:
        print(f"  ATE-RMSE vs gt.traj: {ate_rmse(trajectory, reader.gt_trajectory):.6g}")
    if args.metrics_out:
        write_metrics(args.metrics_out)
    return 0


# evaluate

def cmd_evaluate(args, overrides) -> int:
    if overrides:
        raise UsageError("evaluate takes no config overrides")
    if len(args.est) != len(args.gt):
        raise UsageError(f"{len(args.est)} estimated trajectories for {len(args.gt)} ground truths")
    names = args.names or [os.path.splitext(os.path.basename(p))[0] for p in args.est]
    if len(names) != len(args.est):
        raise UsageError("--names must match the number of trajectories")
    if args.groups is not None and len(args.groups) != len(args.est):
        raise UsageError("--groups must match the number of trajectories")
    align = not args.no_align

    rows, frames = [], []
    for i, (est_path, gt_path) in enumerate(zip(args.est, args.gt)):
        est, gt = read_trajectory(est_path), read_trajectory(gt_path)
        group = args.groups[i] if args.groups else None
        rows.append(sequence_metrics(est, gt, names[i], args.delta, align, group))
        frames.append(per_frame_errors(est, gt, args.delta, align))
        print(f"{names[i]}: ATE-RMSE {rows[-1]['ate_rmse']:.6g}, "
              f"RPE-trans {rows[-1]['rpe_trans_mean']:.6g} +/- {rows[-1]['rpe_trans_std']:.3g}, "
              f"RPE-rot {rows[-1]['rpe_rot_mean']:.6g} +/- {rows[-1]['rpe_rot_std']:.3g} deg")

    write_metrics_csv(pd.DataFrame(rows), args.out)
    print(f"Saved metrics to {args.out}")
    if args.per_frame:
        pooled = pd.concat([f.assign(sequence=n) for f, n in zip(frames, names)], ignore_index=True)
        pooled.to_csv(args.per_frame, index=False, float_format='%.12g')
        print(f"Saved per-frame errors to {args.per_frame}")
    if args.aggregate:
        agg = aggregate_metrics(rows, frames, by='group' if args.groups else None)
        write_metrics_csv(agg, args.aggregate)
        print(f"Saved micro/macro averages to {args.aggregate}")
    return 0


# gradcheck

def _relative(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


def residual_jacobian_error(ws, p, step: float = 1e-6, sign: float = 1.0) -> float:
    """
    Norm-relative error of the analytic residual Jacobian and objective
    gradient against central differences in the tangent coordinates
    """
    p = np.asarray(p, dtype=float)
    t = residual_terms(ws, p)
    J = sign * (ws.w2d[:, None] * t.J2 + ws.w3d[:, None] * t.J3)
    r = ws.w2d * t.r2 + ws.w3d * t.r3
    g = 2.0 * (r @ J)
    J_fd = np.empty_like(J)
    g_fd = np.empty(6)
    for i in range(6):
        d = np.zeros(6)
        d[i] = step
        J_fd[:, i] = (combined_residuals(ws, p + d) - combined_residuals(ws, p - d)) / (2 * step)
        g_fd[i] = (objective(ws, p + d) - objective(ws, p - d)) / (2 * step)
    return max(_relative(J, J_fd), _relative(g, g_fd))


def implicit_gradient_error(base_ws, params: WeightParams, p_gt: lie.TangentPose,
                            solver_cfg: SolverConfig, rng: np.random.Generator, n_dirs: int = 4,
                            step: float = 1e-3, sign: float = 1.0) -> float:
    """
    Norm-relative error of the implicit loss gradient against central
    differences through the full argmin, along random theta directions
    """
    ws = base_ws.with_weights(*params.weights())
    report = solve_pose(ws, solver_cfg)
    grad = implicit_gradient(ws, report, p_gt)
    if not grad.valid:
        raise GradcheckFailure(f"Implicit gradient unavailable: {grad.reason}")

    def loss_at(d2, d3, h):
        shifted = WeightParams(params.theta2d + h * d2, params.theta3d + h * d3)
        r = solve_pose(base_ws.with_weights(*shifted.weights()), solver_cfg, init=report.pose)
        return pose_loss(r.pose, p_gt)

    analytic, numeric = [], []
    for _ in range(n_dirs):
        d2 = rng.normal(size=params.shape)
        d3 = rng.normal(size=params.shape)
        analytic.append(sign * (np.sum(grad.d_theta2d * d2) + np.sum(grad.d_theta3d * d3)))
        numeric.append((loss_at(d2, d3, step) - loss_at(d2, d3, -step)) / (2 * step))
    return _relative(np.array(analytic), np.array(numeric))


def run_gradcheck(cfg: RunConfig, seed: int, sign: float = 1.0) -> Dict[str, float]:
    """Both finite-difference suites on a small noisy scanning scene"""
    rig = default_rig(GRADCHECK_SIZE, GRADCHECK_SIZE, baseline=cfg.rig.baseline, d_max=cfg.rig.d_max)
    spec = scenario_preset('scanning', seed=seed, rig=rig, n_frames=2)
    spec = replace(spec, noise=NoiseSpec(depth_sigma=1e-3 * rig.d_max, flow_sigma=0.05, seed=seed))
    seq = render_sequence(spec)
    pair = seq.pair(1, cfg.masks)
    p_gt = seq.gt_relative[0]

    rng = np.random.default_rng(seed)
    params = WeightParams(rng.normal(0.0, 1.0, rig.shape), rng.normal(0.0, 1.0, rig.shape))
    base = build_workspace(pair)
    ws = base.with_weights(*params.weights())
    p = p_gt.vector + rng.normal(0.0, 1e-3, 6)

    solver_cfg = cfg.solver.model_copy(update={'grad_tol': 1e-10, 'polish_steps': 3,
                                               'max_iters': max(cfg.solver.max_iters, 200)})
    return {
        'jacobian': residual_jacobian_error(ws, p, sign=sign),
        'implicit': implicit_gradient_error(base, params, p_gt, solver_cfg, rng, sign=sign),
    }


def cmd_gradcheck(args, overrides) -> int:
    cfg = load_config(args, overrides)
    sign = -1.0 if args.inject_sign_flip else 1.0
    seeds = range(args.seed, args.seed + args.n_seeds)
    worst = {'jacobian': 0.0, 'implicit': 0.0}
    for seed in tqdm(seeds, desc="Gradient checks", disable=args.quiet or args.n_seeds == 1):
        errors = run_gradcheck(cfg, seed, sign)
        logger.info("seed %d: %s", seed, errors)
        for k, v in errors.items():
            worst[k] = max(worst[k], v)

    print(f"Max relative error, residual Jacobian: {worst['jacobian']:.3e} (tol {JACOBIAN_TOL:.0e})")
    print(f"Max relative error, implicit gradient: {worst['implicit']:.3e} (tol {IMPLICIT_TOL:.0e})")
    if worst['jacobian'] >= JACOBIAN_TOL or worst['implicit'] >= IMPLICIT_TOL:
        raise GradcheckFailure("Gradient check FAILED")
    print("Gradient check passed")
    return 0


# fitweights

def cmd_fitweights(args, overrides) -> int:
    cfg = load_config(args, overrides)
    seq = read_sequence(args.seq, cfg.masks)
    dataset = seq.dataset(cfg.masks)
    print(f"Loaded {len(dataset)} frame pairs from {args.seq}")

    params = WeightParams.uniform(seq.rig.shape)
    result = fit_weight_maps(dataset, params, cfg.ddn, cfg.solver, progress=not args.quiet)
    w2d, w3d = result.params.weights()
    p2, p3 = write_weights(args.out_dir, w2d, w3d)
    write_loss_trace(result, args.loss_csv)

    first, best = result.trace.iloc[0], result.trace.iloc[result.best_iteration]
    print(f"Saved weight maps to {p2}, {p3}")
    print(f"Saved loss trace to {args.loss_csv}")
    print(f"  Train loss: {first['train_loss']:.6g} -> {best['train_loss']:.6g} "
          f"(best iteration {result.best_iteration})")
    if args.metrics_out:
        write_metrics(args.metrics_out)
    return 0


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument('--config', help="INI run configuration")
    common.add_argument('--log-level', default='WARNING',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--quiet', action='store_true', help="Disable progress bars")

    parser = ArgumentParser(prog='stereovo', description="Weighted 2D/3D stereo visual odometry",
                            allow_abbrev=False)
    sub = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    p = sub.add_parser('simulate', parents=[common], allow_abbrev=False,
                       help="Render a synthetic sequence")
    p.add_argument('--seed', type=int)
    p.add_argument('--out', required=True, help="Output sequence directory")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser('estimate', parents=[common], allow_abbrev=False,
                       help="Estimate the trajectory of a sequence")
    p.add_argument('--seq', required=True)
    p.add_argument('--out', required=True, help="Output trajectory file")
    p.add_argument('--report', help="Per-frame CSV, defaults next to --out")
    p.add_argument('--weights-2d')
    p.add_argument('--weights-3d')
    p.add_argument('--residuals', choices=['combined', '2d', '3d'])
    p.add_argument('--metrics-out', help="Prometheus text dump")
    p.set_defaults(handler=cmd_estimate)

    p = sub.add_parser('evaluate', parents=[common], allow_abbrev=False,
                       help="ATE / RPE of estimated trajectories")
    p.add_argument('--est', nargs='+', required=True)
    p.add_argument('--gt', nargs='+', required=True)
    p.add_argument('--out', required=True, help="Per-sequence metrics CSV")
    p.add_argument('--names', nargs='+')
    p.add_argument('--groups', nargs='+')
    p.add_argument('--per-frame')
    p.add_argument('--aggregate', help="Micro / macro averages CSV")
    p.add_argument('--delta', type=int, default=1)
    p.add_argument('--no-align', action='store_true')
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('gradcheck', parents=[common], allow_abbrev=False,
                       help="Finite-difference checks of the analytic derivatives")
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--n-seeds', type=int, default=1)
    p.add_argument('--inject-sign-flip', action='store_true', help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('fitweights', parents=[common], allow_abbrev=False,
                       help="Fit per-pixel weight maps")
    p.add_argument('--seq', required=True)
    p.add_argument('--out-dir', required=True)
    p.add_argument('--loss-csv', required=True)
    p.add_argument('--metrics-out')
    p.set_defaults(handler=cmd_fitweights)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = parse_override_args(extra)
        logging.basicConfig(level=args.log_level,
                            format='%(asctime)s %(name)s %(levelname)s: %(message)s')
        return args.handler(args, overrides)
    except StereoVOError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"Error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == '__main__':
    sys.exit(main())
