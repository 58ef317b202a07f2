import numpy as np
import pytest

from stereovo import lie
from stereovo.camera import default_rig
from stereovo.cli import IMPLICIT_TOL, JACOBIAN_TOL, run_gradcheck
from stereovo.config import FitConfig, RunConfig, SolverConfig
from stereovo.ddn import (WeightParams, fit_weight_maps, implicit_gradient, implicit_vjp, pose_loss,
                          sigmoid, split_indices)
from stereovo.errors import FittingError, NumericalFailureError
from stereovo.fields import FlowField, make_frame_pair
from stereovo.residuals import build_workspace
from stereovo.solver import SolveReport, solve_pose
from stereovo.synth import (LABEL_PATCH, CameraPath, SceneSpec, SurfaceSpec, TextureSpec, render_sequence,
                            scenario_preset)


def exact_report(pose):
    return SolveReport(pose=pose, iterations=0, final_objective=0.0, final_grad_norm=0.0,
                       converged=True, behind_camera_count=0)


def rigid_dataset(n_frames=4):
    rig = default_rig(24, 18)
    path = CameraPath(translation=(0.002, 0.0005, 0.001))
    seq = render_sequence(SceneSpec(rig=rig, surface=SurfaceSpec(kind='plane'), path=path,
                                    texture=TextureSpec(specular_spots=0), n_frames=n_frames))
    return rig, seq.dataset()


def test_pose_loss_examples():
    p = lie.TangentPose.from_vector([0.3, -0.1, 0.2, 0.01, 0.0, -0.02])
    assert pose_loss(p, p) == 0.0
    shifted = lie.TangentPose.from_vector(p.vector + [0.1, 0, 0, 0, 0, 0])
    assert pose_loss(shifted, p) == pytest.approx(0.1)
    a = np.array([0.1, -0.2, 0.3, 0.0, 0.05, -0.01])
    perm = [3, 0, 5, 1, 4, 2]
    zero = lie.TangentPose.zero()
    assert pose_loss(lie.TangentPose.from_vector(a), zero) == pytest.approx(
        pose_loss(lie.TangentPose.from_vector(a[perm]), zero))


def test_implicit_vjp_matches_quadratic_argmin(rng):
    # f(y, w) = y^T A y / 2 - y^T C w  =>  y*(w) = A^-1 C w
    M = rng.normal(size=(6, 6))
    A = M @ M.T + 6 * np.eye(6)
    C = rng.normal(size=(6, 9))
    v = rng.normal(size=6)
    expected = v @ np.linalg.inv(A) @ C
    assert np.allclose(implicit_vjp(A, -C, v), expected, atol=1e-12)


def test_implicit_vjp_rejects_ill_conditioned():
    with pytest.raises(NumericalFailureError):
        implicit_vjp(np.diag([1.0, 1e-12]), np.ones((2, 3)), np.ones(2))
    with pytest.raises(NumericalFailureError):
        implicit_vjp(np.zeros((2, 2)), np.ones((2, 3)), np.ones(2))


def test_gradient_is_zero_at_exact_tie(small_rig, make_plane_pair):
    v = (0.004, -0.002, 0.003)
    ws = build_workspace(make_plane_pair(small_rig, v=v), np.full(small_rig.shape, 0.5),
                         np.full(small_rig.shape, 0.5))
    p = lie.TangentPose(v=v, w=[0, 0, 0])
    grad = implicit_gradient(ws, exact_report(p), p)
    assert grad.valid
    assert grad.loss_value == 0.0
    assert not np.any(grad.d_theta2d) and not np.any(grad.d_theta3d)


def test_zero_residual_pixels_get_zero_gradient(small_rig, make_plane_pair):
    v = (0.004, -0.002, 0.003)
    ws = build_workspace(make_plane_pair(small_rig, v=v), np.full(small_rig.shape, 0.5),
                         np.full(small_rig.shape, 0.5))
    p_star = lie.TangentPose(v=v, w=[0, 0, 0])
    p_gt = lie.TangentPose(v=[0.0, 0.0, 0.003], w=[0, 0, 0])
    grad = implicit_gradient(ws, exact_report(p_star), p_gt)
    assert grad.valid
    assert grad.loss_value == pytest.approx(0.006)
    assert np.max(np.abs(grad.d_theta2d)) < 1e-9
    assert np.max(np.abs(grad.d_theta3d)) < 1e-9


def test_non_converged_solve_is_invalid(small_rig, make_plane_pair):
    ws = build_workspace(make_plane_pair(small_rig, v=(0.004, 0.0, 0.0)))
    report = SolveReport(pose=lie.TangentPose.zero(), iterations=100, final_objective=1.0,
                         final_grad_norm=1.0, converged=False, behind_camera_count=0, status='max_iters')
    grad = implicit_gradient(ws, report, lie.TangentPose(v=[0.004, 0, 0], w=[0, 0, 0]))
    assert not grad.valid
    assert grad.reason == 'not_converged'
    assert grad.loss_value == pytest.approx(0.004)
    assert grad.d_theta2d.shape == small_rig.shape


def test_nonsmooth_solve_is_invalid(small_rig, make_plane_pair):
    ws = build_workspace(make_plane_pair(small_rig, v=(0.004, 0.0, 0.0)))
    report = SolveReport(pose=lie.TangentPose.zero(), iterations=0, final_objective=1.0,
                         final_grad_norm=1.0, converged=False, behind_camera_count=0, status='nonsmooth')
    grad = implicit_gradient(ws, report, lie.TangentPose(v=[0.004, 0, 0], w=[0, 0, 0]))
    assert not grad.valid
    assert grad.reason == 'nonsmooth'
    assert not np.any(grad.d_theta2d) and not np.any(grad.d_theta3d)


def test_weight_scaling_keeps_loss_and_rescales_gradient(small_rig, make_plane_pair, rng):
    v = (0.004, -0.002, 0.003)
    base = make_plane_pair(small_rig, v=v)
    flow = base.flow.data.copy()
    flow[8:20, 10:26] += 3.0
    pair = make_frame_pair(small_rig, base.depth_t, base.depth_prev, FlowField(flow))
    p_gt = lie.TangentPose(v=v, w=[0, 0, 0])
    w2 = rng.uniform(0.2, 0.9, small_rig.shape)
    w3 = rng.uniform(0.2, 0.9, small_rig.shape)
    c = 0.5
    cfg = SolverConfig(grad_tol=1e-12, polish_steps=2)

    ws_a = build_workspace(pair, w2, w3)
    ws_b = build_workspace(pair, c * w2, c * w3)
    grad_a = implicit_gradient(ws_a, solve_pose(ws_a, cfg), p_gt)
    grad_b = implicit_gradient(ws_b, solve_pose(ws_b, cfg), p_gt)
    assert grad_a.valid and grad_b.valid
    assert grad_b.loss_value == pytest.approx(grad_a.loss_value, rel=1e-6)

    # f scales by c^2, so dp*/dw scales by 1/c
    d_w_a = grad_a.d_theta2d / (w2 * (1 - w2))
    d_w_b = grad_b.d_theta2d / (c * w2 * (1 - c * w2))
    scale = np.max(np.abs(d_w_a))
    assert scale > 0
    assert np.allclose(d_w_a, c * d_w_b, rtol=1e-4, atol=1e-6 * scale)


def test_split_indices_is_deterministic():
    train, val = split_indices(10, 0.2, seed=3)
    again = split_indices(10, 0.2, seed=3)
    assert np.array_equal(train, again[0]) and np.array_equal(val, again[1])
    assert len(val) == 2
    assert sorted(np.concatenate([train, val]).tolist()) == list(range(10))
    train, val = split_indices(1, 0.5, seed=0)
    assert train.tolist() == [0] and len(val) == 0


def test_weight_params_sigmoid():
    params = WeightParams.uniform((3, 4))
    w2, w3 = params.weights()
    assert np.all(w2.data == 0.5) and np.all(w3.data == 0.5)
    assert sigmoid(0.0) == 0.5


def test_fit_zero_iterations_returns_input():
    rig, dataset = rigid_dataset()
    params = WeightParams.uniform(rig.shape)
    result = fit_weight_maps(dataset, params, FitConfig(iters=0, val_split=0.0))
    assert result.params is params
    assert len(result.trace) == 1
    assert result.best_iteration == 0


def test_fit_never_returns_worse_than_initial():
    rig, dataset = rigid_dataset(n_frames=5)
    result = fit_weight_maps(dataset, WeightParams.uniform(rig.shape), FitConfig(iters=3, step=0.05))
    trace = result.trace
    assert len(trace) == 4
    assert trace['val_loss'][result.best_iteration] <= trace['val_loss'][0]
    assert trace['train_loss'][0] < 1e-6


def test_fit_fails_without_valid_samples():
    rig, dataset = rigid_dataset()
    solver = SolverConfig(grad_tol=1e-300, step_tol=1e-300, max_iters=3)
    with pytest.raises(FittingError):
        fit_weight_maps(dataset, WeightParams.uniform(rig.shape), FitConfig(iters=2, val_split=0.0), solver)


def test_gradcheck_passes():
    cfg = RunConfig()
    for seed in (0, 1):
        errors = run_gradcheck(cfg, seed)
        assert errors['jacobian'] < JACOBIAN_TOL
        assert errors['implicit'] < IMPLICIT_TOL


@pytest.mark.slow
def test_gradcheck_seed_sweep():
    cfg = RunConfig()
    for seed in range(20):
        errors = run_gradcheck(cfg, seed)
        assert errors['jacobian'] < JACOBIAN_TOL, seed
        assert errors['implicit'] < IMPLICIT_TOL, seed


@pytest.mark.slow
def test_fit_downweights_deforming_patch():
    rig = default_rig(32, 24)
    seq = render_sequence(scenario_preset('deforming', seed=0, rig=rig, n_frames=12))
    inside = np.any([f.label == LABEL_PATCH for f in seq.frames], axis=0)
    assert inside.any() and not inside.all()

    result = fit_weight_maps(seq.dataset(), WeightParams.uniform(rig.shape),
                             FitConfig(iters=30, step=0.1, val_split=0.0))
    w2, w3 = result.params.weights()
    fitted = 0.5 * (w2.data + w3.data)
    assert fitted[inside].mean() < fitted[~inside].mean()
    trace = result.trace
    assert trace['train_loss'][result.best_iteration] < trace['train_loss'][0]
    assert trace['valid_samples'][0] == trace['train_samples'][0]
