import os
import shutil

import numpy as np
import pytest

from stereovo import lie
from stereovo.camera import default_rig
from stereovo.config import RunConfig, ScenarioConfig, SolverConfig
from stereovo.errors import (ConfigError, RasterFormatError, SequenceLayoutError, TrajectoryFormatError,
                             UsageError)
from stereovo.fields import WeightMap
from stereovo.io import (HEADER_SIZE, SequenceReader, read_raster, read_rig, read_run_config,
                         read_sequence, read_trajectory, read_weights, write_raster, write_rig,
                         write_run_config, write_sequence, write_trajectory, write_weights)
from stereovo.solver import chain_trajectory
from stereovo.synth import render_sequence, scenario_preset
from stereovo.trajeval import Trajectory

DEFAULT_CFG = os.path.join(os.path.dirname(__file__), '..', 'configs', 'default.cfg')


@pytest.fixture(scope='module')
def small_sequence():
    return render_sequence(scenario_preset('scanning', seed=2, rig=default_rig(24, 18), n_frames=3))


def test_raster_single_pixel(tmp_path):
    path = write_raster(str(tmp_path / 'one.gvr'), np.array([[0.5]]))
    assert os.path.getsize(path) == 24
    r = read_raster(path)
    assert r.data.shape == (1, 1) and r.data[0, 0] == 0.5
    assert r.valid is None


def test_raster_with_validity_plane(tmp_path):
    data = np.arange(12, dtype=float).reshape(3, 4)
    valid = data % 3 != 0
    path = write_raster(str(tmp_path / 'v.gvr'), np.where(valid, data, np.nan), valid)
    blob = open(path, 'rb').read()
    assert blob[16] & 1
    assert len(blob) == HEADER_SIZE + 4 * 12 + 12
    r = read_raster(path)
    assert np.array_equal(r.valid, valid)
    assert np.array_equal(r.data[valid], data[valid])


def test_raster_fuzz_round_trip(tmp_path, rng):
    for i in range(100):
        H, W, C = rng.integers(1, 9, size=3)
        data = rng.normal(size=(H, W, C)).astype(np.float32)
        valid = rng.random((H, W)) > 0.3 if i % 2 else None
        path = write_raster(str(tmp_path / f'{i}.gvr'), data, valid)
        r = read_raster(path)
        expected = data[..., 0] if C == 1 else data
        assert r.data.dtype == np.float32
        assert r.data.tobytes() == expected.tobytes()
        if valid is not None:
            assert np.array_equal(r.valid, valid)


def _corrupt(path, blob):
    with open(path, 'wb') as f:
        f.write(blob)
    return path


def test_raster_format_errors(tmp_path):
    good = open(write_raster(str(tmp_path / 'g.gvr'), np.ones((2, 3)), np.ones((2, 3), dtype=bool)),
                'rb').read()
    bad = str(tmp_path / 'bad.gvr')
    cases = {
        'byte 0': b'XVR1' + good[4:],
        'truncated payload': good[:-1],
        'trailing data': good + b'\x00',
        'byte 16': good[:16] + b'\x03' + good[17:],
        'truncated header': good[:10],
        'validity byte': good[:-1] + b'\x02',
    }
    for message, blob in cases.items():
        with pytest.raises(RasterFormatError, match=message):
            read_raster(_corrupt(bad, blob))

    nan_inside = bytearray(good)
    nan_inside[HEADER_SIZE:HEADER_SIZE + 4] = np.array([np.nan], dtype='<f4').tobytes()
    with pytest.raises(RasterFormatError, match=f'byte {HEADER_SIZE}'):
        read_raster(_corrupt(bad, bytes(nan_inside)))
    with pytest.raises(RasterFormatError):
        write_raster(bad, np.full((2, 2), np.inf))


def test_trajectory_identity_line(tmp_path):
    traj = chain_trajectory([lie.TangentPose.zero()], stamps=[0.0, 1.0])
    path = write_trajectory(str(tmp_path / 'id.traj'), traj)
    assert open(path).readline() == '0 0 0 0 0 0 0 1\n'


def test_trajectory_round_trip(tmp_path, rng):
    steps = [lie.random_tangent(rng, max_angle=1.0, max_translation=0.1) for _ in range(99)]
    traj = chain_trajectory(steps, stamps=np.cumsum(rng.uniform(0.01, 0.1, 100)))
    back = read_trajectory(write_trajectory(str(tmp_path / 'r.traj'), traj))
    assert np.array_equal(back.stamps, traj.stamps)
    for a, b in zip(traj.poses, back.poses):
        assert lie.rotation_angle(a.R.T @ b.R) < 1e-9
        assert np.array_equal(a.t, b.t)


def test_trajectory_format_errors(tmp_path):
    path = str(tmp_path / 't.traj')

    def read(text):
        with open(path, 'w') as f:
            f.write(text)
        return read_trajectory(path)

    with pytest.raises(TrajectoryFormatError, match=':2:'):
        read('0 0 0 0 0 0 0 1\n1 0 0 0 0 0 1\n')
    with pytest.raises(TrajectoryFormatError, match='quaternion'):
        read('0 0 0 0 0 0 0 1.01\n')
    with pytest.raises(TrajectoryFormatError, match='does not increase'):
        read('1 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n')
    with pytest.raises(TrajectoryFormatError, match='no poses'):
        read('# header only\n\n')
    with pytest.raises(TrajectoryFormatError, match='non-numeric'):
        read('0 0 0 zero 0 0 0 1\n')

    traj = read('# stamp tx ty tz qx qy qz qw\n\n0 1 2 3 0 0 0 1.00005\n')
    assert np.allclose(traj.poses[0].t, [1, 2, 3])
    assert np.allclose(traj.poses[0].R, np.eye(3))


def test_default_config_file():
    cfg = read_run_config(DEFAULT_CFG)
    assert cfg.rig.width == 320 and cfg.rig.fx == 260.0
    assert cfg.solver == SolverConfig()
    assert cfg.estimate.residuals == 'combined'
    assert cfg.scenario.preset == 'breathing'


def test_config_overrides_and_errors(tmp_path):
    cfg = read_run_config(DEFAULT_CFG, {'solver.max_iters': '7', 'scenario.translation': '0.001, 0, 0'})
    assert cfg.solver.max_iters == 7
    assert cfg.scenario.translation == [0.001, 0.0, 0.0]

    with pytest.raises(ConfigError):
        read_run_config(None, {'solver.max_itres': '7'})
    with pytest.raises(ConfigError):
        read_run_config(None, {'optics.fx': '7'})
    with pytest.raises(ConfigError):
        read_run_config(None, {'solver.max_iters': 'many'})
    with pytest.raises(ConfigError):
        read_run_config(str(tmp_path / 'missing.cfg'))
    with pytest.raises(UsageError):
        read_run_config(None, {'solver': '7'})


def test_config_write_read_round_trip(tmp_path):
    cfg = RunConfig(rig=default_rig(40, 30, baseline=0.004),
                    solver=SolverConfig(max_iters=33, grad_tol=1.5e-9, init_policy='previous_pose'),
                    scenario=ScenarioConfig(preset='deforming', translation=[0.001, -0.002, 0.0],
                                            flow_noise=0.05))
    back = read_run_config(write_run_config(str(tmp_path / 'run.cfg'), cfg))
    assert back == cfg


def test_rig_file(tmp_path):
    rig = default_rig(24, 18)
    assert read_rig(write_rig(str(tmp_path / 'rig.cfg'), rig)) == rig
    other = str(tmp_path / 'other.cfg')
    write_run_config(other, RunConfig(rig=rig), sections=('rig', 'solver'))
    with pytest.raises(SequenceLayoutError):
        read_rig(other)


def test_weights_round_trip(tmp_path):
    w2 = WeightMap(np.full((4, 5), 0.25))
    w3 = WeightMap(np.linspace(0, 1, 20).reshape(4, 5))
    p2, p3 = write_weights(str(tmp_path / 'w'), w2, w3)
    r2, r3 = read_weights(p2, p3, (4, 5))
    assert np.array_equal(r2.data, w2.data)
    assert np.allclose(r3.data, w3.data, atol=1e-7)
    with pytest.raises(RasterFormatError):
        read_weights(p2, p3, (5, 4))


def test_sequence_two_frames_give_one_pair(tmp_path):
    seq = render_sequence(scenario_preset('breathing', seed=1, rig=default_rig(24, 18), n_frames=2))
    seq_dir = write_sequence(str(tmp_path / 'seq'), seq)
    reader = SequenceReader(seq_dir)
    assert len(reader) == 2
    pairs = list(reader.pairs())
    assert [t for t, _ in pairs] == [1]
    assert pairs[0][1].shape == (18, 24)
    assert not os.path.exists(os.path.join(seq_dir, '000000.flow.gvr'))


def test_sequence_layout_errors(tmp_path, small_sequence):
    seq_dir = write_sequence(str(tmp_path / 'seq'), small_sequence)

    gap = str(tmp_path / 'gap')
    shutil.copytree(seq_dir, gap)
    for name in os.listdir(gap):
        if name.startswith('000001.'):
            os.remove(os.path.join(gap, name))
    with pytest.raises(SequenceLayoutError, match='missing frame 000001'):
        SequenceReader(gap)

    no_flow = str(tmp_path / 'no_flow')
    shutil.copytree(seq_dir, no_flow)
    os.remove(os.path.join(no_flow, '000002.flow.gvr'))
    with pytest.raises(SequenceLayoutError, match='000002'):
        SequenceReader(no_flow)

    wrong_shape = str(tmp_path / 'wrong_shape')
    shutil.copytree(seq_dir, wrong_shape)
    write_raster(os.path.join(wrong_shape, '000001.depth.gvr'), np.full((4, 4), 0.1))
    with pytest.raises(SequenceLayoutError, match='000001'):
        list(SequenceReader(wrong_shape).pairs())

    with pytest.raises(SequenceLayoutError):
        SequenceReader(str(tmp_path / 'nowhere'))


def test_sequence_depth_from_parallax(tmp_path, small_sequence):
    seq_dir = write_sequence(str(tmp_path / 'seq'), small_sequence)
    reader = SequenceReader(seq_dir)
    with_depth = reader.load_frame(1)
    os.remove(os.path.join(seq_dir, '000001.depth.gvr'))
    from_parallax = SequenceReader(seq_dir).load_frame(1)
    assert np.allclose(from_parallax.depth.data, with_depth.depth.data, atol=1e-5)


def test_sequence_rewrite_is_bitwise(tmp_path, small_sequence):
    first = write_sequence(str(tmp_path / 'a'), small_sequence)
    again = write_sequence(str(tmp_path / 'b'), read_sequence(first))
    names = sorted(os.listdir(first))
    assert names == sorted(os.listdir(again))
    for name in names:
        if name.endswith('.gvr') or name == 'rig.cfg':
            assert open(os.path.join(first, name), 'rb').read() == open(os.path.join(again, name), 'rb').read()
    a = read_trajectory(os.path.join(first, 'gt.traj'))
    b = read_trajectory(os.path.join(again, 'gt.traj'))
    for Ta, Tb in zip(a.poses, b.poses):
        assert np.allclose(Ta.matrix, Tb.matrix, atol=1e-12)


def test_missing_and_unwritable_files_raise_library_errors(tmp_path):
    missing = str(tmp_path / 'absent' / 'x')
    with pytest.raises(TrajectoryFormatError, match='cannot read'):
        read_trajectory(missing)
    with pytest.raises(RasterFormatError, match='cannot read'):
        read_raster(missing)
    with pytest.raises(TrajectoryFormatError, match='cannot write'):
        write_trajectory(missing, Trajectory(np.zeros(1), [lie.RigidTransform.identity()]))
    with pytest.raises(RasterFormatError, match='cannot write'):
        write_raster(missing, np.zeros((2, 2)))
    with pytest.raises(ConfigError, match='cannot write'):
        write_run_config(missing, RunConfig())
    blocker = tmp_path / 'file'
    blocker.write_text('')
    with pytest.raises(SequenceLayoutError, match='cannot create'):
        write_weights(str(blocker / 'sub'), WeightMap(np.ones((2, 2))), WeightMap(np.ones((2, 2))))
