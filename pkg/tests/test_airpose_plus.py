import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from uavmocap.airpose_plus import (
    OptimizerConfig, SequenceEstimate, init_from_airpose, load_estimate, observations_from_frames,
    refine, relative_camera_trajectory, save_estimate, write_trace_csv, write_trajectory_csv,
)
from uavmocap.body_model import BodyParams, rot6d_decode, rot6d_encode
from uavmocap.bundle import default_prior
from uavmocap.errors import (
    ConfigError, DatasetError, EmptySequence, NonFiniteObjective, SequenceTooShort, ShapeMismatch,
)
from uavmocap.pose_prior import encode
from uavmocap.synthgen import NOISELESS, NoiseConfig, SceneConfig, generate_sequence


def gt_per_frame(frames):
    return [[cam.ground_truth(f.body) for cam in f.cameras] for f in frames]


def perturbed(frames, rng, tau_std=0.05, theta_std=0.05, angle=0.05):
    out = []
    for f in frames:
        row = []
        for cam in f.cameras:
            R = Rotation.from_rotvec(rng.normal(scale=angle, size=3)).as_matrix() @ rot6d_decode(cam.phi_gt)
            row.append(BodyParams(cam.tau_gt + rng.normal(scale=tau_std, size=3), rot6d_encode(R),
                                  f.body.theta + rng.normal(scale=theta_std, size=f.body.theta.shape),
                                  f.body.beta + rng.normal(scale=0.05, size=10)))
        out.append(row)
    return out


@pytest.fixture(scope="module")
def short():
    return generate_sequence(SceneConfig(frames=5, seed=7, shape_std=0.0), NOISELESS)


@pytest.fixture(scope="module")
def refined(short):
    init = init_from_airpose(perturbed(short, np.random.default_rng(0)))
    seq, trace = refine(init, observations_from_frames(short))
    return init, seq, trace


class TestInit:
    def test_agreeing_cameras(self, short):
        seq = init_from_airpose(gt_per_frame(short))
        prior = default_prior()
        for t, f in enumerate(short):
            np.testing.assert_allclose(seq.v[t], encode(f.body.theta, prior), atol=1e-12)
        np.testing.assert_allclose(seq.beta, short[0].body.beta, atol=1e-15)
        assert seq.num_cameras == 2 and seq.num_frames == 5

    def test_mean_theta(self, short):
        rows = gt_per_frame(short)
        a, b = rows[0]
        rows[0] = [BodyParams(a.tau, a.phi, a.theta + 0.1, a.beta), BodyParams(b.tau, b.phi, b.theta - 0.3, b.beta)]
        seq = init_from_airpose(rows)
        np.testing.assert_allclose(seq.v[0], encode(a.theta - 0.1, default_prior()), atol=1e-12)

    def test_errors(self, short):
        with pytest.raises(EmptySequence):
            init_from_airpose([])
        rows = gt_per_frame(short)
        rows[1] = rows[1][:1]
        with pytest.raises(ShapeMismatch):
            init_from_airpose(rows)

    def test_shape_invariants(self):
        with pytest.raises(ShapeMismatch):
            SequenceEstimate(np.zeros(10), np.zeros((3, 32)), np.zeros((2, 4, 6)), np.zeros((2, 3, 3)))
        with pytest.raises(ShapeMismatch):
            SequenceEstimate(np.zeros(10), np.zeros((3, 32)), np.zeros((2, 3, 6)), np.zeros((2, 3, 3)), [1])


class TestRefine:
    def test_monotone_and_improves(self, short, refined):
        init, seq, trace = refined
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert trace[-1] < trace[0]
        gt_tau = np.array([[cam.tau_gt for cam in f.cameras] for f in short]).transpose(1, 0, 2)
        assert np.abs(seq.tau - gt_tau).mean() < np.abs(init.tau - gt_tau).mean()

    def test_already_optimal(self, short, refined):
        _, seq, trace = refined
        again, trace2 = refine(seq, observations_from_frames(short))
        assert len(trace2) <= 2
        assert trace2[-1] <= trace[-1]
        assert abs(trace2[-1] - trace[-1]) <= 1e-6 * max(1.0, trace[-1])
        np.testing.assert_allclose(again.tau, seq.tau, atol=1e-4)

    def test_deterministic(self, short, refined):
        init, seq, trace = refined
        seq2, trace2 = refine(init, observations_from_frames(short))
        assert trace2 == trace
        np.testing.assert_array_equal(seq2.tau, seq.tau)

    def test_lbfgs_direction_monotone(self, short):
        init = init_from_airpose(perturbed(short, np.random.default_rng(1)))
        _, trace = refine(init, observations_from_frames(short),
                          OptimizerConfig(direction="lbfgs", max_iterations=30))
        assert all(b <= a for a, b in zip(trace, trace[1:])) and trace[-1] < trace[0]

    def test_zero_iterations(self, short):
        init = init_from_airpose(gt_per_frame(short))
        seq, trace = refine(init, observations_from_frames(short), OptimizerConfig(max_iterations=0,
                                                                                   repair_frames=False))
        assert len(trace) == 1
        np.testing.assert_array_equal(seq.tau, init.tau)

    def test_noisy_mpe_improves(self):
        frames = generate_sequence(SceneConfig(frames=4, seed=3), NoiseConfig())
        init = init_from_airpose(perturbed(frames, np.random.default_rng(2), tau_std=0.2))
        seq, _ = refine(init, observations_from_frames(frames))
        gt = np.array([[cam.tau_gt for cam in f.cameras] for f in frames]).transpose(1, 0, 2)
        err = lambda s: np.linalg.norm(s.tau - gt, axis=-1).mean()
        assert err(seq) < err(init)

    def test_errors(self, short):
        obs = observations_from_frames(short)
        init = init_from_airpose(gt_per_frame(short))
        with pytest.raises(SequenceTooShort):
            refine(init_from_airpose(gt_per_frame(short[:1])), observations_from_frames(short[:1]))
        with pytest.raises(ShapeMismatch):
            refine(init_from_airpose(gt_per_frame(short[:3])), obs)
        bad = init.copy()
        bad.tau[1, 2] = [0.0, 0.0, -5.0]
        with pytest.raises(NonFiniteObjective) as info:
            refine(bad, obs)
        assert info.value.frame == 2
        with pytest.raises(ConfigError):
            OptimizerConfig(direction="adam")


class TestRelativeTrajectory:
    def test_ground_truth_composition(self, short):
        seq = init_from_airpose(gt_per_frame(short))
        rows = relative_camera_trajectory(seq)
        for t, f in enumerate(short):
            p1, p2 = f.cameras[0].pose, f.cameras[1].pose
            R = p1.rotation @ p2.rotation.T
            pos = p1.translation - R @ p2.translation
            np.testing.assert_allclose(rows[t, :3], pos, atol=1e-9)
            qx, qy, qz, qw = Rotation.from_matrix(R).as_quat()
            q = np.array([qw, qx, qy, qz]) * np.sign(qw)
            np.testing.assert_allclose(rows[t, 3:], q, atol=1e-9)

    def test_identity(self, short):
        seq = init_from_airpose(gt_per_frame(short))
        seq.phi[1], seq.tau[1] = seq.phi[0], seq.tau[0]
        rows = relative_camera_trajectory(seq)
        np.testing.assert_allclose(rows, np.tile([0, 0, 0, 1, 0, 0, 0], (5, 1)), atol=1e-12)

    def test_perturbation_angle(self, short):
        seq = init_from_airpose(gt_per_frame(short))
        seq.phi[1], seq.tau[1] = seq.phi[0], seq.tau[0]
        eps = 0.01
        seq.phi[1, 0] = rot6d_encode(Rotation.from_rotvec([0, eps, 0]).as_matrix() @ rot6d_decode(seq.phi[0, 0]))
        q = relative_camera_trajectory(seq)[0, 3:]
        assert 2 * np.arccos(np.clip(q[0], -1, 1)) == pytest.approx(eps, rel=1e-9)

    def test_needs_two_cameras(self, short):
        seq = init_from_airpose([row[:1] for row in gt_per_frame(short)])
        with pytest.raises(ShapeMismatch):
            relative_camera_trajectory(seq)


def test_file_round_trip(tmp_path, short, refined):
    _, seq, trace = refined
    back = load_estimate(save_estimate(tmp_path / "r.jsonl", seq))
    np.testing.assert_array_equal(back.tau, seq.tau)
    np.testing.assert_array_equal(back.phi, seq.phi)
    np.testing.assert_array_equal(back.v, seq.v)
    assert back.frame_ids == seq.frame_ids
    lines = write_trace_csv(tmp_path / "t.csv", trace).read_text().splitlines()
    assert lines[0] == "iteration,loss" and len(lines) == len(trace) + 1
    traj = write_trajectory_csv(tmp_path / "j.csv", seq, fps=40.0).read_text().splitlines()
    assert traj[0] == "t,x,y,z,qw,qx,qy,qz" and traj[2].startswith("0.025,")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"frame_id": 0}\n')
    with pytest.raises(DatasetError):
        load_estimate(bad)
    with pytest.raises(DatasetError):
        load_estimate(tmp_path / "none.jsonl")
