import json

import numpy as np
import pytest

from uavmocap.body_model import BodyParams
from uavmocap.camera import CameraPose
from uavmocap.errors import DatasetError, ShapeMismatch, ValidationError
from uavmocap.metrics import (
    MODES, ablation_csv, dumps_estimates, evaluate, load_estimates, mpe, mpe_per_frame, mpjpe,
    mpjpe_per_frame, run_ablation, save_estimates, write_trajectories_csv,
)
from uavmocap.synthgen import NOISELESS, SceneConfig, generate_sequence

from conftest import random_rotation


@pytest.fixture(scope="module")
def frames():
    return generate_sequence(SceneConfig(frames=3, seed=5), NOISELESS)


def gt_estimates(frames):
    return {f.frame_id: [cam.ground_truth(f.body) for cam in f.cameras] for f in frames}


def identity_poses(T, C):
    return [[CameraPose(np.eye(3), np.zeros(3)) for _ in range(C)] for _ in range(T)]


class TestMpe:
    def test_zero(self, rng):
        gt = rng.normal(size=(7, 3))
        R = np.stack([[random_rotation(rng) for _ in range(2)] for _ in range(7)])
        t = rng.normal(size=(7, 2, 3))
        est = np.einsum("tcij,tj->tci", R, gt) + t
        assert mpe(est, gt, (R, t)) == pytest.approx(0.0, abs=1e-12)

    def test_one_camera_offset(self, rng):
        gt = rng.normal(size=(10, 3))
        est = np.stack([gt, gt + np.array([0.0, 0.3, 0.0])], axis=1)
        assert mpe(est, gt, identity_poses(10, 2)) == pytest.approx(0.15, abs=1e-12)

    def test_order_invariance(self, rng):
        gt = rng.normal(size=(6, 3))
        est = gt[:, None] + rng.normal(size=(6, 2, 3))
        perm = rng.permutation(6)
        poses = identity_poses(6, 2)
        assert mpe(est[perm], gt[perm], poses) == pytest.approx(mpe(est, gt, poses), rel=1e-14)
        np.testing.assert_allclose(mpe_per_frame(est, gt, poses).mean(), mpe(est, gt, poses))

    def test_shapes(self):
        with pytest.raises(ShapeMismatch):
            mpe(np.zeros((3, 2, 3)), np.zeros((4, 3)), identity_poses(3, 2))
        with pytest.raises(ShapeMismatch):
            mpe(np.zeros((3, 2, 3)), np.zeros((3, 3)), identity_poses(3, 1))


class TestMpjpe:
    def test_zero_and_translation(self, rng):
        gt = rng.normal(size=(4, 2, 22, 3))
        assert mpjpe(gt, gt) == 0.0
        shifted = gt + rng.normal(size=(4, 2, 1, 3))
        assert mpjpe(shifted, gt) == pytest.approx(0.0, abs=1e-14)

    def test_known_value(self, rng):
        gt = rng.normal(size=(2, 2, 22, 3))
        est = gt.copy()
        est[:, :, 1:, 0] += 0.1  # every non-root joint moves 10 cm
        assert mpjpe(est, gt) == pytest.approx(0.1 * 21 / 22, rel=1e-12)

    def test_shapes(self):
        with pytest.raises(ShapeMismatch):
            mpjpe(np.zeros((1, 2, 21, 3)), np.zeros((1, 2, 21, 3)))
        with pytest.raises(ShapeMismatch):
            mpjpe_per_frame(np.zeros((1, 2, 22, 3)), np.zeros((2, 2, 22, 3)))


class TestEvaluate:
    def test_ground_truth_scores_zero(self, frames):
        rep = evaluate(frames, gt_estimates(frames), {"mode": "airpose"}, seed=3)
        assert rep.mpe_m < 1e-12 and rep.mpjpe_m < 1e-12
        assert rep.frame_ids == [0, 1, 2] and len(rep.mpe_per_frame) == 3
        d = json.loads(rep.to_json())
        assert d["seed"] == 3 and d["config"]["mode"] == "airpose"

    def test_dropped_frames_skipped(self, frames):
        est = gt_estimates(frames)
        del est[1]
        assert evaluate(frames, est).frame_ids == [0, 2]

    def test_offset(self, frames):
        est = gt_estimates(frames)
        for fid, row in est.items():
            p = row[1]
            row[1] = BodyParams(p.tau + [0.3, 0, 0], p.phi, p.theta, p.beta)
        rep = evaluate(frames, est)
        assert rep.mpe_m == pytest.approx(0.15, abs=1e-12)
        assert rep.mpjpe_m < 1e-12

    def test_errors(self, frames):
        with pytest.raises(ValidationError):
            evaluate(frames, {})
        with pytest.raises(DatasetError):
            evaluate(frames, {99: gt_estimates(frames)[0]})
        with pytest.raises(ShapeMismatch):
            evaluate(frames, {0: gt_estimates(frames)[0][:1]})


def test_estimate_file_round_trip(tmp_path, frames):
    est = gt_estimates(frames)
    path = save_estimates(tmp_path / "e.jsonl", est, "fullcam")
    back, mode = load_estimates(path)
    assert mode == "fullcam" and sorted(back) == sorted(est)
    assert dumps_estimates(back, mode) == path.read_text()
    path.write_text(path.read_text().replace('"fullcam"', '"baseline"', 1))
    with pytest.raises(DatasetError):
        load_estimates(path)
    path.write_text("{}\n")
    with pytest.raises(DatasetError):
        load_estimates(path)


def test_trajectories_csv(tmp_path, frames):
    path = write_trajectories_csv(tmp_path / "t.csv", gt_estimates(frames), frames)
    rows = [r.split(",") for r in path.read_text().splitlines()]
    assert rows[0][:5] == ["frame_id", "camera", "x", "y", "z"] and len(rows) == 1 + 3 * 2
    for r in rows[1:]:
        np.testing.assert_allclose([float(v) for v in r[5:8]], [float(v) for v in r[8:11]], atol=1e-9)


class TestAblation:
    def test_oracle_exact_is_zero(self, frames):
        res = run_ablation(frames, "oracle", {"alpha": 1.0, "sigma": 0.0})
        assert set(res.reports) == set(MODES)
        for rep in res.reports.values():
            assert rep.mpe_m < 1e-6 and rep.mpjpe_m < 1e-6
        assert "Baseline" in res.table()
        lines = ablation_csv([res]).splitlines()
        assert len(lines) == 1 + len(MODES)

    def test_deterministic(self, frames):
        a = run_ablation(frames, "oracle", {"alpha": 0.5, "sigma": 0.1}, seed=2)
        b = run_ablation(frames, "oracle", {"alpha": 0.5, "sigma": 0.1}, seed=2)
        assert a.to_dict() == b.to_dict()
        assert a.reports["baseline"].mpe_m > 0

    def test_dataset_hash_guard(self, monkeypatch):
        import uavmocap.metrics as m

        data = generate_sequence(SceneConfig(frames=2, seed=8), NOISELESS)
        real = m.estimate_frames

        def mutating(frames, mode, refiner):
            out = real(frames, mode, refiner)
            frames[0].body.tau[0] += 1.0  # a mode that tampers with the shared data
            return out

        monkeypatch.setattr(m, "estimate_frames", mutating)
        with pytest.raises(ValidationError):
            run_ablation(data, "oracle", {"alpha": 1.0}, modes=("baseline", "fullcam"))

    def test_empty(self):
        with pytest.raises(DatasetError):
            run_ablation([], "oracle")
