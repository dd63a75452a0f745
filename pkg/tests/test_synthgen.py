import json

import numpy as np
import pytest

from uavmocap.body_model import BodyParams, joints, rot6d_decode
from uavmocap.bundle import default_template
from uavmocap.camera import CROP_SIZE, project
from uavmocap.errors import ConfigError, DatasetError
from uavmocap.synthgen import (
    NOISELESS, KeypointObservation, NoiseConfig, SceneConfig, camera_tracks, dataset_hash,
    dumps_dataset, gate_keypoints, generate_sequence, load_dataset, noise_from_dict,
    person_trajectory, save_dataset, scene_from_dict,
)


@pytest.fixture(scope="module")
def clean():
    return generate_sequence(SceneConfig(frames=12, seed=3), NOISELESS)


def test_noiseless_keypoints_equal_projections(clean, template):
    for f in clean:
        for cam in f.cameras:
            gt = joints(cam.ground_truth(f.body), template)
            np.testing.assert_allclose(cam.keypoints.xy, project(gt, cam.intrinsics), atol=1e-9)
            assert np.all(cam.keypoints.conf == 1.0)


def test_camera_gt_consistent_with_world(clean, template):
    for f in clean:
        world = joints(f.body, template)
        for cam in f.cameras:
            cam_j = joints(cam.ground_truth(f.body), template)
            np.testing.assert_allclose(cam.pose.rotation @ world.T + cam.pose.translation[:, None], cam_j.T, atol=1e-9)
            np.testing.assert_allclose(cam.pose.to_camera(f.body.tau), cam.tau_gt, atol=1e-12)
            np.testing.assert_allclose(rot6d_decode(cam.phi_gt),
                                       cam.pose.rotation @ rot6d_decode(f.body.phi), atol=1e-12)


def test_hover_constant_orbit_moves():
    frames = generate_sequence(SceneConfig(frames=10, seed=1, patterns=("hover", "orbit")), NOISELESS)
    R0, t0 = frames[0].cameras[0].pose.rotation, frames[0].cameras[0].pose.translation
    for f in frames:
        np.testing.assert_array_equal(f.cameras[0].pose.rotation, R0)
        np.testing.assert_array_equal(f.cameras[0].pose.translation, t0)
    assert not np.allclose(frames[-1].cameras[1].pose.rotation, frames[0].cameras[1].pose.rotation)


def test_person_box_10k_frames():
    for seed in range(3):
        scene = SceneConfig(frames=10_000, seed=seed, person_speed=2.0)
        pos = person_trajectory(scene, np.random.default_rng(seed))
        assert np.all(np.abs(pos) <= 2.75)


@pytest.mark.parametrize("patterns", [("hover", "orbit"), ("random_walk", "random_walk", "orbit")])
def test_pitch_and_facing(patterns):
    scene = SceneConfig(frames=400, seed=5, patterns=patterns)
    frames = generate_sequence(scene, NoiseConfig(pixel_sigma=0.0, occlusion=0.0))
    for f in frames[::20]:
        for cam in f.cameras:
            center = cam.pose.to_world(np.zeros(3))
            pitch = np.degrees(np.arcsin(center[2] / np.linalg.norm(center)))
            assert -1e-9 <= pitch <= 45 + 1e-9
            axis = cam.pose.rotation[2]
            cosang = axis @ (-center) / np.linalg.norm(center)
            assert np.degrees(np.arccos(min(1.0, cosang))) < 1.0
    tracks = camera_tracks(scene, np.random.default_rng(0))
    pitches = np.array([[p for _, p, _ in tr] for tr in tracks])
    assert np.all((pitches >= 0) & (pitches <= np.radians(45)))


def test_crop_is_padded_square_of_projections(clean):
    for cam in clean[0].cameras:
        K = cam.intrinsics
        span = np.ptp(cam.keypoints.xy, axis=0).max()
        assert cam.crop.s * CROP_SIZE == pytest.approx(1.1 * span, rel=1e-9)
        center = cam.keypoints.xy.min(axis=0) + np.ptp(cam.keypoints.xy, axis=0) / 2
        np.testing.assert_allclose([K.cx * (1 + cam.crop.bx), K.cy * (1 + cam.crop.by)], center, atol=1e-9)


def test_confidence_model():
    frames = generate_sequence(SceneConfig(frames=20, seed=2), NoiseConfig(occlusion=0.5, gate_px=1e9))
    conf = np.concatenate([c.keypoints.conf for f in frames for c in f.cameras])
    assert np.all((conf <= 0.3) | (conf >= 0.6))
    assert 0.3 < np.mean(conf <= 0.3) < 0.7


def test_pose_is_smooth(clean):
    theta = np.stack([f.body.theta for f in clean])
    assert np.max(np.abs(np.diff(theta, axis=0))) < 0.1


class TestGate:
    def obs(self, n=22):
        xy = np.random.default_rng(0).integers(0, 500, (n, 2)).astype(float)
        return KeypointObservation(xy, np.ones(n))

    def test_identical(self):
        o = self.obs()
        g = gate_keypoints(o, o)
        np.testing.assert_array_equal(g.conf, o.conf)
        np.testing.assert_array_equal(g.xy, o.xy)

    def test_150px_zeroed(self):
        o = self.obs()
        xy = o.xy.copy()
        xy[4, 0] += 150
        g = gate_keypoints(o, KeypointObservation(xy, o.conf))
        assert g.conf[4] == 0 and np.all(np.delete(g.conf, 4) == 1)

    def test_exactly_100_kept(self):
        o = self.obs()
        xy = o.xy.copy()
        xy[2] = o.xy[2] + np.array([0.0, 100.0])
        g = gate_keypoints(o, KeypointObservation(xy, o.conf))
        assert g.conf[2] == 1.0

    def test_outliers_are_gated(self):
        frames = generate_sequence(SceneConfig(frames=10, seed=4),
                                   NoiseConfig(outlier_prob=0.3, outlier_px=(150.0, 300.0)))
        for f in frames:
            for cam in f.cameras:
                gt = project(joints(cam.ground_truth(f.body), default_template()), cam.intrinsics)
                far = np.linalg.norm(cam.keypoints.xy - gt, axis=1) > 120
                assert np.all(cam.keypoints.conf[far] == 0)


def test_determinism_and_io(tmp_path):
    scene, noise = SceneConfig(frames=6, seed=11), NoiseConfig(occlusion=(0.2, 0.1))
    a, b = generate_sequence(scene, noise), generate_sequence(scene, noise)
    assert dumps_dataset(a) == dumps_dataset(b)
    assert dataset_hash(a) == dataset_hash(b)
    assert dataset_hash(a) != dataset_hash(generate_sequence(SceneConfig(frames=6, seed=12), noise))
    p1, p2 = save_dataset(tmp_path / "a.jsonl", a), save_dataset(tmp_path / "b.jsonl", b)
    assert p1.read_bytes() == p2.read_bytes()
    back = load_dataset(p1)
    assert dumps_dataset(back) == dumps_dataset(a)
    assert isinstance(back[0].body, BodyParams)
    rec = json.loads(p1.read_text().splitlines()[0])
    assert rec["schema"] == "uavmocap.frame/1" and rec["frame_id"] == 0


def test_timestamps(clean):
    ts = [f.shutter_timestamp for f in clean]
    assert ts[0] == 0 and ts[1] == 25_000_000 and all(np.diff(ts) > 0)


@pytest.mark.parametrize("kw", [dict(frames=0), dict(pitch_range_deg=(10, 95)), dict(patterns=("spin",)),
                                dict(camera_distance=3.0), dict(fps=0)])
def test_bad_scene(kw):
    with pytest.raises(ConfigError):
        generate_sequence(SceneConfig(**kw))


@pytest.mark.parametrize("kw", [dict(occlusion=1.5), dict(occlusion=(0.1,)), dict(visible_conf=(0.8, 0.2)),
                                dict(outlier_prob=-0.1)])
def test_bad_noise(kw):
    with pytest.raises(ConfigError):
        generate_sequence(SceneConfig(frames=1), NoiseConfig(**kw))


def test_config_dicts():
    assert scene_from_dict({"patterns": ["orbit"], "frames": 3}).patterns == ("orbit",)
    assert noise_from_dict({"occlusion": [0.1, 0.2]}).occlusion == (0.1, 0.2)
    with pytest.raises(ConfigError):
        scene_from_dict({"nonsense": 1})


def test_bad_dataset_files(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "missing.jsonl")
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(DatasetError):
        load_dataset(empty)
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"schema": "other/9"}\n')
    with pytest.raises(DatasetError):
        load_dataset(bad)
