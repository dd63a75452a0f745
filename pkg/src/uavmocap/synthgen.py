"""Procedural two-camera sequences with ground truth.

World frame is Z-up with the person box centered on the origin of the ground
plane. Cameras use the usual computer-vision convention (x right, y down,
z forward) and always look at the origin.

Output files are JSON-lines, one frame per line, every line tagged with the
schema version. Angles are radians, lengths meters, image quantities pixels.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jax
import numpy as np

from .body_model import BETA_DIM, NUM_JOINTS, BodyParams, BodyTemplate, joints_fn, rot6d_encode
from .bundle import default_prior, default_template
from .camera import (
    CameraPose, CropParams, Intrinsics, crop_params_from_bbox, project, squarify_bbox,
)
from .errors import ConfigError, DatasetError, UavMocapError
from .losses import KeypointObservation
from .pose_prior import LATENT_DIM, PriorBasis, decode

FRAME_SCHEMA = "uavmocap.frame/1"
PATTERNS = ("hover", "orbit", "random_walk")

# body frame (x left, y up, z forward) to world (Z up) at zero yaw
BODY_TO_WORLD = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class SceneConfig:
    frames: int = 30
    fps: float = 40.0
    seed: int = 0
    person_range: float = 2.75
    person_speed: float = 0.6  # m/s, velocity random-walk scale
    pelvis_height: float = 0.95
    yaw_rate: float = 0.5  # rad / sqrt(s)
    camera_distance: float = 10.0
    distance_jitter: float = 0.5
    pitch_range_deg: tuple = (0.0, 45.0)
    patterns: tuple = ("hover", "orbit")
    orbit_rate_deg: float = 12.0  # deg/s
    walk_step_deg: float = 2.0  # deg / sqrt(s)
    pose_std: float = 0.5
    pose_corr_time: float = 1.0  # s
    shape_std: float = 0.5
    intrinsics: tuple = (1400.0, 1400.0, 960.0, 540.0, 1920, 1080)

    def validate(self):
        if self.frames < 1:
            raise ConfigError("need at least one frame")
        if not self.fps > 0:
            raise ConfigError("fps must be positive")
        lo, hi = self.pitch_range_deg
        if not 0.0 <= lo <= hi < 90.0:
            raise ConfigError("pitch range must satisfy 0 <= lo <= hi < 90 degrees")
        for p in self.patterns:
            if p not in PATTERNS:
                raise ConfigError(f"unknown camera pattern {p!r}")
        if len(self.patterns) < 1:
            raise ConfigError("need at least one camera")
        if self.person_range <= 0 or self.camera_distance <= self.distance_jitter + self.person_range:
            raise ConfigError("cameras must stay outside the person box")
        for name in ("person_speed", "yaw_rate", "pose_std", "shape_std", "pose_corr_time"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        return self

    @property
    def num_cameras(self):
        return len(self.patterns)


@dataclass(frozen=True)
class NoiseConfig:
    pixel_sigma: float = 2.0
    occlusion: tuple = (0.0, 0.0)  # per-camera, per-joint probability
    visible_conf: tuple = (0.6, 1.0)
    occluded_conf: tuple = (0.0, 0.3)
    occluded_sigma: float = 25.0
    outlier_prob: float = 0.0
    outlier_px: tuple = (150.0, 400.0)
    second_detector_sigma: float = 2.0
    gate_px: float = 100.0
    crop_pad: float = 0.1
    crop_jitter_px: float = 0.0

    def validate(self, num_cameras):
        occ = self.occlusion_per_camera(num_cameras)
        if any(not 0.0 <= p <= 1.0 for p in occ) or not 0.0 <= self.outlier_prob <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        for lo, hi in (self.visible_conf, self.occluded_conf):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError("confidence ranges must lie in [0, 1]")
        if self.pixel_sigma < 0 or self.occluded_sigma < 0 or self.gate_px <= 0:
            raise ConfigError("noise scales must be nonnegative and the gate positive")
        return self

    def occlusion_per_camera(self, num_cameras):
        occ = self.occlusion
        if np.isscalar(occ):
            return (float(occ),) * num_cameras
        if len(occ) != num_cameras:
            raise ConfigError("occlusion needs one probability per camera")
        return tuple(float(p) for p in occ)


NOISELESS = NoiseConfig(pixel_sigma=0.0, second_detector_sigma=0.0, visible_conf=(1.0, 1.0))


@dataclass
class CameraRecord:
    intrinsics: Intrinsics
    pose: CameraPose
    crop: CropParams
    keypoints: KeypointObservation
    tau_gt: np.ndarray
    phi_gt: np.ndarray

    def ground_truth(self, body: BodyParams) -> BodyParams:
        """Camera-frame ground truth body parameters for this view."""
        return BodyParams(self.tau_gt, self.phi_gt, body.theta, body.beta)

    def to_dict(self):
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "pose": self.pose.to_dict(),
            "crop": self.crop.to_dict(),
            "keypoints": self.keypoints.to_dict(),
            "tau_gt": np.asarray(self.tau_gt).tolist(),
            "phi_gt": np.asarray(self.phi_gt).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            Intrinsics.from_dict(d["intrinsics"]),
            CameraPose.from_dict(d["pose"]),
            CropParams.from_dict(d["crop"]),
            KeypointObservation.from_dict(d["keypoints"]),
            np.asarray(d["tau_gt"], dtype=float),
            np.asarray(d["phi_gt"], dtype=float),
        )


@dataclass
class FrameRecord:
    frame_id: int
    shutter_timestamp: int  # nanoseconds
    cameras: list
    body: BodyParams  # world frame ground truth
    latent: np.ndarray = field(default_factory=lambda: np.zeros(LATENT_DIM))

    def to_dict(self):
        return {
            "schema": FRAME_SCHEMA,
            "frame_id": int(self.frame_id),
            "shutter_timestamp": int(self.shutter_timestamp),
            "body": self.body.to_dict(),
            "latent": np.asarray(self.latent).tolist(),
            "cameras": [c.to_dict() for c in self.cameras],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != FRAME_SCHEMA:
            raise DatasetError(f"unsupported frame schema {d.get('schema')!r}")
        return cls(
            int(d["frame_id"]),
            int(d["shutter_timestamp"]),
            [CameraRecord.from_dict(c) for c in d["cameras"]],
            BodyParams.from_dict(d["body"]),
            np.asarray(d["latent"], dtype=float),
        )


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def look_at_origin(center) -> np.ndarray:
    """World-to-camera rotation for a camera at ``center`` looking at the origin."""
    forward = -np.asarray(center, dtype=float)
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def camera_center(azimuth, pitch, distance) -> np.ndarray:
    return distance * np.array([math.cos(pitch) * math.cos(azimuth),
                                math.cos(pitch) * math.sin(azimuth),
                                math.sin(pitch)])


def person_trajectory(scene: SceneConfig, rng) -> np.ndarray:
    """Ground-plane random walk reflected into the person box, shape (T, 2)."""
    T, dt, L = scene.frames, 1.0 / scene.fps, scene.person_range
    pos = np.empty((T, 2))
    p = rng.uniform(-0.5 * L, 0.5 * L, size=2)
    vel = rng.normal(scale=scene.person_speed, size=2)
    a = math.exp(-dt / 2.0)
    for t in range(T):
        pos[t] = p
        vel = a * vel + math.sqrt(1 - a * a) * rng.normal(scale=scene.person_speed, size=2)
        p = p + vel * dt
        for i in range(2):  # reflect
            if p[i] > L:
                p[i] = 2 * L - p[i]
                vel[i] = -vel[i]
            elif p[i] < -L:
                p[i] = -2 * L - p[i]
                vel[i] = -vel[i]
        p = np.clip(p, -L, L)
    return pos


def latent_walk(scene: SceneConfig, rng, components: int = 3) -> np.ndarray:
    """Smooth latent pose trajectory, shape (T, 32).

    Each latent dimension is a sum of ``components`` sinusoids with random
    phases and frequencies up to ``0.5 / pose_corr_time`` Hz, scaled so the
    stationary standard deviation is ``pose_std``. Human motion is smooth at
    camera rate, which a white-noise driven walk is not.
    """
    T, dt = scene.frames, 1.0 / scene.fps
    t = np.arange(T)[:, None, None] * dt
    horizon = scene.pose_corr_time if scene.pose_corr_time > 0 else 1.0
    freq = rng.uniform(0.05, 0.5, size=(1, LATENT_DIM, components)) / horizon
    phase = rng.uniform(0.0, 2 * np.pi, size=(1, LATENT_DIM, components))
    amp = scene.pose_std * math.sqrt(2.0 / components)
    return amp * np.sum(np.sin(2 * np.pi * freq * t + phase), axis=2)


def camera_tracks(scene: SceneConfig, rng) -> list:
    """Per camera, a list of (azimuth, pitch, distance) per frame."""
    T, dt = scene.frames, 1.0 / scene.fps
    lo, hi = np.radians(scene.pitch_range_deg)
    d0, dj = scene.camera_distance, scene.distance_jitter
    base_az = rng.uniform(0, 2 * np.pi)
    tracks = []
    for c, pattern in enumerate(scene.patterns):
        az = base_az + c * rng.uniform(np.pi / 3, 2 * np.pi / 3)
        pitch = rng.uniform(lo, hi)
        dist = d0 + rng.uniform(-dj, dj)
        track = []
        step = np.radians(scene.walk_step_deg) * math.sqrt(dt)
        for t in range(T):
            if pattern == "orbit":
                a_t = az + np.radians(scene.orbit_rate_deg) * t * dt
                track.append((a_t, pitch, dist))
                continue
            track.append((az, pitch, dist))
            if pattern == "random_walk":
                az += rng.normal(scale=step)
                pitch = float(np.clip(pitch + rng.normal(scale=step), lo, hi))
                dist = float(np.clip(dist + rng.normal(scale=0.05 * math.sqrt(dt)), d0 - dj, d0 + dj))
        tracks.append(track)
    return tracks


_camera_joints = jax.jit(jax.vmap(joints_fn, in_axes=(None, 0, 0, 0, None)))


def gate_keypoints(primary: KeypointObservation, secondary: KeypointObservation,
                   threshold_px: float = 100.0) -> KeypointObservation:
    """Zero the confidence of joints where two detectors disagree by more than the threshold.

    A displacement of exactly ``threshold_px`` is kept.
    """
    dist = np.linalg.norm(primary.xy - secondary.xy, axis=1)
    conf = np.where(dist > threshold_px, 0.0, primary.conf)
    return KeypointObservation(primary.xy.copy(), conf)


def _detect(proj, occluded, noise: NoiseConfig, rng):
    n = proj.shape[0]
    xy = proj + rng.normal(scale=1.0, size=(n, 2)) * np.where(
        occluded, noise.occluded_sigma, noise.pixel_sigma)[:, None]
    conf = np.where(occluded,
                    rng.uniform(*noise.occluded_conf, size=n),
                    rng.uniform(*noise.visible_conf, size=n))
    outlier = rng.uniform(size=n) < noise.outlier_prob
    mag = rng.uniform(*noise.outlier_px, size=n)
    ang = rng.uniform(0, 2 * np.pi, size=n)
    xy = xy + (outlier * mag)[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    secondary = proj + rng.normal(scale=noise.second_detector_sigma, size=(n, 2))
    return gate_keypoints(KeypointObservation(xy, conf), KeypointObservation(secondary, conf),
                          noise.gate_px)


def generate_sequence(scene: SceneConfig | None = None, noise: NoiseConfig | None = None,
                      template: BodyTemplate | None = None,
                      prior: PriorBasis | None = None) -> list:
    scene = (scene or SceneConfig()).validate()
    noise = (noise or NoiseConfig()).validate(scene.num_cameras)
    tmpl = template or default_template()
    prior = prior or default_prior()
    ss = np.random.SeedSequence(scene.seed)
    person_rng, pose_rng, cam_rng, shape_rng, *det_seeds = ss.spawn(4 + scene.num_cameras)
    person_rng, pose_rng = np.random.default_rng(person_rng), np.random.default_rng(pose_rng)
    cam_rng, shape_rng = np.random.default_rng(cam_rng), np.random.default_rng(shape_rng)
    det_rngs = [np.random.default_rng(s) for s in det_seeds]

    T, dt = scene.frames, 1.0 / scene.fps
    ground = person_trajectory(scene, person_rng)
    yaw = person_rng.uniform(0, 2 * np.pi) + np.cumsum(
        np.concatenate([[0.0], person_rng.normal(scale=scene.yaw_rate * math.sqrt(dt), size=T - 1)]))
    latent = latent_walk(scene, pose_rng)
    theta = decode(latent, prior)
    beta = shape_rng.normal(scale=scene.shape_std, size=BETA_DIM)
    tracks = camera_tracks(scene, cam_rng)
    K = Intrinsics(*scene.intrinsics)
    occlusion = noise.occlusion_per_camera(scene.num_cameras)

    body_rot = np.stack([_rot_z(y) @ BODY_TO_WORLD for y in yaw])
    body_tau = np.column_stack([ground, np.full(T, scene.pelvis_height)])
    per_cam = []
    for c in range(scene.num_cameras):
        poses, taus, phis = [], [], []
        for t in range(T):
            R = look_at_origin(camera_center(*tracks[c][t]))
            pose = CameraPose(R, -R @ camera_center(*tracks[c][t]))
            poses.append(pose)
            taus.append(pose.to_camera(body_tau[t]))
            phis.append(rot6d_encode(R @ body_rot[t]))
        taus, phis = np.asarray(taus), np.asarray(phis)
        cam_joints = np.asarray(_camera_joints(tmpl, taus, phis, theta, beta))
        per_cam.append((poses, taus, phis, cam_joints))

    frames = []
    for t in range(T):
        cams = []
        for c in range(scene.num_cameras):
            poses, taus, phis, cam_joints = per_cam[c]
            rng = det_rngs[c]
            proj = project(cam_joints[t], K)
            x0, y0, side = squarify_bbox(*proj.min(axis=0), *proj.max(axis=0), pad=noise.crop_pad)
            if noise.crop_jitter_px > 0:
                jx, jy = rng.normal(scale=noise.crop_jitter_px, size=2)
                x0, y0 = x0 + jx, y0 + jy
            crop = crop_params_from_bbox(x0, y0, side, K)
            occluded = rng.uniform(size=NUM_JOINTS) < occlusion[c]
            obs = _detect(proj, occluded, noise, rng)
            cams.append(CameraRecord(K, poses[t], crop, obs, taus[t], phis[t]))
        frames.append(FrameRecord(
            frame_id=t,
            shutter_timestamp=int(round(t * 1e9 / scene.fps)),
            cameras=cams,
            body=BodyParams(body_tau[t], rot6d_encode(body_rot[t]), theta[t], beta),
            latent=latent[t],
        ))
    return frames


def dumps_dataset(frames) -> str:
    return "".join(json.dumps(f.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
                   for f in frames)


def save_dataset(path, frames) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_dataset(frames))
    return path


def load_dataset(path) -> list:
    frames = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    frames.append(FrameRecord.from_dict(json.loads(line)))
                except (KeyError, TypeError, ValueError, UavMocapError) as exc:
                    raise DatasetError(f"{path}:{lineno}: malformed frame record ({exc})") from exc
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    if not frames:
        raise DatasetError(f"dataset {path} is empty")
    return frames


def dataset_hash(frames) -> str:
    return hashlib.sha256(dumps_dataset(frames).encode()).hexdigest()


def scene_from_dict(d) -> SceneConfig:
    d = dict(d)
    for key in ("pitch_range_deg", "patterns", "intrinsics"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        return SceneConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad scene config: {exc}") from None


def noise_from_dict(d) -> NoiseConfig:
    d = dict(d)
    for key in ("occlusion", "visible_conf", "occluded_conf", "outlier_px"):
        if key in d and not np.isscalar(d[key]):
            d[key] = tuple(d[key])
    try:
        return NoiseConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad noise config: {exc}") from None


def config_dict(cfg) -> dict:
    return asdict(cfg)
