"""Training, fine-tuning and sequence-refinement objectives.

Every loss returns a :class:`LossResult` whose ``terms`` are the weighted
contributions, summed left to right into ``total``; ``raw`` holds the
unweighted values. :func:`grad` differentiates any loss with respect to all
of its free parameters and returns the gradient in the same structure as the
parameters (``BodyParams``, a list of them, or a sequence estimate).

Translations are in meters and keypoints in pixels. When crop parameters are
passed, ``params.tau`` is read as a crop-frame translation and mapped to the
full camera frame before projection; otherwise it is already full-frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import jax
import jax.numpy as jnp
import numpy as np

from .body_model import (
    BETA_DIM, NUM_JOINTS, THETA_DIM, BodyParams, BodyTemplate, joints_fn, vertices_fn,
    forward_kinematics, decode_6d,
)
from .bundle import default_prior, default_template
from .camera import MIN_DEPTH, CropParams, Intrinsics, crop_to_full_jnp, project_jnp
from .errors import BehindCamera, NonFiniteObjective, SequenceTooShort, ShapeMismatch
from .pose_prior import LATENT_DIM, PriorBasis, decode_jnp, encode_jnp

DEFAULT_SIGMA = 100.0
DEFAULT_CONF_THRESHOLD = 0.25 * 2 * NUM_JOINTS

_NO_CROP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class LossWeights:
    j2d: float = 0.0
    j3d: float = 0.0
    phi: float = 0.0
    tau: float = 0.0
    theta: float = 0.0
    beta: float = 0.0
    V: float = 0.0
    vposer: float = 0.0
    temp: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ShapeMismatch(f"weight {f.name} must be nonnegative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{f.name: getattr(self, f.name) * factor for f in fields(self)})

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))


PRESETS = {
    "eq3-baseline-syn": LossWeights(j2d=0.01, j3d=1, phi=1, theta=100, beta=1, V=100),
    "eq4-airpose-syn": LossWeights(j2d=0.002, j3d=1, phi=1, tau=10, theta=50, beta=1, V=50),
    "eq5-finetune-baseline": LossWeights(j2d=0.01, beta=5, vposer=1),
    "eq6-finetune-airpose": LossWeights(j2d=0.01, beta=5, vposer=0.1, theta=100),
    "eq8-airpose-plus": LossWeights(j2d=1, vposer=0.05, temp=1, beta=2000),
}


def preset(name: str) -> LossWeights:
    try:
        return PRESETS[name]
    except KeyError:
        raise ShapeMismatch(f"unknown weight preset {name!r}; known: {sorted(PRESETS)}") from None


@dataclass
class KeypointObservation:
    """2D detections of the 22 joints in one camera; ``conf == 0`` means missing."""

    xy: np.ndarray
    conf: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float)
        self.conf = np.asarray(self.conf, dtype=float)
        if self.xy.shape != (NUM_JOINTS, 2) or self.conf.shape != (NUM_JOINTS,):
            raise ShapeMismatch("keypoint observation needs (22, 2) positions and 22 confidences")
        if np.any(self.conf < 0) or np.any(self.conf > 1):
            raise ShapeMismatch("confidences must lie in [0, 1]")

    def to_dict(self):
        return {"xy": self.xy.tolist(), "conf": self.conf.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["xy"], d["conf"])


@dataclass
class GroundTruth:
    """Camera-frame ground truth; ``tau_gt``/``phi_gt`` are per camera when stacked."""

    tau_gt: np.ndarray
    phi_gt: np.ndarray
    theta_gt: np.ndarray
    beta_gt: np.ndarray

    def __post_init__(self):
        self.tau_gt = np.asarray(self.tau_gt, dtype=float)
        self.phi_gt = np.asarray(self.phi_gt, dtype=float)
        self.theta_gt = np.asarray(self.theta_gt, dtype=float)
        self.beta_gt = np.asarray(self.beta_gt, dtype=float)
        if self.tau_gt.shape[-1] != 3 or self.phi_gt.shape[-1] != 6:
            raise ShapeMismatch("ground truth tau/phi have wrong arity")
        if self.tau_gt.shape[:-1] != self.phi_gt.shape[:-1]:
            raise ShapeMismatch("ground truth tau/phi camera counts differ")
        if self.theta_gt.shape != (THETA_DIM,) or self.beta_gt.shape != (BETA_DIM,):
            raise ShapeMismatch("ground truth theta/beta have wrong arity")

    def camera(self, c: int) -> "GroundTruth":
        return GroundTruth(self.tau_gt[c], self.phi_gt[c], self.theta_gt, self.beta_gt)


@dataclass
class SequenceObservations:
    """Keypoints ``(T, C, 22, 2)``, confidences ``(T, C, 22)``, intrinsics ``(T, C, 4)``."""

    keypoints: np.ndarray
    conf: np.ndarray
    intrinsics: np.ndarray

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float)
        self.conf = np.asarray(self.conf, dtype=float)
        k = np.asarray(self.intrinsics, dtype=float)
        T, C = self.keypoints.shape[:2]
        if k.ndim == 2:
            k = np.broadcast_to(k, (T, C, 4)).copy()
        self.intrinsics = k
        if self.keypoints.shape != (T, C, NUM_JOINTS, 2) or self.conf.shape != (T, C, NUM_JOINTS):
            raise ShapeMismatch("sequence observations have inconsistent shapes")
        if self.intrinsics.shape != (T, C, 4):
            raise ShapeMismatch("intrinsics must be (C, 4) or (T, C, 4)")

    @property
    def num_frames(self):
        return self.keypoints.shape[0]

    @property
    def num_cameras(self):
        return self.keypoints.shape[1]


@dataclass
class LossResult:
    total: float
    terms: dict
    raw: dict
    per_frame: dict = field(default_factory=dict)


def geman_mcclure(e, sigma: float = DEFAULT_SIGMA):
    """Bounded robust penalty ``sigma^2 e^2 / (sigma^2 + e^2)``."""
    if not sigma > 0:
        raise ShapeMismatch("sigma must be positive")
    e = np.asarray(e, dtype=float)
    return sigma ** 2 * e ** 2 / (sigma ** 2 + e ** 2)


def _gm(e, sigma):
    return sigma ** 2 * e ** 2 / (sigma ** 2 + e ** 2)


def _sq(x):
    return jnp.sum(x * x)


def _split(x):
    return x[:3], x[3:9], x[9:9 + THETA_DIM], x[9 + THETA_DIM:]


def _zeros3():
    return jnp.zeros(3)


def _pose_only_joints(tmpl, theta, beta):
    # zero-filled translation and rotation (the all-zero 6D decodes to identity)
    return joints_fn(tmpl, _zeros3(), jnp.zeros(6), theta, beta)


def _cam_joints(tmpl, x, k, p):
    tau, phi, theta, beta = _split(x)
    return joints_fn(tmpl, crop_to_full_jnp(tau, p, k), phi, theta, beta)


# ---------------------------------------------------------------- supervised, one view

def _baseline_raw(x, tmpl, gt, k, p):
    tau_gt, phi_gt, theta_gt, beta_gt = gt
    _, phi, theta, beta = _split(x)
    j_est = _cam_joints(tmpl, x, k, p)
    j_gt = joints_fn(tmpl, tau_gt, phi_gt, theta_gt, beta_gt)
    raw = {
        "j2d": _sq(project_jnp(j_est, k) - project_jnp(j_gt, k)),
        "j3d": _sq(_pose_only_joints(tmpl, theta, beta) - _pose_only_joints(tmpl, theta_gt, beta_gt)),
        "phi": _sq(phi - phi_gt),
        "theta": _sq(theta - theta_gt),
        "beta": _sq(beta),
        "V": _sq(vertices_fn(tmpl, _zeros3(), jnp.zeros(6), theta, beta)
                 - vertices_fn(tmpl, _zeros3(), jnp.zeros(6), theta_gt, beta_gt)),
    }
    return raw, jnp.minimum(jnp.min(j_est[:, 2]), jnp.min(j_gt[:, 2]))


# ---------------------------------------------------------------- supervised, two views

def _cross(a, b, detach):
    if detach:
        return 0.5 * (_sq(a - jax.lax.stop_gradient(b)) + _sq(b - jax.lax.stop_gradient(a)))
    return 0.5 * (_sq(a - b) + _sq(b - a))


def _airpose_raw(xs, tmpl, gt, ks, ps, detach):
    tau_gt, phi_gt, theta_gt, beta_gt = gt
    raw = {k: 0.0 for k in ("j2d", "j3d", "phi", "tau", "theta", "beta", "V")}
    min_depth = jnp.inf
    verts = []
    for c in range(2):
        tau_c, phi, theta, beta = _split(xs[c])
        tau = crop_to_full_jnp(tau_c, ps[c], ks[c])
        j_est = joints_fn(tmpl, tau, phi, theta, beta)
        j_gt = joints_fn(tmpl, tau_gt[c], phi_gt[c], theta_gt, beta_gt)
        min_depth = jnp.minimum(min_depth, jnp.minimum(jnp.min(j_est[:, 2]), jnp.min(j_gt[:, 2])))
        raw["j2d"] = raw["j2d"] + _sq(project_jnp(j_est, ks[c]) - project_jnp(j_gt, ks[c]))
        raw["j3d"] = raw["j3d"] + _sq(_pose_only_joints(tmpl, theta, beta)
                                      - _pose_only_joints(tmpl, theta_gt, beta_gt))
        raw["tau"] = raw["tau"] + _sq(tau - tau_gt[c])
        raw["phi"] = raw["phi"] + _sq(phi - phi_gt[c])
        raw["theta"] = raw["theta"] + _sq(theta - theta_gt)
        raw["beta"] = raw["beta"] + _sq(beta)
        v_est = vertices_fn(tmpl, _zeros3(), phi, theta, beta)
        raw["V"] = raw["V"] + _sq(v_est - vertices_fn(tmpl, _zeros3(), phi_gt[c], theta_gt, beta_gt))
        verts.append(v_est)
    _, _, th1, b1 = _split(xs[0])
    _, _, th2, b2 = _split(xs[1])
    raw["theta"] = raw["theta"] + _cross(th1, th2, detach)
    raw["V"] = raw["V"] + _cross(verts[0], verts[1], detach)
    raw["beta"] = raw["beta"] + _cross(b1, b2, detach)
    return raw, min_depth


# ---------------------------------------------------------------- keypoint fine-tuning

def _reprojection(tmpl, x, k, p, xy, conf):
    j = _cam_joints(tmpl, x, k, p)
    r = project_jnp(j, k) - xy
    return jnp.sum(conf[:, None] * r * r), jnp.min(j[:, 2])


def _finetune_baseline_raw(x, tmpl, decoder, k, p, xy, conf):
    _, _, theta, beta = _split(x)
    j2d, depth = _reprojection(tmpl, x, k, p, xy, conf)
    raw = {"j2d": j2d, "beta": _sq(beta), "vposer": _sq(encode_jnp(theta, decoder))}
    return raw, depth


def _finetune_airpose_raw(xs, tmpl, decoder, ks, ps, xys, confs, detach):
    raw = {"j2d": 0.0, "beta": 0.0, "vposer": 0.0, "theta": 0.0}
    depth = jnp.inf
    for c in range(2):
        _, _, theta, beta = _split(xs[c])
        j2d, d = _reprojection(tmpl, xs[c], ks[c], ps[c], xys[c], confs[c])
        depth = jnp.minimum(depth, d)
        raw["j2d"] = raw["j2d"] + j2d
        raw["beta"] = raw["beta"] + _sq(beta)
        raw["vposer"] = raw["vposer"] + _sq(encode_jnp(theta, decoder))
    _, _, th1, b1 = _split(xs[0])
    _, _, th2, b2 = _split(xs[1])
    raw["beta"] = raw["beta"] + _cross(b1, b2, detach)
    raw["theta"] = _cross(th1, th2, detach)
    return raw, depth


# ---------------------------------------------------------------- sequence objective

def _airpose_plus_frames(beta, v, phi, tau, tmpl, decoder, kp, conf, kvec, gate, sigma):
    """Per-frame raw terms for the sequence objective.

    Shapes: v (T, 32), phi (C, T, 6), tau (C, T, 3), kp (T, C, 22, 2).
    """
    theta = decode_jnp(v, decoder)  # (T, 126)
    pos = jax.vmap(lambda th: forward_kinematics(tmpl, th, beta)[0])(theta)  # (T, 22, 3)
    rot = decode_6d(phi)  # (C, T, 3, 3)
    j = tau[:, :, None, :] + jnp.einsum("ctab,tjb->ctja", rot, pos)  # (C, T, 22, 3)
    j = jnp.transpose(j, (1, 0, 2, 3))  # (T, C, 22, 3)
    uv = j[..., :2] / j[..., 2:3] * kvec[:, :, None, :2] + kvec[:, :, None, 2:4]
    rho = _gm(uv - kp, sigma)
    j2d = jnp.sum(conf[..., None] * rho, axis=(1, 2, 3)) * gate
    vposer = jnp.sum(v * v, axis=1)
    d_theta = jnp.sum((theta[1:] - theta[:-1]) ** 2, axis=1)
    d_phi = jnp.sum((phi[:, 1:] - phi[:, :-1]) ** 2, axis=(0, 2))
    d_tau = jnp.sum((tau[:, 1:] - tau[:, :-1]) ** 2, axis=(0, 2))
    temp = jnp.concatenate([jnp.zeros(1), d_theta + d_phi + d_tau])
    return {"j2d": j2d, "vposer": vposer, "temp": temp}, jnp.min(j[..., 2])


def _airpose_plus_total(flat, shapes, tmpl, decoder, kp, conf, kvec, gate, sigma, w):
    beta, v, phi, tau = _unflatten_seq(flat, shapes)
    frames, _ = _airpose_plus_frames(beta, v, phi, tau, tmpl, decoder, kp, conf, kvec, gate, sigma)
    per_t = w[0] * frames["j2d"] + w[1] * frames["vposer"] + w[2] * frames["temp"]
    return jnp.sum(per_t) + w[3] * _sq(beta)


def _unflatten_seq(flat, shapes):
    T, C = shapes
    i = 0
    beta = flat[i:i + BETA_DIM]
    i += BETA_DIM
    v = flat[i:i + T * LATENT_DIM].reshape(T, LATENT_DIM)
    i += T * LATENT_DIM
    phi = flat[i:i + C * T * 6].reshape(C, T, 6)
    i += C * T * 6
    tau = flat[i:i + C * T * 3].reshape(C, T, 3)
    return beta, v, phi, tau


def flatten_sequence(seq) -> np.ndarray:
    return np.concatenate([np.ravel(seq.beta), np.ravel(seq.v), np.ravel(seq.phi), np.ravel(seq.tau)])


# ---------------------------------------------------------------- public losses

_BASELINE_KEYS = ("j2d", "j3d", "phi", "theta", "beta", "V")
_AIRPOSE_KEYS = ("j2d", "j3d", "phi", "tau", "theta", "beta", "V")
_FT_BASELINE_KEYS = ("j2d", "beta", "vposer")
_FT_AIRPOSE_KEYS = ("j2d", "beta", "vposer", "theta")
_PLUS_KEYS = ("j2d", "vposer", "temp", "beta")


def _combine(raw, keys, weights: LossWeights):
    raw = {k: float(raw[k]) for k in keys}
    terms = {k: getattr(weights, k) * raw[k] for k in keys}
    total = 0.0
    for k in keys:
        total += terms[k]
    if not np.isfinite(total):
        raise NonFiniteObjective("loss evaluated to a non-finite value")
    return LossResult(total, terms, raw)


def _weighted_scalar(raw, keys, w):
    total = 0.0
    for k, wk in zip(keys, w):
        total = total + wk * raw[k]
    return total


def _check_depth(depth):
    if not float(depth) > MIN_DEPTH:
        raise BehindCamera("a joint projects from behind the camera")


def _crop_array(P):
    return _NO_CROP if P is None else P.as_array()


def _gt_arrays(gt: GroundTruth):
    return (jnp.asarray(gt.tau_gt), jnp.asarray(gt.phi_gt), jnp.asarray(gt.theta_gt),
            jnp.asarray(gt.beta_gt))


def _pair(params_per_cam):
    if len(params_per_cam) != 2:
        raise ShapeMismatch("two-camera losses need exactly two parameter sets")
    return jnp.stack([jnp.asarray(p.to_vector()) for p in params_per_cam])


def _two_cam_gt(gt):
    if gt.tau_gt.shape != (2, 3):
        raise ShapeMismatch("two-camera ground truth needs per-camera tau_gt (2, 3) and phi_gt (2, 6)")


_baseline_raw_jit = jax.jit(_baseline_raw)
_airpose_raw_jit = jax.jit(_airpose_raw, static_argnums=(5,))
_ft_baseline_raw_jit = jax.jit(_finetune_baseline_raw)
_ft_airpose_raw_jit = jax.jit(_finetune_airpose_raw, static_argnums=(7,))


def _seq_total_and_frames(flat, shapes, tmpl, decoder, kp, conf, kvec, gate, sigma):
    beta, v, phi, tau = _unflatten_seq(flat, shapes)
    return _airpose_plus_frames(beta, v, phi, tau, tmpl, decoder, kp, conf, kvec, gate, sigma)


_plus_frames_jit = jax.jit(_seq_total_and_frames, static_argnums=(1,))


def loss_baseline(params: BodyParams, gt: GroundTruth, K: Intrinsics, P: CropParams | None = None,
                  weights: LossWeights | None = None, template: BodyTemplate | None = None) -> LossResult:
    weights = weights or PRESETS["eq3-baseline-syn"]
    tmpl = template or default_template()
    raw, depth = _baseline_raw_jit(jnp.asarray(params.to_vector()), tmpl, _gt_arrays(gt),
                                   K.as_array(), _crop_array(P))
    _check_depth(depth)
    return _combine(raw, _BASELINE_KEYS, weights)


def loss_airpose(params_per_cam, gt: GroundTruth, K_per_cam, P_per_cam=None,
                 weights: LossWeights | None = None, template: BodyTemplate | None = None,
                 detach_partner: bool = False) -> LossResult:
    """Two-camera training loss with cross-view consistency terms.

    Cross-view terms are averaged over both orderings. With
    ``detach_partner`` the partner's parameters are held constant in each
    ordering, which halves their gradient but leaves the value unchanged.
    """
    weights = weights or PRESETS["eq4-airpose-syn"]
    tmpl = template or default_template()
    _two_cam_gt(gt)
    xs = _pair(params_per_cam)
    ks = jnp.stack([K.as_array() for K in K_per_cam])
    ps = jnp.stack([_crop_array(P) for P in (P_per_cam or (None, None))])
    raw, depth = _airpose_raw_jit(xs, tmpl, _gt_arrays(gt), ks, ps, detach_partner)
    _check_depth(depth)
    return _combine(raw, _AIRPOSE_KEYS, weights)


def loss_finetune_baseline(params: BodyParams, obs: KeypointObservation, K: Intrinsics,
                           P: CropParams | None = None, weights: LossWeights | None = None,
                           template: BodyTemplate | None = None,
                           prior: PriorBasis | None = None) -> LossResult:
    weights = weights or PRESETS["eq5-finetune-baseline"]
    tmpl = template or default_template()
    prior = prior or default_prior()
    raw, depth = _ft_baseline_raw_jit(jnp.asarray(params.to_vector()), tmpl, prior.decoder,
                                      K.as_array(), _crop_array(P), obs.xy, obs.conf)
    _check_depth(depth)
    return _combine(raw, _FT_BASELINE_KEYS, weights)


def loss_finetune_airpose(params_per_cam, obs_per_cam, K_per_cam, P_per_cam=None,
                          weights: LossWeights | None = None, template: BodyTemplate | None = None,
                          prior: PriorBasis | None = None, detach_partner: bool = False) -> LossResult:
    weights = weights or PRESETS["eq6-finetune-airpose"]
    tmpl = template or default_template()
    prior = prior or default_prior()
    if len(obs_per_cam) != 2:
        raise ShapeMismatch("need observations for exactly two cameras")
    xs = _pair(params_per_cam)
    ks = jnp.stack([K.as_array() for K in K_per_cam])
    ps = jnp.stack([_crop_array(P) for P in (P_per_cam or (None, None))])
    xys = jnp.stack([o.xy for o in obs_per_cam])
    confs = jnp.stack([o.conf for o in obs_per_cam])
    raw, depth = _ft_airpose_raw_jit(xs, tmpl, prior.decoder, ks, ps, xys, confs, detach_partner)
    _check_depth(depth)
    return _combine(raw, _FT_AIRPOSE_KEYS, weights)


def frame_gate(conf, conf_threshold: float) -> np.ndarray:
    """1.0 for frames whose summed confidence reaches the threshold, else 0.0."""
    total = np.sum(np.asarray(conf), axis=(1, 2))
    return (total >= conf_threshold).astype(float)


def _check_sequence(seq, obs: SequenceObservations):
    T, C = obs.num_frames, obs.num_cameras
    if T < 2:
        raise SequenceTooShort(f"sequence objective needs at least 2 frames, got {T}")
    if (np.shape(seq.beta) != (BETA_DIM,) or np.shape(seq.v) != (T, LATENT_DIM)
            or np.shape(seq.phi) != (C, T, 6) or np.shape(seq.tau) != (C, T, 3)):
        raise ShapeMismatch("sequence estimate does not match the observations")


def loss_airpose_plus(seq, obs: SequenceObservations, weights: LossWeights | None = None,
                      sigma: float = DEFAULT_SIGMA, conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                      template: BodyTemplate | None = None,
                      prior: PriorBasis | None = None) -> LossResult:
    """Robust multi-frame objective over shared shape and per-frame latent pose.

    Frames whose confidences sum below ``conf_threshold`` keep their prior
    and temporal terms but drop the reprojection term.
    """
    weights = weights or PRESETS["eq8-airpose-plus"]
    tmpl = template or default_template()
    prior = prior or default_prior()
    if not sigma > 0:
        raise ShapeMismatch("sigma must be positive")
    _check_sequence(seq, obs)
    shapes = (obs.num_frames, obs.num_cameras)
    gate = frame_gate(obs.conf, conf_threshold)
    frames, depth = _plus_frames_jit(jnp.asarray(flatten_sequence(seq)), shapes, tmpl,
                                     prior.decoder, obs.keypoints, obs.conf, obs.intrinsics,
                                     gate, float(sigma))
    _check_depth(depth)
    per_frame = {k: np.asarray(v) for k, v in frames.items()}
    raw = {k: 0.0 for k in _PLUS_KEYS}
    for k in ("j2d", "vposer", "temp"):
        for value in per_frame[k]:
            raw[k] += float(value)
    raw["beta"] = float(np.dot(seq.beta, seq.beta))
    result = _combine(raw, _PLUS_KEYS, weights)
    result.per_frame = per_frame
    return result


# ---------------------------------------------------------------- gradients

def _scalar_baseline(x, tmpl, gt, k, p, w):
    raw, _ = _baseline_raw(x, tmpl, gt, k, p)
    return _weighted_scalar(raw, _BASELINE_KEYS, w)


def _scalar_airpose(xs, tmpl, gt, ks, ps, w, detach):
    raw, _ = _airpose_raw(xs, tmpl, gt, ks, ps, detach)
    return _weighted_scalar(raw, _AIRPOSE_KEYS, w)


def _scalar_ft_baseline(x, tmpl, decoder, k, p, xy, conf, w):
    raw, _ = _finetune_baseline_raw(x, tmpl, decoder, k, p, xy, conf)
    return _weighted_scalar(raw, _FT_BASELINE_KEYS, w)


def _scalar_ft_airpose(xs, tmpl, decoder, ks, ps, xys, confs, w, detach):
    raw, _ = _finetune_airpose_raw(xs, tmpl, decoder, ks, ps, xys, confs, detach)
    return _weighted_scalar(raw, _FT_AIRPOSE_KEYS, w)


_grad_baseline = jax.jit(jax.grad(_scalar_baseline))
_grad_airpose = jax.jit(jax.grad(_scalar_airpose), static_argnums=(6,))
_grad_ft_baseline = jax.jit(jax.grad(_scalar_ft_baseline))
_grad_ft_airpose = jax.jit(jax.grad(_scalar_ft_airpose), static_argnums=(8,))
airpose_plus_value_and_grad = jax.jit(jax.value_and_grad(_airpose_plus_total), static_argnums=(1,))


def _w(weights, keys):
    return jnp.asarray([getattr(weights, k) for k in keys])


def grad(loss_id: str, *args, **kwargs):
    """Gradient of a loss w.r.t. its free parameters.

    ``loss_id`` is one of ``baseline``, ``airpose``, ``finetune_baseline``,
    ``finetune_airpose``, ``airpose_plus``; the remaining arguments are those
    of the matching ``loss_*`` function. The result mirrors the parameter
    structure: a ``BodyParams``, a list of two, or a ``SequenceGradient``.
    """
    try:
        fn = _GRADS[loss_id]
    except KeyError:
        raise ShapeMismatch(f"unknown loss id {loss_id!r}") from None
    return fn(*args, **kwargs)


def _g_baseline(params, gt, K, P=None, weights=None, template=None):
    weights = weights or PRESETS["eq3-baseline-syn"]
    g = _grad_baseline(jnp.asarray(params.to_vector()), template or default_template(),
                       _gt_arrays(gt), K.as_array(), _crop_array(P), _w(weights, _BASELINE_KEYS))
    return BodyParams.from_vector(np.asarray(g))


def _g_airpose(params_per_cam, gt, K_per_cam, P_per_cam=None, weights=None, template=None,
               detach_partner=False):
    weights = weights or PRESETS["eq4-airpose-syn"]
    _two_cam_gt(gt)
    ks = jnp.stack([K.as_array() for K in K_per_cam])
    ps = jnp.stack([_crop_array(P) for P in (P_per_cam or (None, None))])
    g = _grad_airpose(_pair(params_per_cam), template or default_template(), _gt_arrays(gt),
                      ks, ps, _w(weights, _AIRPOSE_KEYS), detach_partner)
    return [BodyParams.from_vector(np.asarray(row)) for row in g]


def _g_ft_baseline(params, obs, K, P=None, weights=None, template=None, prior=None):
    weights = weights or PRESETS["eq5-finetune-baseline"]
    g = _grad_ft_baseline(jnp.asarray(params.to_vector()), template or default_template(),
                          (prior or default_prior()).decoder, K.as_array(), _crop_array(P),
                          obs.xy, obs.conf, _w(weights, _FT_BASELINE_KEYS))
    return BodyParams.from_vector(np.asarray(g))


def _g_ft_airpose(params_per_cam, obs_per_cam, K_per_cam, P_per_cam=None, weights=None,
                  template=None, prior=None, detach_partner=False):
    weights = weights or PRESETS["eq6-finetune-airpose"]
    ks = jnp.stack([K.as_array() for K in K_per_cam])
    ps = jnp.stack([_crop_array(P) for P in (P_per_cam or (None, None))])
    g = _grad_ft_airpose(_pair(params_per_cam), template or default_template(),
                         (prior or default_prior()).decoder, ks, ps,
                         jnp.stack([o.xy for o in obs_per_cam]),
                         jnp.stack([o.conf for o in obs_per_cam]),
                         _w(weights, _FT_AIRPOSE_KEYS), detach_partner)
    return [BodyParams.from_vector(np.asarray(row)) for row in g]


@dataclass
class SequenceGradient:
    beta: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    tau: np.ndarray


def airpose_plus_args(obs: SequenceObservations, weights=None, sigma=DEFAULT_SIGMA,
                      conf_threshold=DEFAULT_CONF_THRESHOLD, template=None, prior=None):
    """Constant arguments for :data:`airpose_plus_value_and_grad` after the flat vector."""
    weights = weights or PRESETS["eq8-airpose-plus"]
    w = jnp.asarray([weights.j2d, weights.vposer, weights.temp, weights.beta])
    return ((obs.num_frames, obs.num_cameras), template or default_template(),
            (prior or default_prior()).decoder, obs.keypoints, obs.conf, obs.intrinsics,
            frame_gate(obs.conf, conf_threshold), float(sigma), w)


def _g_airpose_plus(seq, obs, weights=None, sigma=DEFAULT_SIGMA,
                    conf_threshold=DEFAULT_CONF_THRESHOLD, template=None, prior=None):
    _check_sequence(seq, obs)
    args = airpose_plus_args(obs, weights, sigma, conf_threshold, template, prior)
    _, g = airpose_plus_value_and_grad(jnp.asarray(flatten_sequence(seq)), *args)
    beta, v, phi, tau = _unflatten_seq(np.asarray(g), args[0])
    return SequenceGradient(np.asarray(beta), np.asarray(v), np.asarray(phi), np.asarray(tau))


_GRADS = {
    "baseline": _g_baseline,
    "airpose": _g_airpose,
    "finetune_baseline": _g_ft_baseline,
    "finetune_airpose": _g_ft_airpose,
    "airpose_plus": _g_airpose_plus,
}
