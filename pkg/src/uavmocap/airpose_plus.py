"""Offline refinement of a whole two-view sequence.

The decision variables are one shape vector for the sequence, one latent
pose per frame shared by both cameras, and a root rotation and translation
per camera and frame. The objective is the robust multi-frame loss from
:func:`uavmocap.losses.loss_airpose_plus`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
from scipy import sparse
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.spatial.transform import Rotation

from .body_model import BETA_DIM, BodyParams, decode_6d, forward_kinematics, joints, rot6d_decode
from .bundle import default_prior, default_template
from .camera import MIN_DEPTH
from .errors import DatasetError, EmptySequence, NonFiniteObjective, ShapeMismatch, UavMocapError
from .losses import (
    DEFAULT_CONF_THRESHOLD, DEFAULT_SIGMA, PRESETS, SequenceObservations, _airpose_plus_frames,
    _unflatten_seq, airpose_plus_args, flatten_sequence,
)
from .pose_prior import LATENT_DIM, decode, decode_jnp, encode

ESTIMATE_SCHEMA = "uavmocap.sequence/1"


@dataclass
class SequenceEstimate:
    beta: np.ndarray  # (10,)
    v: np.ndarray  # (T, 32)
    phi: np.ndarray  # (C, T, 6)
    tau: np.ndarray  # (C, T, 3), meters, full camera frame
    frame_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        T = self.v.shape[0] if self.v.ndim == 2 else -1
        C = self.phi.shape[0] if self.phi.ndim == 3 else -1
        if (self.beta.shape != (BETA_DIM,) or self.v.shape != (T, LATENT_DIM)
                or self.phi.shape != (C, T, 6) or self.tau.shape != (C, T, 3)):
            raise ShapeMismatch("inconsistent sequence estimate shapes")
        if not self.frame_ids:
            self.frame_ids = list(range(T))
        if len(self.frame_ids) != T:
            raise ShapeMismatch("one frame id per frame is required")
        self.frame_ids = [int(f) for f in self.frame_ids]

    @property
    def num_frames(self) -> int:
        return self.v.shape[0]

    @property
    def num_cameras(self) -> int:
        return self.phi.shape[0]

    def theta(self, t: int) -> np.ndarray:
        return decode(self.v[t], default_prior())

    def body_params(self, camera: int, t: int) -> BodyParams:
        return BodyParams(self.tau[camera, t].copy(), self.phi[camera, t].copy(), self.theta(t),
                          self.beta.copy())

    def copy(self) -> "SequenceEstimate":
        return SequenceEstimate(self.beta.copy(), self.v.copy(), self.phi.copy(), self.tau.copy(),
                                list(self.frame_ids))

    def to_jsonl(self) -> str:
        """One JSON object per frame; the shared shape is repeated on every line."""
        lines = []
        for t, fid in enumerate(self.frame_ids):
            lines.append(json.dumps({
                "schema": ESTIMATE_SCHEMA,
                "frame_id": fid,
                "beta": self.beta.tolist(),
                "v": self.v[t].tolist(),
                "cameras": [{"phi": self.phi[c, t].tolist(), "tau": self.tau[c, t].tolist()}
                            for c in range(self.num_cameras)],
            }, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "SequenceEstimate":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows:
            raise EmptySequence("no frames in sequence file")
        try:
            beta = np.asarray(rows[0]["beta"], dtype=float)
            v = np.array([r["v"] for r in rows], dtype=float)
            C = len(rows[0]["cameras"])
            phi = np.array([[r["cameras"][c]["phi"] for r in rows] for c in range(C)], dtype=float)
            tau = np.array([[r["cameras"][c]["tau"] for r in rows] for c in range(C)], dtype=float)
            ids = [r["frame_id"] for r in rows]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed sequence file: {exc}") from None
        return cls(beta, v, phi, tau, ids)


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 500
    initial_step: float = 1.0
    tolerance: float = 1e-8  # on relative loss decrease
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40
    history: int = 10
    direction: str = "gauss_newton"  # or "lbfgs"
    damping: float = 1e-3
    repair_frames: bool = True
    weights_preset: str = "eq8-airpose-plus"
    sigma: float = DEFAULT_SIGMA
    conf_threshold: float = DEFAULT_CONF_THRESHOLD

    def __post_init__(self):
        from .errors import ConfigError

        if self.max_iterations < 0 or self.history < 1 or self.max_backtracks < 1:
            raise ConfigError("iteration counts must be positive")
        if not (self.initial_step > 0 and self.tolerance >= 0 and 0 < self.armijo < 1
                and 0 < self.shrink < 1 and self.sigma > 0):
            raise ConfigError("optimizer constants out of range")
        if self.direction not in ("gauss_newton", "lbfgs"):
            raise ConfigError(f"unknown search direction {self.direction!r}")
        if self.weights_preset not in PRESETS:
            raise ConfigError(f"unknown weights preset {self.weights_preset!r}")


def init_from_airpose(per_frame, frame_ids=None) -> SequenceEstimate:
    """Build the sequence variables from per-frame, per-camera estimates.

    ``per_frame[t][c]`` is a full-camera-frame :class:`BodyParams`. The shape
    is averaged over every frame and camera and the latent pose encodes the
    mean of the cameras' poses.
    """
    per_frame = [list(p) for p in per_frame]
    if not per_frame or not per_frame[0]:
        raise EmptySequence("no per-frame estimates")
    C = len(per_frame[0])
    if any(len(p) != C for p in per_frame):
        raise ShapeMismatch("every frame needs an estimate for every camera")
    beta = np.mean([p.beta for frame in per_frame for p in frame], axis=0)
    prior = default_prior()
    v = np.array([encode(np.mean([p.theta for p in frame], axis=0), prior) for frame in per_frame])
    phi = np.array([[frame[c].phi for frame in per_frame] for c in range(C)], dtype=float)
    tau = np.array([[frame[c].tau for frame in per_frame] for c in range(C)], dtype=float)
    return SequenceEstimate(beta, v, phi, tau, list(frame_ids) if frame_ids is not None else [])


def observations_from_frames(frames) -> SequenceObservations:
    """Stack the keypoint observations of a list of frame records."""
    frames = list(frames)
    if not frames:
        raise EmptySequence("no frames")
    kp = np.array([[cam.keypoints.xy for cam in f.cameras] for f in frames])
    conf = np.array([[cam.keypoints.conf for cam in f.cameras] for f in frames])
    k = np.array([[cam.intrinsics.as_array() for cam in f.cameras] for f in frames])
    return SequenceObservations(kp, conf, k)


def _value_grad_depth(flat, shapes, tmpl, decoder, kp, conf, kvec, gate, sigma, w):
    def total(x):
        beta, v, phi, tau = _unflatten_seq(x, shapes)
        frames, depth = _airpose_plus_frames(beta, v, phi, tau, tmpl, decoder, kp, conf, kvec,
                                             gate, sigma)
        per_t = w[0] * frames["j2d"] + w[1] * frames["vposer"] + w[2] * frames["temp"]
        return jnp.sum(per_t) + w[3] * jnp.sum(beta * beta), depth

    (f, depth), g = jax.value_and_grad(total, has_aux=True)(flat)
    return f, g, depth


_vgd = jax.jit(_value_grad_depth, static_argnums=(1,))


def _offending_frame(seq, obs, cfg) -> int:
    """First frame with a non-finite value or a joint at or behind a camera's depth limit."""
    tmpl = default_template()
    for t in range(seq.num_frames):
        for c in range(seq.num_cameras):
            values = np.concatenate([seq.v[t], seq.phi[c, t], seq.tau[c, t], seq.beta])
            if not np.all(np.isfinite(values)):
                return seq.frame_ids[t]
            try:
                depth = joints(seq.body_params(c, t), tmpl)[:, 2]
            except UavMocapError:
                return seq.frame_ids[t]
            if not np.all(np.isfinite(depth)) or depth.min() <= MIN_DEPTH:
                return seq.frame_ids[t]
    return -1


def _lbfgs_direction(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _frame_residuals(beta, v, phi, tau, tmpl, decoder, kp, conf, kvec, gate, sigma, w_j2d):
    """Whitened reprojection residuals of one frame; their squares sum to its weighted term."""
    theta = decode_jnp(v, decoder)
    pos = forward_kinematics(tmpl, theta, beta)[0]
    rot = decode_6d(phi)  # (C, 3, 3)
    j = tau[:, None, :] + jnp.einsum("cab,jb->cja", rot, pos)
    uv = j[..., :2] / j[..., 2:3] * kvec[:, None, :2] + kvec[:, None, 2:4]
    r = uv - kp
    robust = sigma * r / jnp.sqrt(sigma ** 2 + r ** 2)
    return (jnp.sqrt(w_j2d * gate * conf)[..., None] * robust).ravel()


_frame_jac = jax.jit(jax.vmap(jax.jacfwd(_frame_residuals, argnums=(0, 1, 2, 3)),
                              in_axes=(None, 0, 1, 1, None, None, 0, 0, 0, 0, None, None)))


class _GaussNewton:
    """Damped Gauss-Newton matrix of the sequence objective in sparse form.

    Only the reprojection part depends on the point; the prior, temporal and
    shape terms are quadratic and contribute a constant matrix.
    """

    def __init__(self, shapes, w, args):
        T, C = shapes
        self.T, self.C = T, C
        self.args = args
        self.n = BETA_DIM + T * LATENT_DIM + C * T * 9
        self.v0 = BETA_DIM
        self.phi0 = self.v0 + T * LATENT_DIM
        self.tau0 = self.phi0 + C * T * 6
        w_vposer, w_temp, w_beta = float(w[1]), float(w[2]), float(w[3])
        diff = sparse.diags([np.ones(T - 1), -np.ones(T - 1)], [1, 0], shape=(T - 1, T))
        lap = (diff.T @ diff).tocsr()
        blocks = [w_beta * sparse.identity(BETA_DIM),
                  sparse.kron(w_vposer * sparse.identity(T) + w_temp * lap, sparse.identity(LATENT_DIM))]
        blocks += [sparse.kron(w_temp * lap, sparse.identity(6)) for _ in range(C)]
        blocks += [sparse.kron(w_temp * lap, sparse.identity(3)) for _ in range(C)]
        self.constant = (2.0 * sparse.block_diag(blocks)).tocsr()
        self._rows = self._cols = None
        self._perm = None

    def columns(self, t):
        cols = [np.arange(BETA_DIM), self.v0 + t * LATENT_DIM + np.arange(LATENT_DIM)]
        cols += [self.phi0 + (c * self.T + t) * 6 + np.arange(6) for c in range(self.C)]
        cols += [self.tau0 + (c * self.T + t) * 3 + np.arange(3) for c in range(self.C)]
        return np.concatenate(cols)

    def _pattern(self, m):
        rows, cols = [], []
        for t in range(self.T):
            r, c = np.meshgrid(t * m + np.arange(m), self.columns(t), indexing="ij")
            rows.append(r.ravel())
            cols.append(c.ravel())
        return np.concatenate(rows), np.concatenate(cols)

    def residual_blocks(self, x):
        shapes, tmpl, decoder, kp, conf, kvec, gate, sigma, w = self.args
        beta, v, phi, tau = _unflatten_seq(jnp.asarray(x), shapes)
        return _frame_jac(beta, v, phi, tau, tmpl, decoder, kp, conf, kvec, gate, sigma, w[0])

    def matrix(self, x):
        jb, jv, jp, jt = (np.asarray(a) for a in self.residual_blocks(x))
        m = jb.shape[1]
        if self._rows is None:
            self._rows, self._cols = self._pattern(m)
        vals = np.concatenate([jb, jv, jp.reshape(self.T, m, -1),
                               jt.reshape(self.T, m, -1)], axis=2)
        J = sparse.csr_matrix((vals.ravel(), (self._rows, self._cols)), shape=(self.T * m, self.n))
        return (2.0 * (J.T @ J) + self.constant).tocsc()

    def _frame_major(self):
        """Permutation putting each frame's variables together, shape last."""
        order = [self.columns(t)[BETA_DIM:] for t in range(self.T)]
        return np.concatenate(order + [np.arange(BETA_DIM)])

    def direction(self, H, g, mu):
        """Solve the damped system by banded Cholesky with the shape eliminated last.

        In frame-major order the matrix is banded (frames couple only to
        their neighbours) apart from the shape variables, which touch every
        frame and are handled by a Schur complement.
        """
        diag = H.diagonal() + 1e-9
        A = (H + mu * sparse.diags(diag)).tocsr()
        if self._perm is None:
            self._perm = self._frame_major()
        p = self._perm
        A = A[p][:, p].tocoo()
        nb = self.n - BETA_DIM
        inner = (A.row < nb) & (A.col < nb) & (A.row <= A.col)
        rows, cols, vals = A.row[inner], A.col[inner], A.data[inner]
        u = int(np.max(cols - rows)) if rows.size else 0
        ab = np.zeros((u + 1, nb))
        ab[u + rows - cols, cols] = vals
        Ad = A.tocsr()
        C = Ad[:nb, nb:].toarray()
        E = Ad[nb:, nb:].toarray()
        gp = g[p]
        try:
            chol = cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError:
            return -g / diag
        sol = cho_solve_banded((chol, False), np.column_stack([gp[:nb], C]))
        y, BC = sol[:, 0], sol[:, 1:]
        S = E - C.T @ BC
        d_beta = np.linalg.solve(S, gp[nb:] - C.T @ y)
        d_rest = y - BC @ d_beta
        d = np.empty_like(g)
        d[p] = -np.concatenate([d_rest, d_beta])
        return d


def _view_costs_fn(flat, shapes, tmpl, decoder, kp, conf, kvec, gate, sigma, w):
    beta, v, phi, tau = _unflatten_seq(flat, shapes)
    r = jax.vmap(_frame_residuals, in_axes=(None, 0, 1, 1, None, None, 0, 0, 0, 0, None, None))(
        beta, v, phi, tau, tmpl, decoder, kp, conf, kvec, gate, sigma, w[0])
    T, C = shapes
    return jnp.sum(r.reshape(T, C, -1) ** 2, axis=2)


_view_costs = jax.jit(_view_costs_fn, static_argnums=(1,))


def _repair_views(x, f, args, evaluate, ratio: float = 4.0):
    """Replace badly fitted views with a neighbouring frame's values.

    A view (frame, camera) whose reprojection cost exceeds ``ratio`` times
    the median is a candidate; its root rotation and translation, and
    optionally the frame's latent pose or the whole frame, are copied from
    the previous or next frame. A replacement is kept only if it lowers the objective, so the
    move is a descent step like any other.
    """
    shapes = args[0]
    T, C = shapes
    costs = np.asarray(_view_costs(jnp.asarray(x), *args))
    floor = ratio * max(float(np.median(costs)), 1e-9)
    bad = sorted(((costs[t, c], t, c) for t in range(T) for c in range(C) if costs[t, c] > floor),
                 reverse=True)
    v0 = BETA_DIM
    phi0 = v0 + T * LATENT_DIM
    tau0 = phi0 + C * T * 6
    for _, t, c in bad:
        best = None
        for nb in (t - 1, t + 1):
            if not 0 <= nb < T:
                continue
            for cams, copy_pose in (((c,), False), ((c,), True), (tuple(range(C)), True)):
                xs = x.copy()
                for k in cams:
                    xs[phi0 + (k * T + t) * 6: phi0 + (k * T + t + 1) * 6] = \
                        x[phi0 + (k * T + nb) * 6: phi0 + (k * T + nb + 1) * 6]
                    xs[tau0 + (k * T + t) * 3: tau0 + (k * T + t + 1) * 3] = \
                        x[tau0 + (k * T + nb) * 3: tau0 + (k * T + nb + 1) * 3]
                if copy_pose:
                    xs[v0 + t * LATENT_DIM: v0 + (t + 1) * LATENT_DIM] = \
                        x[v0 + nb * LATENT_DIM: v0 + (nb + 1) * LATENT_DIM]
                fs, _, depth = evaluate(xs)
                if np.isfinite(fs) and depth > MIN_DEPTH and fs < f and (best is None or fs < best[1]):
                    best = (xs, fs)
        if best is not None:
            x, f = best
    return x, f


def refine(seq: SequenceEstimate, obs: SequenceObservations,
           config: OptimizerConfig | None = None) -> tuple[SequenceEstimate, list]:
    """Minimize the sequence objective; returns the estimate and the loss trace.

    The search direction is a damped Gauss-Newton step built from residual
    Jacobians (or, optionally, a limited-memory quasi-Newton update); every
    step passes a backtracking sufficient-decrease test, so the trace
    strictly decreases. Trial points that put a joint
    behind a camera or make the objective non-finite are rejected like any
    other failed trial.
    """
    cfg = config or OptimizerConfig()
    if obs.num_frames < 2:
        from .errors import SequenceTooShort

        raise SequenceTooShort("sequence refinement needs at least 2 frames")
    if seq.num_frames != obs.num_frames or seq.num_cameras != obs.num_cameras:
        raise ShapeMismatch("estimate and observations cover different frames or cameras")
    args = airpose_plus_args(obs, PRESETS[cfg.weights_preset], cfg.sigma, cfg.conf_threshold,
                             default_template(), default_prior())
    shapes = args[0]

    def evaluate(x):
        f, g, depth = _vgd(jnp.asarray(x), *args)
        return float(f), np.asarray(g), float(depth)

    x = flatten_sequence(seq)
    f, g, depth = evaluate(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))) or not depth > MIN_DEPTH:
        frame = _offending_frame(seq, obs, cfg)
        raise NonFiniteObjective(f"sequence objective is not usable at the initial point "
                                 f"(frame {frame})", frame=frame)
    trace = [f]
    s_hist, y_hist = [], []
    gn = _GaussNewton(shapes, args[-1], args) if cfg.direction == "gauss_newton" else None
    mu = cfg.damping
    it = 0
    while it < cfg.max_iterations:
        it += 1
        if gn is not None:
            d = gn.direction(gn.matrix(x), g, mu)
        else:
            d = _lbfgs_direction(g, s_hist, y_hist)
        slope = g @ d
        if not (np.all(np.isfinite(d)) and slope < 0):
            s_hist, y_hist = [], []
            d = -g
            slope = -(g @ g)
        step = cfg.initial_step if (gn is not None or s_hist) else \
            min(cfg.initial_step, 1.0 / max(np.linalg.norm(g), 1e-300))
        accepted = False
        if slope < 0:
            for _ in range(cfg.max_backtracks):
                x_new = x + step * d
                f_new, g_new, depth_new = evaluate(x_new)
                if (np.isfinite(f_new) and depth_new > MIN_DEPTH
                        and f_new <= f + cfg.armijo * step * slope and f_new < f):
                    accepted = True
                    break
                step *= cfg.shrink
        converged = False
        if accepted:
            mu = max(mu / 3.0, 1e-9) if step == cfg.initial_step else min(mu * 10.0, 1e6)
            s, y = x_new - x, g_new - g
            if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                s_hist.append(s)
                y_hist.append(y)
                if len(s_hist) > cfg.history:
                    s_hist.pop(0)
                    y_hist.pop(0)
            converged = (f - f_new) / max(abs(f), 1.0) < cfg.tolerance
            x, f, g = x_new, f_new, g_new
            trace.append(f)
        if accepted and not converged:
            continue
        if not cfg.repair_frames:
            break
        # stalled: try re-seeding badly fitted views from their neighbours
        x_rep, f_rep = _repair_views(x, f, args, evaluate)
        if f_rep >= f:
            break
        x, f = x_rep, f_rep
        f, g, _ = evaluate(x)
        trace.append(f)
        s_hist, y_hist = [], []
        mu = cfg.damping
    beta, v, phi, tau = (np.asarray(a) for a in _unflatten_seq(x, shapes))
    out = SequenceEstimate(beta, v, phi, tau, list(seq.frame_ids))
    for c in range(out.num_cameras):
        for t in range(out.num_frames):
            rot6d_decode(out.phi[c, t])
    return out, trace


def relative_camera_trajectory(seq: SequenceEstimate, intrinsics=None) -> np.ndarray:
    """Pose of camera 2 in camera 1's frame per frame, as ``(T, 7)`` rows.

    Each row is the position ``x, y, z`` followed by the rotation quaternion
    ``qw, qx, qy, qz`` mapping camera-2 coordinates into camera 1. Both
    cameras see the same body, so ``x_1 = R1 R2^T (x_2 - tau2) + tau1``.
    ``intrinsics`` is accepted for interface symmetry and not needed.
    """
    if seq.num_cameras < 2:
        raise ShapeMismatch("relative trajectory needs two cameras")
    rows = np.zeros((seq.num_frames, 7))
    for t in range(seq.num_frames):
        R1 = rot6d_decode(seq.phi[0, t])
        R2 = rot6d_decode(seq.phi[1, t])
        R = R1 @ R2.T
        pos = seq.tau[0, t] - R @ seq.tau[1, t]
        qx, qy, qz, qw = Rotation.from_matrix(R).as_quat()
        q = np.array([qw, qx, qy, qz])
        rows[t] = [*pos, *(q if qw >= 0 else -q)]  # one hemisphere keeps plots continuous
    return rows


# ---------------------------------------------------------------- files

def save_estimate(path, seq: SequenceEstimate) -> Path:
    path = Path(path)
    path.write_text(seq.to_jsonl())
    return path


def load_estimate(path) -> SequenceEstimate:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    return SequenceEstimate.from_jsonl(text)


def write_trace_csv(path, trace) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, f in enumerate(trace):
            w.writerow([i, repr(float(f))])
    return path


def write_trajectory_csv(path, seq: SequenceEstimate, fps: float | None = None) -> Path:
    """Relative camera trajectory; ``t`` is seconds when ``fps`` is given, else the frame id."""
    rows = relative_camera_trajectory(seq)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "z", "qw", "qx", "qy", "qz"])
        for fid, row in zip(seq.frame_ids, rows):
            t = fid / fps if fps else fid
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    return path
