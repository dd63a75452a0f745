"""Three-stage per-view refinement with pluggable refiners.

Each agent refines its own view's body parameters in three stages. In the
exchanging modes (``multiview`` and ``airpose``) the agent emits its current
pose and shape after stages 0 and 1 and consumes the partner's in the next
stage. In the full-camera modes (``fullcam`` and ``airpose``) the crop
parameters let the refiner reason in the full camera frame; the other modes
work on the crop alone and report crop-frame translations.

Internally the translation is always the normalized crop-frame value the
regressor would output (``tau_c / 20``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np

from .body_model import (
    BETA_DIM, IDENTITY_6D, IDENTITY_THETA, NUM_BODY_JOINTS, THETA_DIM, BodyParams,
    BodyTemplate, joints_fn, rot6d_decode,
)
from .bundle import default_prior, default_template
from .camera import (
    DEPTH_NORMALIZER, CropParams, Intrinsics, crop_intrinsics, crop_to_full, crop_to_full_jnp,
    full_to_crop, full_to_crop_pixels, project_jnp,
)
from .errors import ConfigError, NonFiniteObjective, ShapeMismatch
from .fusion.codec import StageMessage
from .losses import DEFAULT_SIGMA, PRESETS, KeypointObservation, LossWeights
from .pose_prior import PriorBasis

NUM_STAGES = 3
MIN_BODY_DEPTH = 0.5  # meters
INIT_TAU = np.array([0.0, 0.0, 0.5])


class EstimatorMode(str, enum.Enum):
    BASELINE = "baseline"
    MULTIVIEW = "multiview"
    FULLCAM = "fullcam"
    AIRPOSE = "airpose"

    @property
    def exchanges(self) -> bool:
        return self in (EstimatorMode.MULTIVIEW, EstimatorMode.AIRPOSE)

    @property
    def full_camera(self) -> bool:
        return self in (EstimatorMode.FULLCAM, EstimatorMode.AIRPOSE)

    @property
    def label(self) -> str:
        return {
            "baseline": "Baseline",
            "multiview": "Baseline + Multi-view",
            "fullcam": "Baseline + Fullcam",
            "airpose": "AirPose",
        }[self.value]


def parse_mode(mode) -> EstimatorMode:
    try:
        return EstimatorMode(mode)
    except ValueError:
        raise ConfigError(f"unknown mode {mode!r}") from None


def init_params() -> BodyParams:
    """Fixed starting point: 10 m straight ahead, identity rotations, mean shape."""
    return BodyParams(INIT_TAU.copy(), IDENTITY_6D.copy(), IDENTITY_THETA.copy(), np.zeros(BETA_DIM))


@dataclass
class StageInput:
    observation: KeypointObservation
    intrinsics: Intrinsics
    current: BodyParams
    stage_index: int
    mode: EstimatorMode
    crop: Optional[CropParams] = None
    partner_theta: Optional[np.ndarray] = None
    partner_beta: Optional[np.ndarray] = None
    ground_truth: Optional[BodyParams] = None  # oracle fixture only, same frame as current
    frame_id: int = 0
    agent_id: int = 0

    def __post_init__(self):
        self.mode = EstimatorMode(self.mode)
        if not 0 <= self.stage_index < NUM_STAGES:
            raise ShapeMismatch(f"stage index must be in [0, {NUM_STAGES}), got {self.stage_index}")
        has_partner = self.partner_theta is not None or self.partner_beta is not None
        if has_partner and not self.mode.exchanges:
            raise ShapeMismatch(f"mode {self.mode.value} does not consume partner data")
        if has_partner and (self.partner_theta is None or self.partner_beta is None):
            raise ShapeMismatch("partner theta and beta travel together")
        if (self.crop is not None) != self.mode.full_camera:
            raise ShapeMismatch("crop parameters are consumed only in full-camera modes")

    @property
    def has_partner(self) -> bool:
        return self.partner_theta is not None


# ---------------------------------------------------------------- gradient refiner

@dataclass(frozen=True)
class GradientRefinerConfig:
    steps: int = 10
    sigma: float = DEFAULT_SIGMA
    damping: float = 1e-2
    max_halvings: int = 30
    max_step: float = 1.0
    off_manifold_damping: float = 1e4
    root_hypotheses: int = 8
    probe_steps: int = 10
    partner_hypothesis: bool = True
    single_view: LossWeights = PRESETS["eq5-finetune-baseline"]
    multi_view: LossWeights = PRESETS["eq6-finetune-airpose"]


def _stage_residuals(x, tmpl, decoder, k, p, xy, conf, partner, w, sigma):
    """Residual vector whose squared norm is the per-frame stage objective.

    ``w = [w_j2d, w_vposer, w_beta, w_theta_partner, w_beta_partner]``.
    """
    tau_n, phi, theta, beta = x[:3], x[3:9], x[9:9 + THETA_DIM], x[9 + THETA_DIM:]
    tau = crop_to_full_jnp(tau_n * DEPTH_NORMALIZER, p, k)
    j = joints_fn(tmpl, tau, phi, theta, beta)
    r = project_jnp(j, k) - xy
    robust = sigma * r / jnp.sqrt(sigma ** 2 + r ** 2)  # squares to Geman-McClure
    reproj = jnp.sqrt(w[0] * conf)[:, None] * robust
    prior = jnp.sqrt(w[1]) * ((theta - jnp.asarray(IDENTITY_THETA)) @ decoder)
    shape = jnp.sqrt(w[2]) * beta
    p_theta = jnp.sqrt(w[3]) * (theta - partner[:THETA_DIM])
    p_beta = jnp.sqrt(w[4]) * (beta - partner[THETA_DIM:])
    return jnp.concatenate([reproj.ravel(), prior, shape, p_theta, p_beta])


def _stage_objective(x, tmpl, decoder, k, p, xy, conf, partner, w, sigma):
    r = _stage_residuals(x, tmpl, decoder, k, p, xy, conf, partner, w, sigma)
    tau = crop_to_full_jnp(x[:3] * DEPTH_NORMALIZER, p, k)
    depth = jnp.min(joints_fn(tmpl, tau, x[3:9], x[9:9 + THETA_DIM], x[9 + THETA_DIM:])[:, 2])
    # a body crossing the image plane makes projections meaningless
    return jnp.where(depth > MIN_BODY_DEPTH, jnp.sum(r * r), jnp.inf)


_residuals_jit = jax.jit(_stage_residuals)
_objective_jit = jax.jit(_stage_objective)
_jacobian_jit = jax.jit(jax.jacfwd(_stage_residuals))


def _root_hypotheses(x, count):
    """Copies of ``x`` with the root turned about the camera axis and the body's vertical.

    Half of the hypotheses are flipped upright (a half turn about the
    optical axis); the rest keep the given root. Yaw turns are spread evenly.
    """
    R0 = rot6d_decode(x[3:9])
    flips = [np.eye(3), np.diag([-1.0, -1.0, 1.0])] if count > 1 else [np.eye(3)]
    per = max(1, count // len(flips))
    out = []
    for F in flips:
        for i in range(per):
            a = 2.0 * np.pi * i / per
            Ry = np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])
            R = F @ R0 @ Ry
            xs = x.copy()
            xs[3:9] = np.concatenate([R[:, 0], R[:, 1]])
            out.append(xs)
    return out


class GradientRefiner:
    """Damped descent on the per-frame stage objective.

    The objective is the confidence-weighted Geman-McClure reprojection error
    plus the latent pose prior and shape penalty, plus partner pose/shape
    agreement when partner data is present. Each step moves along the
    gradient preconditioned by the damped Gauss-Newton matrix and halves the
    step until the objective strictly decreases; steps that cannot be made
    to decrease are not taken.
    """

    name = "gradient"

    def __init__(self, config: GradientRefinerConfig | None = None,
                 template: BodyTemplate | None = None, prior: PriorBasis | None = None):
        self.config = config or GradientRefinerConfig()
        self.template = template or default_template()
        self.prior = prior or default_prior()

    def _args(self, inp: StageInput):
        cfg = self.config
        p = inp.crop.as_array() if inp.crop is not None else np.array([0.0, 0.0, 1.0])
        if inp.has_partner:
            lw = cfg.multi_view
            partner = np.concatenate([inp.partner_theta, inp.partner_beta]).astype(float)
            w = np.array([lw.j2d, lw.vposer, lw.beta, lw.theta, lw.beta])
        else:
            lw = cfg.single_view
            partner = np.zeros(THETA_DIM + BETA_DIM)
            w = np.array([lw.j2d, lw.vposer, lw.beta, 0.0, 0.0])
        return (self.template, self.prior.decoder, inp.intrinsics.as_array(), p,
                inp.observation.xy, inp.observation.conf, partner, w, float(cfg.sigma))

    def objective(self, inp: StageInput, params: BodyParams | None = None) -> float:
        x = (params or inp.current).to_vector()
        return float(_objective_jit(jnp.asarray(x), *self._args(inp)))

    def refine(self, inp: StageInput) -> tuple[BodyParams, list[float]]:
        """Run the configured number of steps; returns the result and objective trace.

        In the first stage the root orientation is ambiguous, so a few root
        hypotheses are probed for ``probe_steps`` each and the one with the
        lowest objective is continued. With partner data, the partner's pose
        and shape on this view's root is probed as a second start. The returned trace belongs to the
        chosen hypothesis.
        """
        cfg = self.config
        args = self._args(inp)
        x0 = inp.current.to_vector()
        f0 = float(_objective_jit(x0, *args))
        if not np.isfinite(f0):
            raise NonFiniteObjective(f"stage objective is not finite at frame {inp.frame_id}",
                                     frame=inp.frame_id)
        starts = [x0]
        if inp.stage_index == 0 and cfg.root_hypotheses > 1:
            starts = _root_hypotheses(x0, cfg.root_hypotheses)
        if inp.has_partner and cfg.partner_hypothesis:
            xp = x0.copy()
            xp[9:9 + THETA_DIM] = inp.partner_theta
            xp[9 + THETA_DIM:] = inp.partner_beta
            starts = starts + [xp]
        if len(starts) == 1:
            x, trace = self._descend(x0, f0, args, cfg.steps)
        else:
            probes = []
            for xs in starts:
                fs = float(_objective_jit(xs, *args))
                if np.isfinite(fs):
                    probes.append(self._descend(xs, fs, args, min(cfg.probe_steps, cfg.steps)))
            x, trace = min(probes, key=lambda p: p[1][-1])
            x, rest = self._descend(x, trace[-1], args, cfg.steps - (len(trace) - 1))
            trace = trace + rest[1:]
        out = BodyParams.from_vector(x)
        _validate_rotations(out)
        return out, trace

    def _descend(self, x, f, args, steps):
        cfg = self.config
        trace = [f]
        n = x.size
        mu = cfg.damping
        # extra damping on pose directions the prior basis cannot express;
        # the matrix stays positive definite, so steps remain descent steps
        D = np.asarray(self.prior.decoder)
        extra = np.zeros((n, n))
        th = slice(9, 9 + THETA_DIM)
        extra[th, th] = cfg.off_manifold_damping * (np.eye(THETA_DIM) - D @ D.T)
        for _ in range(steps):
            r = np.asarray(_residuals_jit(x, *args))
            J = np.asarray(_jacobian_jit(x, *args))
            g = J.T @ r
            if not np.any(g):
                break
            H = J.T @ J
            diag = np.diag(H) + 1e-6
            try:
                d = -np.linalg.solve(H + mu * np.diag(diag) + extra, g)
            except np.linalg.LinAlgError:
                d = -g / diag
            if not g @ d < 0:
                d = -g / diag
            # trust region on the raw parameters: unobserved directions can
            # otherwise fly off while every residual sits in the flat tail
            # of the robust kernel
            peak = np.max(np.abs(d))
            if peak > cfg.max_step:
                d *= cfg.max_step / peak
            t = 1.0
            accepted = False
            for _ in range(cfg.max_halvings):
                x_new = x + t * d
                f_new = float(_objective_jit(x_new, *args))
                if np.isfinite(f_new) and f_new < f:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break
            mu = max(mu / 3.0, 1e-6) if t == 1.0 else min(mu * 10.0, 1e6)
            x, f = x_new, f_new
            trace.append(f)
        return x, trace

    def __call__(self, inp: StageInput) -> BodyParams:
        return self.refine(inp)[0]


# ---------------------------------------------------------------- oracle refiner

@dataclass(frozen=True)
class OracleRefinerConfig:
    alpha: float = 0.5
    sigma: float = 0.0
    seed: int = 0


class OracleNoiseRefiner:
    """Test fixture: step a fraction ``alpha`` toward ground truth, add noise.

    Partner pose and shape, when present, are first averaged in with weight
    0.5. Noise is seeded per (seed, frame, agent, stage), so results do not
    depend on the order in which agents run.
    """

    name = "oracle"

    def __init__(self, config: OracleRefinerConfig | None = None):
        self.config = config or OracleRefinerConfig()

    def __call__(self, inp: StageInput) -> BodyParams:
        if inp.ground_truth is None:
            raise ConfigError("oracle refiner needs ground truth in the stage input")
        cfg = self.config
        x = inp.current.copy()
        if inp.has_partner:
            x.theta = 0.5 * x.theta + 0.5 * np.asarray(inp.partner_theta, dtype=float)
            x.beta = 0.5 * x.beta + 0.5 * np.asarray(inp.partner_beta, dtype=float)
        gt = inp.ground_truth.to_vector()
        v = x.to_vector()
        if cfg.alpha == 1.0:
            v = gt.copy()
        else:
            v = v + cfg.alpha * (gt - v)
        if cfg.sigma > 0:
            rng = np.random.default_rng([cfg.seed, inp.frame_id, inp.agent_id, inp.stage_index])
            noise = rng.normal(scale=cfg.sigma, size=v.size)
            noise[:3] /= DEPTH_NORMALIZER  # sigma is in meters for the translation
            v = v + noise
        out = BodyParams.from_vector(v)
        _validate_rotations(out)
        return out


def _validate_rotations(params: BodyParams):
    rot6d_decode(params.phi)
    for r in params.theta.reshape(NUM_BODY_JOINTS, 6):
        rot6d_decode(r)


Refiner = Callable[[StageInput], BodyParams]


def make_refiner(name: str, **kwargs) -> Refiner:
    if name == "gradient":
        return GradientRefiner(GradientRefinerConfig(**kwargs))
    if name == "oracle":
        return OracleNoiseRefiner(OracleRefinerConfig(**kwargs))
    raise ConfigError(f"unknown refiner {name!r}")


def refine_stage(inp: StageInput, refiner: Refiner) -> BodyParams:
    return refiner(inp)


# ---------------------------------------------------------------- per-agent pipeline

@dataclass
class FrameInput:
    """Everything one agent sees of one frame: its own view only."""

    frame_id: int
    agent_id: int
    observation: KeypointObservation  # full-image pixels
    intrinsics: Intrinsics
    crop: CropParams
    ground_truth: Optional[BodyParams] = None  # camera frame, meters; oracle only


def output_frame(mode: EstimatorMode) -> str:
    return "full" if EstimatorMode(mode).full_camera else "crop"


def _oracle_target(frame: FrameInput, mode: EstimatorMode) -> Optional[BodyParams]:
    gt = frame.ground_truth
    if gt is None:
        return None
    target = gt.copy()
    if mode.full_camera:
        target.tau = full_to_crop(gt.tau, frame.crop, frame.intrinsics) / DEPTH_NORMALIZER
    else:
        # crop-frame modes report their translation as-is; an oracle must hit
        # the value that evaluates to ground truth
        target.tau = gt.tau / DEPTH_NORMALIZER
    return target


class AgentEstimator:
    """Stage-by-stage state machine for one agent and one frame at a time."""

    def __init__(self, agent_id: int, mode, refiner: Refiner):
        self.agent_id = agent_id
        self.mode = parse_mode(mode)
        self.refiner = refiner
        self._frame: Optional[FrameInput] = None
        self._current: Optional[BodyParams] = None
        self._stage = 0
        self._obs = None
        self._cam = None
        self._target = None

    def begin(self, frame: FrameInput, start: BodyParams | None = None):
        self._frame = frame
        self._current = (start or init_params()).copy()
        self._stage = 0
        if self.mode.full_camera:
            self._obs, self._cam = frame.observation, frame.intrinsics
        else:
            xy = full_to_crop_pixels(frame.observation.xy, frame.crop, frame.intrinsics)
            self._obs = KeypointObservation(xy, frame.observation.conf)
            self._cam = crop_intrinsics(frame.crop, frame.intrinsics)
        self._target = _oracle_target(frame, self.mode)

    def stage(self, partner: StageMessage | None = None) -> StageMessage | None:
        """Run the next stage; returns the outbound message when one is due."""
        if self._frame is None or self._stage >= NUM_STAGES:
            raise ShapeMismatch("no frame in progress")
        k = self._stage
        if partner is not None and not self.mode.exchanges:
            raise ShapeMismatch(f"mode {self.mode.value} does not exchange messages")
        inp = StageInput(
            observation=self._obs,
            intrinsics=self._cam,
            current=self._current,
            stage_index=k,
            mode=self.mode,
            crop=self._frame.crop if self.mode.full_camera else None,
            partner_theta=None if partner is None else partner.theta.astype(float),
            partner_beta=None if partner is None else partner.beta.astype(float),
            ground_truth=self._target,
            frame_id=self._frame.frame_id,
            agent_id=self.agent_id,
        )
        self._current = refine_stage(inp, self.refiner)
        self._stage += 1
        if self.mode.exchanges and k < NUM_STAGES - 1:
            return StageMessage(self._frame.frame_id, k, self._current.theta, self._current.beta)
        return None

    @property
    def done(self) -> bool:
        return self._stage >= NUM_STAGES

    def result(self) -> BodyParams:
        """Final estimate in meters, in the mode's output frame."""
        if not self.done:
            raise ShapeMismatch("frame not finished")
        out = self._current.copy()
        tau_c = self._current.tau * DEPTH_NORMALIZER
        if self.mode.full_camera:
            out.tau = crop_to_full(tau_c, self._frame.crop, self._frame.intrinsics)
        else:
            out.tau = tau_c
        return out


@dataclass
class StageRunResult:
    params: BodyParams
    messages: list = field(default_factory=list)


ExchangeCallback = Callable[[int, StageMessage], Optional[StageMessage]]


def run_three_stages(frame: FrameInput, mode, refiner: Refiner,
                     exchange: ExchangeCallback | None = None) -> StageRunResult:
    """Refine one view in three stages, exchanging after stages 0 and 1.

    ``exchange(stage, outbound)`` delivers this agent's message and returns the
    partner's message for the same stage (or ``None`` if unavailable). It may
    raise ``ExchangeTimeout``, which propagates to the caller.
    """
    agent = AgentEstimator(frame.agent_id, mode, refiner)
    agent.begin(frame)
    sent = []
    partner = None
    for _ in range(NUM_STAGES):
        out = agent.stage(partner)
        partner = None
        if out is not None:
            sent.append(out)
            if exchange is not None:
                partner = exchange(out.stage, out)
    return StageRunResult(agent.result(), sent)
