"""Evaluation metrics, estimate files and the four-mode ablation runner.

MPE is the mean distance between the estimated root and the ground-truth
root in the world frame, after mapping each camera's estimate through its
ground-truth extrinsics. MPJPE is the mean per-joint distance after both
skeletons are shifted so their roots coincide.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body_model import NUM_JOINTS, BodyParams, joints
from .bundle import default_template
from .errors import DatasetError, ShapeMismatch, ValidationError
from .estimator import AgentEstimator, EstimatorMode, make_refiner, output_frame, parse_mode
from .fusion.codec import decode_message, encode_message
from .fusion.simulator import default_frame_input
from .synthgen import NoiseConfig, SceneConfig, dataset_hash, generate_sequence

ESTIMATES_SCHEMA = "uavmocap.estimates/1"
MODES = tuple(m.value for m in EstimatorMode)


# ---------------------------------------------------------------- metrics

def _extrinsics_arrays(extrinsics, shape):
    """Accept nested ``CameraPose`` lists or a ``(rotations, translations)`` pair."""
    if isinstance(extrinsics, tuple) and len(extrinsics) == 2 and not hasattr(extrinsics[0], "rotation"):
        R, t = (np.asarray(a, dtype=float) for a in extrinsics)
    else:
        R = np.array([[p.rotation for p in row] for row in extrinsics], dtype=float)
        t = np.array([[p.translation for p in row] for row in extrinsics], dtype=float)
    if R.shape != shape[:2] + (3, 3) or t.shape != shape[:2] + (3,):
        raise ShapeMismatch("extrinsics do not match the estimates' frames and cameras")
    return R, t


def mpe_per_frame(estimates, gt, extrinsics) -> np.ndarray:
    """Per-frame root error in meters, averaged over cameras.

    ``estimates`` is ``(T, C, 3)`` camera-frame root translations, ``gt`` is
    ``(T, 3)`` world-frame roots and ``extrinsics[t][c]`` the ground-truth
    world-to-camera pose.
    """
    est = np.asarray(estimates, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.ndim != 3 or est.shape[2] != 3 or gt.shape != (est.shape[0], 3):
        raise ShapeMismatch("mpe expects (T, C, 3) estimates and (T, 3) ground truth")
    R, t = _extrinsics_arrays(extrinsics, est.shape)
    world = np.einsum("tcji,tcj->tci", R, est - t)
    return np.linalg.norm(world - gt[:, None, :], axis=2).mean(axis=1)


def mpe(estimates, gt, extrinsics) -> float:
    return float(np.mean(mpe_per_frame(estimates, gt, extrinsics)))


def mpjpe_per_frame(estimates, gt) -> np.ndarray:
    """Per-frame root-aligned joint error for ``(T, C, 22, 3)`` joint arrays."""
    est = np.asarray(estimates, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape or est.ndim != 4 or est.shape[2:] != (NUM_JOINTS, 3):
        raise ShapeMismatch(f"mpjpe expects matching (T, C, {NUM_JOINTS}, 3) arrays")
    diff = (est - est[:, :, :1]) - (gt - gt[:, :, :1])
    return np.linalg.norm(diff, axis=3).mean(axis=(1, 2))


def mpjpe(estimates, gt) -> float:
    return float(np.mean(mpjpe_per_frame(estimates, gt)))


@dataclass
class EvalReport:
    mpe_m: float
    mpjpe_m: float
    frame_ids: list
    mpe_per_frame: list
    mpjpe_per_frame: list
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "mpe_m": self.mpe_m,
            "mpjpe_m": self.mpjpe_m,
            "frame_ids": list(self.frame_ids),
            "mpe_per_frame": list(self.mpe_per_frame),
            "mpjpe_per_frame": list(self.mpjpe_per_frame),
            "config": self.config,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def evaluate(frames, estimates, config: dict | None = None, seed: int = 0) -> EvalReport:
    """Score camera-frame estimates against a dataset's ground truth.

    ``estimates`` maps frame id to one :class:`BodyParams` per camera; frames
    without an estimate (dropped windows) are left out.
    """
    by_id = {f.frame_id: f for f in frames}
    ids = sorted(estimates)
    if not ids:
        raise ValidationError("no estimates to evaluate")
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DatasetError(f"estimates reference frames not in the dataset: {missing[:5]}")
    tmpl = default_template()
    taus, gts, poses, est_j, gt_j = [], [], [], [], []
    for i in ids:
        frame = by_id[i]
        row = estimates[i]
        if len(row) != len(frame.cameras):
            raise ShapeMismatch(f"frame {i}: expected {len(frame.cameras)} camera estimates")
        taus.append([p.tau for p in row])
        gts.append(frame.body.tau)
        poses.append([cam.pose for cam in frame.cameras])
        est_j.append([joints(p, tmpl) for p in row])
        gt_j.append([joints(cam.ground_truth(frame.body), tmpl) for cam in frame.cameras])
    e = mpe_per_frame(taus, gts, poses)
    j = mpjpe_per_frame(est_j, gt_j)
    return EvalReport(float(np.mean(e)), float(np.mean(j)), ids, e.tolist(), j.tolist(),
                      dict(config or {}), seed)


# ---------------------------------------------------------------- estimate files

def dumps_estimates(estimates, mode) -> str:
    """JSON lines, one per frame: the per-camera estimates and their frame."""
    mode = parse_mode(mode)
    lines = []
    for fid in sorted(estimates):
        rec = {"schema": ESTIMATES_SCHEMA, "frame_id": int(fid), "mode": mode.value,
               "frame": output_frame(mode), "cameras": [p.to_dict() for p in estimates[fid]]}
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return "".join(lines)


def save_estimates(path, estimates, mode) -> Path:
    path = Path(path)
    path.write_text(dumps_estimates(estimates, mode))
    return path


def load_estimates(path) -> tuple[dict, str]:
    """Returns ``(estimates, mode)``."""
    out, modes = {}, set()
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if rec.get("schema") != ESTIMATES_SCHEMA:
                raise DatasetError(f"unsupported schema {rec.get('schema')!r}")
            out[int(rec["frame_id"])] = [BodyParams.from_dict(c) for c in rec["cameras"]]
            modes.add(rec["mode"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed estimate record ({exc})") from None
    if not out:
        raise DatasetError(f"{path} holds no estimates")
    if len(modes) != 1:
        raise DatasetError(f"{path} mixes modes {sorted(modes)}")
    return out, parse_mode(modes.pop()).value


def session_estimates(session) -> dict:
    """Frame id to per-agent estimates for every completed frame of a session."""
    ids = sorted(set(session.estimates[0]) & set(session.estimates[1]))
    return {i: [session.estimates[a][i] for a in range(len(session.estimates))] for i in ids}


def write_trajectories_csv(path, estimates, frames=None) -> Path:
    """Per-frame root position per camera, camera frame and (with a dataset) world frame."""
    by_id = {f.frame_id: f for f in frames} if frames is not None else {}
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["frame_id", "camera", "x", "y", "z"]
        if by_id:
            header += ["world_x", "world_y", "world_z", "gt_x", "gt_y", "gt_z"]
        w.writerow(header)
        for fid in sorted(estimates):
            for c, p in enumerate(estimates[fid]):
                row = [fid, c] + [repr(float(v)) for v in p.tau]
                if by_id:
                    frame = by_id.get(fid)
                    if frame is None:
                        raise DatasetError(f"frame {fid} not in the dataset")
                    world = frame.cameras[c].pose.to_world(p.tau)
                    row += [repr(float(v)) for v in world] + [repr(float(v)) for v in frame.body.tau]
                w.writerow(row)
    return path


# ---------------------------------------------------------------- ablation

def estimate_frame(frame, mode, refiner) -> list:
    """Run both agents' three stages on one frame with lossless timing.

    Messages travel through the wire codec, so the partner sees exactly the
    float32 payload it would receive over the link.
    """
    mode = parse_mode(mode)
    agents = [AgentEstimator(a, mode, refiner) for a in range(len(frame.cameras))]
    for a, agent in enumerate(agents):
        agent.begin(default_frame_input(frame, a))
    inbound = [None] * len(agents)
    while not agents[0].done:
        outbound = [agent.stage(inbound[a]) for a, agent in enumerate(agents)]
        wire = [None if m is None else encode_message(m) for m in outbound]
        inbound = [None if wire[1 - a] is None else decode_message(wire[1 - a])
                   for a in range(len(agents))]
    return [agent.result() for agent in agents]


def estimate_frames(frames, mode, refiner) -> dict:
    return {f.frame_id: estimate_frame(f, mode, refiner) for f in frames}


@dataclass
class AblationResult:
    reports: dict  # mode -> EvalReport
    dataset_hash: str
    seed: int = 0

    def table(self) -> str:
        lines = [f"{'Method':<24}{'MPE [m]':>10}{'MPJPE [m]':>12}"]
        for mode in MODES:
            if mode in self.reports:
                r = self.reports[mode]
                lines.append(f"{EstimatorMode(mode).label:<24}{r.mpe_m:>10.3f}{r.mpjpe_m:>12.3f}")
        return "\n".join(lines)

    def median(self, mode, metric) -> float:
        return float(np.median(getattr(self.reports[mode], f"{metric}_per_frame")))

    def orderings(self) -> dict:
        """The two expected ablation orderings, judged on per-frame medians."""
        return {
            "airpose_mpjpe_le_fullcam": self.median("airpose", "mpjpe") <= self.median("fullcam", "mpjpe"),
            "fullcam_mpe_lt_baseline": self.median("fullcam", "mpe") < self.median("baseline", "mpe"),
        }

    def to_dict(self) -> dict:
        return {"dataset_hash": self.dataset_hash, "seed": self.seed,
                "reports": {m: r.to_dict() for m, r in self.reports.items()}}


def run_ablation(frames, refiner: str = "gradient", refiner_options: dict | None = None,
                 seed: int = 0, modes=MODES) -> AblationResult:
    """Run the estimator modes over identical inputs and score each one.

    The dataset hash is checked before every mode, so a mode cannot see
    data that differs from what the others saw.
    """
    frames = list(frames)
    if not frames:
        raise DatasetError("dataset has no frames")
    options = dict(refiner_options or {})
    if refiner == "oracle":
        options.setdefault("seed", seed)
    digest = dataset_hash(frames)
    reports = {}
    for mode in modes:
        mode = parse_mode(mode).value
        if dataset_hash(frames) != digest:
            raise ValidationError("dataset changed between ablation modes")
        est = estimate_frames(frames, mode, make_refiner(refiner, **options))
        reports[mode] = evaluate(frames, est, {"mode": mode, "refiner": refiner, **options}, seed)
    return AblationResult(reports, digest, seed)


def ablation_scene(seed: int, frames: int = 5) -> tuple[SceneConfig, NoiseConfig]:
    """The seeded ablation setting: 30% of joints occluded in the first view."""
    return SceneConfig(frames=frames, seed=seed), NoiseConfig(occlusion=(0.3, 0.0))


def run_ablation_seeds(seeds, frames_per_seed: int = 5, refiner: str = "gradient",
                       refiner_options: dict | None = None, modes=MODES) -> dict:
    """Per-seed ablations plus the fraction of seeds on which each ordering holds."""
    results = []
    for seed in seeds:
        scene, noise = ablation_scene(seed, frames_per_seed)
        results.append(run_ablation(generate_sequence(scene, noise), refiner, refiner_options,
                                    seed, modes))
    summary = {}
    if results and {"airpose", "fullcam", "baseline"} <= set(modes):
        flags = [r.orderings() for r in results]
        summary = {k: float(np.mean([f[k] for f in flags])) for k in flags[0]}
    return {"results": results, "fractions": summary}


def ablation_csv(results) -> str:
    rows = ["seed,mode,mpe_m,mpjpe_m,median_mpe_m,median_mpjpe_m"]
    for r in results:
        for mode, rep in r.reports.items():
            rows.append(f"{r.seed},{mode},{rep.mpe_m!r},{rep.mpjpe_m!r},"
                        f"{r.median(mode, 'mpe')!r},{r.median(mode, 'mpjpe')!r}")
    return "\n".join(rows) + "\n"
