"""Command-line entry point: ``uavmocap <command> [options]``.

Exit codes: 0 on success, 2 on invalid input or configuration, 3 on a
numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, UavMocapError, ValidationError

EXIT_OK = 0


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg):
    from .synthgen import load_dataset

    path = args.dataset or cfg.get("dataset")
    if not path:
        raise ConfigError("a dataset file is required (--dataset)")
    return load_dataset(path)


def _refiner(name, cfg, seed):
    from .estimator import make_refiner

    options = dict(cfg.get("refiner_options", {}))
    if name == "oracle":
        options.setdefault("seed", seed)
    try:
        return make_refiner(name, **options)
    except TypeError as exc:
        raise ConfigError(f"bad refiner options: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_generate(args, cfg):
    from .synthgen import NOISELESS, generate_sequence, noise_from_dict, save_dataset, scene_from_dict

    scene_d = dict(cfg.get("scene", {}))
    scene_d["seed"] = args.seed
    if args.frames is not None:
        scene_d["frames"] = args.frames
    scene = scene_from_dict(scene_d)
    noise = NOISELESS if args.noiseless else noise_from_dict(cfg.get("noise", {}))
    frames = generate_sequence(scene, noise)
    path = save_dataset(_out_dir(args) / "dataset.jsonl", frames)
    print(f"wrote {len(frames)} frames to {path}")


def cmd_simulate(args, cfg):
    from .fusion.simulator import TimingModel, run_session
    from .metrics import save_estimates, session_estimates

    frames = _dataset(args, cfg)
    timing = TimingModel.from_dict(cfg["timing"]) if "timing" in cfg else TimingModel()
    if args.jitter:
        timing = TimingModel.from_dict({**timing.to_dict(), "jitter": args.jitter})
    mode = args.mode or cfg.get("mode", "airpose")
    refiner = _refiner(args.refiner or cfg.get("refiner", "oracle"), cfg, args.seed)
    session = run_session(frames, timing, mode, refiner, args.seed,
                          pipelined=args.pipelined, threaded=args.threaded)
    out = _out_dir(args)
    (out / "session.json").write_text(session.to_json())
    (out / "session.csv").write_text(session.to_csv())
    save_estimates(out / "estimates.jsonl", session_estimates(session), session.mode)
    print(f"{session.completed} completed, {session.dropped} dropped, "
          f"{session.fps:.3f} fps, drop rate {session.drop_rate:.3f}")


def _fill_gaps(frames, estimates):
    """Per-frame estimates for every dataset frame, copying the nearest completed one."""
    have = sorted(estimates)
    if not have:
        raise ValidationError("no estimates to refine")
    ids = [f.frame_id for f in frames]
    out = []
    for fid in ids:
        nearest = min(have, key=lambda h: (abs(h - fid), h))
        out.append(estimates[nearest])
    return out, ids


def cmd_refine(args, cfg):
    from .airpose_plus import (
        OptimizerConfig, init_from_airpose, observations_from_frames, refine, save_estimate,
        write_trace_csv, write_trajectory_csv,
    )
    from .estimator import EstimatorMode
    from .metrics import load_estimates

    frames = _dataset(args, cfg)
    if not args.estimates:
        raise ConfigError("an estimates file is required (--estimates)")
    estimates, mode = load_estimates(args.estimates)
    if not EstimatorMode(mode).full_camera:
        raise ValidationError(f"mode {mode!r} reports crop-frame translations; "
                              "sequence refinement needs full-camera estimates")
    per_frame, ids = _fill_gaps(frames, estimates)
    try:
        opt = OptimizerConfig(**cfg.get("optimizer", {}))
    except TypeError as exc:
        raise ConfigError(f"bad optimizer options: {exc}") from None
    seq, trace = refine(init_from_airpose(per_frame, ids), observations_from_frames(frames), opt)
    out = _out_dir(args)
    save_estimate(out / "refined.jsonl", seq)
    write_trace_csv(out / "loss_trace.csv", trace)
    fps = cfg.get("scene", {}).get("fps")
    write_trajectory_csv(out / "relative_trajectory.csv", seq, fps)
    print(f"refined {seq.num_frames} frames: loss {trace[0]:.6g} -> {trace[-1]:.6g} "
          f"in {len(trace) - 1} steps")


def _read_any_estimates(path):
    """Session estimates or a refined sequence, as frame id -> per-camera params."""
    from .airpose_plus import ESTIMATE_SCHEMA, load_estimate
    from .metrics import load_estimates

    first = Path(path).read_text().split("\n", 1)[0] if Path(path).exists() else ""
    if ESTIMATE_SCHEMA in first:
        seq = load_estimate(path)
        return {fid: [seq.body_params(c, t) for c in range(seq.num_cameras)]
                for t, fid in enumerate(seq.frame_ids)}, "airpose"
    return load_estimates(path)


def cmd_eval(args, cfg):
    from .metrics import evaluate

    frames = _dataset(args, cfg)
    if not args.estimates:
        raise ConfigError("an estimates file is required (--estimates)")
    estimates, mode = _read_any_estimates(args.estimates)
    report = evaluate(frames, estimates, {"mode": mode, "estimates": str(args.estimates)}, args.seed)
    (_out_dir(args) / "eval.json").write_text(report.to_json())
    print(f"MPE {report.mpe_m:.4f} m  MPJPE {report.mpjpe_m:.4f} m over {len(report.frame_ids)} frames")


def cmd_ablate(args, cfg):
    from .metrics import ablation_csv, run_ablation, run_ablation_seeds

    refiner = args.refiner or cfg.get("refiner", "gradient")
    options = cfg.get("refiner_options", {})
    out = _out_dir(args)
    if args.dataset or cfg.get("dataset"):
        results = [run_ablation(_dataset(args, cfg), refiner, options, args.seed)]
        fractions = {}
    else:
        seeds = range(args.seed, args.seed + args.seeds)
        run = run_ablation_seeds(seeds, args.frames or 5, refiner, options)
        results, fractions = run["results"], run["fractions"]
    payload = {"refiner": refiner, "refiner_options": options, "fractions": fractions,
               "seeds": [r.to_dict() for r in results]}
    (out / "ablation.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    (out / "ablation.csv").write_text(ablation_csv(results))
    for r in results:
        print(f"seed {r.seed}\n{r.table()}")
    for k, v in fractions.items():
        print(f"{k}: {v:.2%} of seeds")


def cmd_export_csv(args, cfg):
    from .metrics import write_trajectories_csv

    frames = _dataset(args, cfg)
    if not args.estimates:
        raise ConfigError("an estimates file is required (--estimates)")
    estimates, _ = _read_any_estimates(args.estimates)
    path = write_trajectories_csv(_out_dir(args) / "trajectories.csv", estimates, frames)
    print(f"wrote {path}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", default=".", help="output directory")

    p = argparse.ArgumentParser(prog="uavmocap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--frames", type=int)
    g.add_argument("--noiseless", action="store_true", help="exact keypoints, full confidence")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("simulate", parents=[common], help="run a timed two-agent session")
    s.add_argument("--dataset")
    s.add_argument("--mode", choices=["baseline", "multiview", "fullcam", "airpose"])
    s.add_argument("--refiner", choices=["oracle", "gradient"])
    s.add_argument("--jitter", choices=["none", "calibrated"])
    s.add_argument("--pipelined", action="store_true", help="use last window's partner messages")
    s.add_argument("--threaded", action="store_true", help="one thread per agent")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("refine", parents=[common], help="refine a session's estimates offline")
    r.add_argument("--dataset")
    r.add_argument("--estimates")
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", parents=[common], help="score estimates against ground truth")
    e.add_argument("--dataset")
    e.add_argument("--estimates")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="compare the four estimator modes")
    a.add_argument("--dataset", help="ablate one dataset instead of generated seeds")
    a.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    a.add_argument("--frames", type=int, help="frames per generated seed")
    a.add_argument("--refiner", choices=["oracle", "gradient"])
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-csv", parents=[common], help="per-camera root trajectories")
    x.add_argument("--dataset")
    x.add_argument("--estimates")
    x.set_defaults(func=cmd_export_csv)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        args.func(args, cfg)
    except UavMocapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
