"""Command-line entry point.

Subcommands: gen-data, train, eval, modes, sample-viz, bench.  Every output
file embeds the resolved configuration and root seed; all randomness flows
from --seed through named substreams so components vary independently.

Exit codes: 0 success, 1 validation failure (one-line diagnostic on
stderr), 2 internal numerical error (non-finite loss, degraded mode set).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .envs import generate_demos, make_env, rollout
from .gmm import GmmParams, sample_vanilla, scale_variances
from .modes import ModeFinderConfig, find_modes, sample_mode
from .plotting import svg_points, svg_trajectories, write_rollout_csv
from .policy import PolicyConfig, QfatPolicy, SamplerSpec
from .rng import substream
from .training import (
    TrainConfig,
    TrainingDivergence,
    load_policy,
    prepare,
    read_trajectories,
    save_policy,
    train,
    write_trajectories,
    write_training_log,
)


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is exit 1
        raise CliError(message)


def _sampler_from_args(args) -> SamplerSpec:
    return SamplerSpec(kind=args.sampler, alpha=args.alpha,
                       mode_noise=args.mode_noise, noise_scale=args.noise_scale)


def _load_gmm_spec(path: str) -> GmmParams:
    spec = json.loads(Path(path).read_text())
    return GmmParams(weights=np.array(spec["weights"]),
                     means=np.array(spec["means"]),
                     stddevs=np.array(spec["stddevs"]))


def _require(path: str | None, what: str) -> str:
    if not path:
        raise CliError(f"--{what} is required for this command")
    if not Path(path).exists():
        raise CliError(f"{what} file not found: {path}")
    return path


def cmd_gen_data(args) -> int:
    rng = substream(args.seed, "data")
    demos = generate_demos(args.env, args.n, args.noise_std, rng)
    meta = {"command": "gen-data", "env": args.env, "n": args.n,
            "noise_std": args.noise_std, "seed": args.seed}
    out = args.out or f"{args.env}_demos.jsonl"
    write_trajectories(demos, out, meta=meta)
    print(f"wrote {len(demos)} trajectories to {out}")
    return 0


def cmd_train(args) -> int:
    dataset_path = _require(args.dataset, "dataset")
    config_path = _require(args.config, "config")
    cfg = json.loads(Path(config_path).read_text())
    policy_cfg = PolicyConfig.from_dict(cfg["policy"])
    train_cfg = TrainConfig.from_dict(cfg["train"])
    if args.seed is not None:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": args.seed})
    seed = train_cfg.seed

    trajectories = read_trajectories(dataset_path)
    if trajectories and trajectories[0].states.shape[1] != policy_cfg.state_dim:
        raise CliError("dataset state dimension does not match the policy config")

    out_dir = Path(args.out or "train_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    prepared = prepare(trajectories, policy_cfg, train_cfg, substream(seed, "data"))
    if prepared.skipped:
        print(f"skipped {prepared.skipped} trajectories too short for the window layout")
    policy = QfatPolicy(policy_cfg, substream(seed, "init"))
    log = train(policy, prepared, train_cfg)

    meta = {"command": "train", "policy": policy_cfg.to_dict(),
            "train": train_cfg.to_dict(), "seed": seed,
            "constant_lr": log.constant_lr, "dataset": str(dataset_path)}
    if log.constant_lr:
        print("min_lr absent: holding learning rate constant")
    write_training_log(log, out_dir / "log.csv", meta=meta)
    extra = {"seed": seed, "train_config": train_cfg.to_dict(),
             "best_epoch": log.best_epoch, "best_val_nll": log.best_val_nll}
    save_policy(policy, out_dir / "final.qfat", prepared.normalizer, extra=extra)
    final_values = policy.store.copy_values()
    policy.store.load_values(log.best_params)
    save_policy(policy, out_dir / "best.qfat", prepared.normalizer, extra=extra)
    policy.store.load_values(final_values)
    print(f"best val NLL {log.best_val_nll:.6f} at epoch {log.best_epoch}; "
          f"checkpoints in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    policy, normalizer, _ = load_policy(ckpt)
    env = make_env(args.env, args.process_noise_std)
    sampler = _sampler_from_args(args)
    goal_bank = None
    if policy.config.goal_horizon > 0 or args.conditional:
        if policy.config.goal_horizon == 0:
            raise CliError("--conditional requires a goal-conditioned checkpoint")
        bank_path = _require(args.dataset, "dataset")
        goal_bank = read_trajectories(bank_path)
    report = rollout(policy, env, sampler, args.episodes, args.seed, normalizer,
                     goal_bank=goal_bank, threads=args.threads)
    out_dir = Path(args.out or "eval_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    # --threads is deliberately not embedded: outputs must be byte-identical
    # for a fixed seed regardless of thread count
    meta = {"command": "eval", "env": args.env, "sampler": sampler.to_dict(),
            "episodes": args.episodes, "seed": args.seed,
            "checkpoint": str(ckpt), "policy": policy.config.to_dict()}
    payload = dict(meta)
    payload["report"] = report.to_dict()
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    write_rollout_csv(report.episodes, out_dir / "trajectories.csv", meta=meta)
    discs = []
    if args.env == "multiroute":
        discs = [(env.target, env.target_radius, "#2ca02c")]
    else:
        discs = [(c, env.goal_radius, "#2ca02c") for c in env.goals.values()]
    svg_trajectories([ep.states for ep in report.episodes], out_dir / "overlay.svg",
                     discs=discs, meta=meta,
                     title=f"{args.env} / {sampler.kind} / success {report.success_rate:.2f}")
    print(f"success_rate {report.success_rate:.3f}  entropy "
          f"{report.behavioral_entropy_bits:.3f} bits  mean_jitter {report.mean_jitter:.3e}")
    if any(ep.degraded for ep in report.episodes):
        print("degraded mode sets encountered during rollout", file=sys.stderr)
        return 2
    return 0


def cmd_modes(args) -> int:
    gmm = _load_gmm_spec(_require(args.gmm, "gmm"))
    cfg = ModeFinderConfig()
    if args.config:
        cfg = ModeFinderConfig(**json.loads(Path(args.config).read_text()))
    ms = find_modes(gmm, cfg, substream(args.seed, "modes"))
    out = {
        "modes": np.round(ms.modes, 12).tolist(),
        "weights": np.round(ms.weights, 12).tolist(),
        "log_densities": np.round(ms.log_densities, 12).tolist(),
        "degraded": ms.degraded,
        "config": {"epsilon": cfg.epsilon, "max_it": cfg.max_it, "n_init": cfg.n_init,
                   "merge_radius": cfg.merge_radius, "eig_tol": cfg.eig_tol,
                   "reject_threshold": cfg.reject_threshold},
        "seed": args.seed,
    }
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 2 if ms.degraded else 0


def cmd_sample_viz(args) -> int:
    gmm = _load_gmm_spec(_require(args.gmm, "gmm"))
    out_dir = Path(args.out or "sample_viz")
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"command": "sample-viz", "gmm": str(args.gmm), "n": args.n,
            "alpha": args.alpha, "mode_noise": args.mode_noise,
            "noise_scale": args.noise_scale, "seed": args.seed}
    rng = substream(args.seed, "sampling")
    vanilla = sample_vanilla(gmm, rng, args.n)
    scaled = sample_vanilla(scale_variances(gmm, args.alpha), rng, args.n)
    ms = find_modes(gmm, ModeFinderConfig(), substream(args.seed, "modes"))
    mode_pts = np.array([
        sample_mode(ms, rng, noise=args.mode_noise, scale=args.noise_scale)
        for _ in range(args.n)
    ])
    with open(out_dir / "samples.csv", "w") as fh:
        fh.write("# " + json.dumps(meta) + "\n")
        fh.write("sampler,index," + ",".join(f"x{i}" for i in range(gmm.m)) + "\n")
        for name, pts in [("vanilla", vanilla), (f"scaled({args.alpha:g})", scaled),
                          ("mode", mode_pts)]:
            for i, p in enumerate(pts):
                fh.write(f"{name},{i}," + ",".join(f"{v:.9f}" for v in p) + "\n")
    if gmm.m == 2:
        svg_points([("vanilla", vanilla), (f"scaled({args.alpha:g})", scaled),
                    ("mode", mode_pts)], out_dir / "samples.svg", meta=meta,
                   title="sampler comparison")
    print(f"wrote {3 * args.n} samples to {out_dir} "
          f"({ms.count} modes{', degraded' if ms.degraded else ''})")
    return 2 if ms.degraded else 0


def _time_component(fn, reps: int) -> dict[str, float]:
    for _ in range(max(3, reps // 100)):
        fn()
    samples = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        fn()
        samples[i] = time.perf_counter() - t0
    return {"mean_ms": float(samples.mean() * 1e3),
            "p95_ms": float(np.percentile(samples, 95) * 1e3)}


def cmd_bench(args) -> int:
    if args.config:
        policy_cfg = PolicyConfig.from_dict(json.loads(Path(args.config).read_text())["policy"])
    else:
        policy_cfg = PolicyConfig(state_dim=30, action_dim=9, mixtures=4, state_history=10,
                                  layers=6, heads=8, embed_dim=128, dropout=0.1)
    policy = QfatPolicy(policy_cfg, substream(args.seed, "init"))
    # nonzero head so decode cost is representative
    head_rng = substream(args.seed, "bench")
    policy.store.params["head.w"][...] = 0.02 * head_rng.standard_normal(
        policy.store.params["head.w"].shape).astype(np.float32)
    states = head_rng.uniform(-1, 1, (1, policy_cfg.state_history, policy_cfg.state_dim)
                              ).astype(np.float32)
    goals = None
    if policy_cfg.goal_horizon > 0:
        goals = head_rng.uniform(-1, 1, (1, policy_cfg.goal_horizon, policy_cfg.state_dim)
                                 ).astype(np.float32)

    x = states if goals is None else np.concatenate([goals, states], axis=1)

    def backbone_forward():
        tokens = policy.in_proj.forward(x)
        return policy.decoder.forward(tokens)

    h_last = backbone_forward()[0, -1]

    def head_decode():
        return policy.head_decode(h_last)

    dist = head_decode()
    rng = substream(args.seed, "sampling")
    samplers = {
        "sample_vanilla": lambda: sample_vanilla(dist, rng, 1),
        "sample_scaled": lambda: sample_vanilla(scale_variances(dist, args.alpha), rng, 1),
        "sample_mode": lambda: sample_mode(
            find_modes(dist, ModeFinderConfig(), substream(args.seed, "modes")), rng),
    }
    results = {"backbone_forward": _time_component(backbone_forward, args.reps),
               "head_decode": _time_component(head_decode, args.reps)}
    for name, fn in samplers.items():
        results[name] = _time_component(fn, args.reps)

    payload = {"command": "bench", "policy": policy_cfg.to_dict(), "reps": args.reps,
               "seed": args.seed, "timings": results}
    print(f"{'component':<18}{'mean (ms)':>12}{'p95 (ms)':>12}")
    for name, stats in results.items():
        print(f"{name:<18}{stats['mean_ms']:>12.4f}{stats['p95_ms']:>12.4f}")
    decode_frac = (results["head_decode"]["mean_ms"] + results["sample_vanilla"]["mean_ms"]) \
        / results["backbone_forward"]["mean_ms"]
    print(f"head decode + vanilla sampling = {100 * decode_frac:.1f}% of backbone forward")
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="qfat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, default=None)
        if threads:
            p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("gen-data", help="generate demonstration trajectories")
    p.add_argument("--env", choices=["multiroute", "sequencing"], required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise-std", type=float, default=0.01, dest="noise_std")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="behavioral cloning on a demo dataset")
    p.add_argument("--dataset", type=str)
    p.add_argument("--config", type=str)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll out a checkpoint and report metrics")
    p.add_argument("--checkpoint", type=str)
    p.add_argument("--env", choices=["multiroute", "sequencing"], required=True)
    p.add_argument("--sampler", choices=["vanilla", "scaled", "mode"], default="scaled")
    p.add_argument("--alpha", type=float, default=1e-6)
    p.add_argument("--mode-noise", choices=["none", "fixed", "laplace"],
                   default="none", dest="mode_noise")
    p.add_argument("--noise-scale", type=float, default=1e-4, dest="noise_scale")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--conditional", action="store_true")
    p.add_argument("--dataset", type=str, default=None,
                   help="held-out demos used as the goal bank for conditional policies")
    p.add_argument("--process-noise-std", type=float, default=0.0, dest="process_noise_std")
    common(p, threads=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("modes", help="extract modes from a GMM spec file")
    p.add_argument("--gmm", type=str)
    p.add_argument("--config", type=str, default=None)
    common(p)
    p.set_defaults(func=cmd_modes)

    p = sub.add_parser("sample-viz", help="draw samples under each sampler")
    p.add_argument("--gmm", type=str)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--alpha", type=float, default=1e-6)
    p.add_argument("--mode-noise", choices=["none", "fixed", "laplace"],
                   default="none", dest="mode_noise")
    p.add_argument("--noise-scale", type=float, default=1e-4, dest="noise_scale")
    common(p)
    p.set_defaults(func=cmd_sample_viz)

    p = sub.add_parser("bench", help="time backbone, head decode, and samplers")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=1e-6)
    common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergence as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
