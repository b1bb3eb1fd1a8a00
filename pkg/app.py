"""Command-line entry point for the cooperative-perception simulator."""

import argparse
import asyncio
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from src.cem import train_cem
from src.config import ExperimentConfig, load_config
from src.episode import collect_sequences, run_episode
from src.errors import CoopSimError, NumericalError, ParameterError
from src.evidential import fuse_grids
from src.export import (
    create_run_bundle,
    heatmap_csv,
    markdown_to_html,
    read_checkpoint,
    read_episodes,
    read_grid,
    write_checkpoint,
    write_episodes,
    write_grid,
    write_table,
)
from src.kalman import LinearGaussianSystem, kalman_exact
from src.losses import NoiseBundle, default_t_min, lpvae_loss
from src.metrics import info_gain_metrics
from src.networks import GenerativeParams, KalmanRecognition, RecognitionParams
from src.orchestrator import EvaluationOrchestrator
from src.policies import (
    FEATURE_EXTRACTORS,
    POLICIES,
    BeliefFeatures,
    GridFeatures,
    ParametricPolicy,
    make_policy,
)
from src.request_mdp import RequestEnv, build_spatial_filter
from src.training import OBJECTIVES, SequenceData, train_toy

logger = logging.getLogger("coopsim")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
POLICY_NAMES = sorted(POLICIES) + [ParametricPolicy.name]
STANDARD_ERRORS = 3.0  # lower-bound slack in Monte Carlo standard errors


# --- shared helpers -----------------------------------------------------------


def _configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT, stream=sys.stderr)


def _out_dir(args) -> Path:
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _base_seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _seeds(args, config: ExperimentConfig) -> list[int]:
    """Explicit episode count counts up from --seed; otherwise the configured seeds."""
    if args.episodes is not None:
        if args.episodes < 1:
            raise ParameterError("--episodes must be at least 1", episodes=args.episodes)
        return [_base_seed(args) + i for i in range(args.episodes)]
    return list(config.harness.seeds)


def _apply_run_overrides(args, config: ExperimentConfig) -> ExperimentConfig:
    if getattr(args, "steps", None) is not None:
        config = config.with_overrides("harness", episode_steps=args.steps)
    reward = {
        key: value
        for key, value in (
            ("eta", getattr(args, "eta", None)),
            ("k_min_cells", getattr(args, "k_min_cells", None)),
            ("w_exp", getattr(args, "w_exp", None)),
        )
        if value is not None
    }
    if reward:
        config = config.with_overrides("reward", **reward)
    if getattr(args, "age_gamma", None) is not None:
        config = config.with_overrides("memory", age_gamma=args.age_gamma)
    return config


def _load_recognition(path: str) -> RecognitionParams:
    arrays, metadata = read_checkpoint(path)
    if metadata.get("kind") != "recognition":
        raise ParameterError(f"{path} is not a recognition checkpoint", path=path)
    return RecognitionParams(
        arrays,
        int(metadata["latent_dim"]),
        int(metadata["x_dim"]),
        int(metadata.get("v_dim", 0)),
        int(metadata.get("c_dim", 0)),
        int(metadata["belief_dim"]),
    )


def _make_features(name: Optional[str], config: ExperimentConfig, recognition: Optional[str]):
    if name is None:
        return None
    if name == "grid":
        return GridFeatures(config.kernel.pool)
    if recognition is None:
        raise ParameterError("belief features need --recognition")
    return BeliefFeatures(_load_recognition(recognition), config.kernel.pool)


def _load_policy_checkpoint(path: str) -> tuple:
    arrays, metadata = read_checkpoint(path)
    if metadata.get("kind") != "policy" or "weights" not in arrays:
        raise ParameterError(f"{path} is not a policy checkpoint", path=path)
    return arrays["weights"], metadata


def _build_policies(args, config: ExperimentConfig) -> tuple:
    """Policies named on the command line, or the configured one, plus their feature extractor."""
    names = list(args.policies) if args.policies else [config.policy.name]
    weights, feature_name = None, args.features
    if ParametricPolicy.name in names:
        checkpoint = args.checkpoint or config.policy.checkpoint
        if checkpoint is None:
            raise ParameterError("the parametric policy needs --checkpoint")
        weights, metadata = _load_policy_checkpoint(checkpoint)
        feature_name = feature_name or metadata.get("features", "grid")
    policies = [make_policy(name, config.policy, weights) for name in names]
    features = _make_features(feature_name, config, args.recognition)
    if features is not None and weights is not None:
        env = RequestEnv.from_config(config)
        if features.dim(*env.shape) + 1 != weights.shape[1]:
            raise ParameterError(
                f"checkpoint expects {weights.shape[1] - 1} features, extractor gives "
                f"{features.dim(*env.shape)}"
            )
    return policies, features


def _run_live(args, config: ExperimentConfig) -> tuple:
    policies, features = _build_policies(args, config)
    orchestrator = EvaluationOrchestrator(
        config,
        policies,
        jobs=args.jobs,
        features=features,
        env_factory=lambda: RequestEnv.from_config(config),
    )

    def on_wave_complete(idx: int, episodes: list) -> None:
        logger.info("%s: %d episodes", orchestrator.get_wave_description(idx), len(episodes))

    results = asyncio.run(orchestrator.run_all(_seeds(args, config), on_wave_complete))
    return results, orchestrator.errors


def _reports(results: dict, normalization: str) -> list:
    reports = []
    for policy in sorted(results):
        if results[policy]:
            reports.append(info_gain_metrics(results[policy], normalization))
        else:
            logger.warning("Policy %s has no completed episodes", policy)
    return reports


def _write_errors(out_dir: Path, errors: dict) -> None:
    failed = {policy: entries for policy, entries in errors.items() if entries}
    if not failed:
        return
    path = out_dir / "errors.json"
    path.write_text(json.dumps(failed, indent=2, sort_keys=True), encoding="utf-8")
    logger.warning("%d policies had failed episodes, see %s", len(failed), path)


# --- subcommands ----------------------------------------------------------------


def cmd_simulate(args, config: ExperimentConfig) -> int:
    config = _apply_run_overrides(args, config)
    out_dir = _out_dir(args)
    results, errors = _run_live(args, config)
    records = [record for policy in sorted(results) for record in results[policy]]
    write_episodes(out_dir / "episodes", records)
    reports = _reports(results, config.harness.gain_normalization)
    write_table(out_dir / "metrics.csv", "metrics", [r.to_row() for r in reports])
    _write_errors(out_dir, errors)
    if args.dump_grids:
        _dump_grids(args, config, out_dir / "grids")
    return 0


def _dump_grids(args, config: ExperimentConfig, grid_dir: Path) -> None:
    """Knowledge and complete grids of the first seed, one file per policy and step."""
    grid_dir.mkdir(parents=True, exist_ok=True)
    policies, features = _build_policies(args, config)
    seed = _seeds(args, config)[0]
    for policy in policies:
        motion_rows = []

        def on_step(t, state, bundle, name=policy.name, rows=motion_rows):
            write_grid(grid_dir / f"{name}_{seed}_{t:03d}_knowledge.grid", state.knowledge)
            write_grid(grid_dir / f"{name}_{seed}_{t:03d}_complete.grid", bundle.complete)
            rows.append(dict(zip(("t", "dx", "dy", "dtheta"), (t, *bundle.motion))))
            rows[-1].update(dict(zip(("accel", "steer", "dirx", "diry"), bundle.controls)))

        run_episode(
            RequestEnv.from_config(config),
            policy,
            config.harness.episode_steps,
            seed,
            features if policy.needs_features else None,
            on_step=on_step,
        )
        write_table(grid_dir / f"{policy.name}_{seed}_motion.csv", "motion", motion_rows)


def cmd_evaluate(args, config: ExperimentConfig) -> int:
    out_dir = _out_dir(args)
    normalization = args.normalization or config.harness.gain_normalization
    errors = {}
    if args.dumps:
        if any(getattr(args, k) is not None for k in ("eta", "k_min_cells", "w_exp", "age_gamma")):
            logger.warning("Reward and memory overrides have no effect on recorded episodes")
        results = {}
        for record in read_episodes(args.dumps):
            results.setdefault(record.policy, []).append(record)
    else:
        config = _apply_run_overrides(args, config)
        results, errors = _run_live(args, config)
    reports = _reports(results, normalization)
    if not reports:
        raise ParameterError("no completed episodes to evaluate")

    rows = [r.to_row() for r in reports]
    write_table(out_dir / "metrics.csv", "metrics", rows)
    (out_dir / "metrics.json").write_text(json.dumps(rows, indent=2, sort_keys=True), encoding="utf-8")
    report_md = "\n\n".join(
        ["# Request Policy Evaluation", f"Gain normalization: {normalization}"]
        + [r.to_markdown() for r in reports]
        + [config.to_markdown()]
    )
    (out_dir / "report.md").write_text(report_md, encoding="utf-8")
    (out_dir / "report.html").write_text(markdown_to_html(report_md), encoding="utf-8")
    _write_errors(out_dir, errors)
    if args.bundle:
        bundle = create_run_bundle(
            report_md,
            files={"metrics.csv": (out_dir / "metrics.csv").read_text(encoding="utf-8")},
            metadata={"config": config.to_dict(), "normalization": normalization},
            title="request-policy-evaluation",
        )
        (out_dir / "run_bundle.zip").write_bytes(bundle)
    for row in rows:
        print(
            f"{row['policy']}: P {row['gain_p']:.1f}% C {row['gain_c']:.1f}% "
            f"R {row['gain_r']:.1f}% size {row['request_size']:.1f}%"
        )
    return 0


def cmd_fuse(args, config: ExperimentConfig) -> int:
    fused = fuse_grids(read_grid(args.first), read_grid(args.second))
    output = Path(args.output) if args.output else _out_dir(args) / "fused.grid"
    write_grid(output, fused)
    print(output)
    return 0


def cmd_loss_check(args, config: ExperimentConfig) -> int:
    """Prefix losses of random linear-Gaussian systems against their exact likelihood."""
    rng = np.random.default_rng(_base_seed(args))
    samples = args.samples or config.kernel.property_samples
    rows, violations = [], []
    for index in range(args.systems):
        d = int(rng.integers(1, 5))
        steps = int(rng.integers(2, 11))
        system = LinearGaussianSystem.random(rng, d=d, n_y=2)
        _, x, y = system.sample(rng, steps)
        gen = GenerativeParams.from_linear_system(system)
        nll = kalman_exact(system, x, y).nll
        t = default_t_min(steps, config.kernel.t_min_fraction)
        exact = KalmanRecognition.exact(system, x)
        for label, rec in (("exact", exact), ("random", exact.interpolated(float(rng.uniform())))):
            noise = NoiseBundle.draw(rng, samples, steps, d)
            breakdown = lpvae_loss(gen, rec, x, y, t, noise)
            gap = breakdown.total - nll
            ok = gap >= -STANDARD_ERRORS * breakdown.total_stderr
            print(
                f"system {index} ({label}, d={d}, T={steps}, t={t}): "
                f"loss {breakdown.total:.4f} nll {nll:.4f} gap {gap:+.4f} "
                f"se {breakdown.total_stderr:.4f} {'ok' if ok else 'VIOLATED'}"
            )
            rows.append(
                {
                    "step": len(rows),
                    "encoder": breakdown.encoder_term,
                    "decoder": breakdown.decoder_term,
                    "prediction": breakdown.prediction_term,
                    "total": breakdown.total,
                }
            )
            if not ok:
                violations.append({"system": index, "recognition": label, "gap": gap})
    if args.trace:
        write_table(_out_dir(args) / "loss_check.csv", "loss_trace", rows)
    if violations:
        raise NumericalError(
            f"{len(violations)} losses fell below the exact negative log-likelihood",
            violations=violations,
        )
    return 0


def cmd_train_cem(args, config: ExperimentConfig) -> int:
    config = _apply_run_overrides(args, config)
    cem = config.cem if args.seed is None else replace(config.cem, seed=args.seed)
    if args.generations is not None:
        cem = replace(cem, generations=args.generations)
    features = _make_features(args.features, config, args.recognition)
    out_dir = _out_dir(args)
    policy, trace = train_cem(lambda: RequestEnv.from_config(config), features, cem, jobs=args.jobs)
    write_checkpoint(
        out_dir / "policy.ckpt",
        {"weights": policy.weights},
        {"kind": "policy", "features": features.name, "pool": config.kernel.pool},
    )
    write_table(out_dir / "cem_trace.csv", "cem_trace", trace)
    if trace:
        print(f"best return {trace[-1]['best_return']:.3f} after {len(trace)} generations")
    return 0


def cmd_train_kernel(args, config: ExperimentConfig) -> int:
    """Fit the sequence model on pooled grids from simulated episodes."""
    kernel = config.kernel
    env = RequestEnv.from_config(config)
    policy = make_policy(args.policy, config.policy)
    seed = _base_seed(args)
    seeds = [seed + i for i in range(args.episodes)]
    sequences = collect_sequences(env, policy, seeds, args.steps, kernel.pool)
    action = args.objective == "lpvae_action"
    dataset = [
        SequenceData(x=s.x, y=s.y, a=s.a if action else None, m=s.m if action else None)
        for s in sequences
    ]
    x_dim, y_dim = dataset[0].x.shape[1], dataset[0].y.shape[1]
    rng = np.random.default_rng(seed)
    gen = GenerativeParams.init(
        rng,
        kernel.latent_dim,
        x_dim,
        y_dim,
        action_dim=4 if action else 0,
        mask_dim=y_dim if action else 0,
        jump=args.objective == "tdvae",
        alpha_x=kernel.alpha_x,
        alpha_y=kernel.alpha_y,
        y_likelihood=kernel.y_likelihood,
        class_weights=kernel.class_weights,
    )
    rec = RecognitionParams.init(
        rng, kernel.latent_dim, x_dim, belief_dim=kernel.belief_dim, hidden_dim=kernel.hidden_dim
    )
    gen, rec, trace = train_toy(
        gen,
        rec,
        dataset,
        args.train_steps,
        args.step_size,
        seed,
        objective=args.objective,
        n_samples=kernel.n_samples,
        t_min_fraction=kernel.t_min_fraction,
        max_grad_norm=args.max_grad_norm,
    )
    out_dir = _out_dir(args)
    write_checkpoint(
        out_dir / "recognition.ckpt",
        rec.weights,
        {
            "kind": "recognition",
            "latent_dim": rec.latent_dim,
            "x_dim": rec.x_dim,
            "v_dim": rec.v_dim,
            "c_dim": rec.c_dim,
            "belief_dim": rec.belief_dim,
            "objective": args.objective,
        },
    )
    write_checkpoint(out_dir / "generative.ckpt", gen.weights, {"kind": "generative"})
    write_table(out_dir / "loss_trace.csv", "loss_trace", trace)
    return 0


def cmd_filter_dump(args, config: ExperimentConfig) -> int:
    env = RequestEnv.from_config(_apply_run_overrides(args, config))
    height, width = env.shape
    s = build_spatial_filter(env.params, height, width)
    path = _out_dir(args) / "spatial_filter.csv"
    path.write_text(heatmap_csv(s.values), encoding="utf-8")
    logger.info("Spatial filter %dx%d written to %s", height, width, path)
    print(path)
    return 0


# --- parser ---------------------------------------------------------------------


def _add_live_options(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--policies", nargs="+", choices=POLICY_NAMES, help="default: the configured policy name"
    )
    p.add_argument("--episodes", type=int, help="number of seeds counted from --seed")
    p.add_argument("--steps", type=int, help="steps per episode")
    p.add_argument("--checkpoint", help="policy checkpoint for the parametric policy")
    p.add_argument("--features", choices=FEATURE_EXTRACTORS)
    p.add_argument("--recognition", help="recognition checkpoint for belief features")


def _add_reward_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eta", type=float)
    p.add_argument("--k-min-cells", type=int)
    p.add_argument("--w-exp", type=float)
    p.add_argument("--age-gamma", type=float, help="memory discount per step")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopsim", description="Evidential-grid cooperative perception simulator"
    )
    parser.add_argument("--seed", type=int, help="base seed (default 0; train-cem: the cem section)")
    parser.add_argument("--config", help="JSON config file (default: $COOPSIM_CONFIG)")
    parser.add_argument("--out-dir", default="out")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run policies and dump episodes")
    _add_live_options(p)
    _add_reward_overrides(p)
    p.add_argument("--dump-grids", action="store_true", help="write grid files of the first seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="information-gain metrics from dumps or a live run")
    p.add_argument("--dumps", help="episode dump directory written by simulate")
    _add_live_options(p)
    _add_reward_overrides(p)
    p.add_argument("--normalization", choices=["pooled", "per_step"])
    p.add_argument("--bundle", action="store_true", help="also write a zip bundle")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fuse", help="fuse two grid files")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--output")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("loss-check", help="prefix-loss bound gaps on linear-Gaussian systems")
    p.add_argument("--systems", type=int, default=20)
    p.add_argument("--samples", type=int)
    p.add_argument("--trace", action="store_true", help="write loss_check.csv")
    p.set_defaults(func=cmd_loss_check)

    p = sub.add_parser("train-cem", help="train a parametric request policy")
    p.add_argument("--features", choices=FEATURE_EXTRACTORS, default="grid")
    p.add_argument("--recognition")
    p.add_argument("--generations", type=int)
    _add_reward_overrides(p)
    p.set_defaults(func=cmd_train_cem)

    p = sub.add_parser("train-kernel", help="train the sequence model on simulated grids")
    p.add_argument("--objective", choices=OBJECTIVES, default="lpvae")
    p.add_argument("--policy", choices=sorted(POLICIES), default="random")
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--train-steps", type=int, default=100)
    p.add_argument("--step-size", type=float, default=1e-3)
    p.add_argument("--max-grad-norm", type=float, default=10.0)
    p.set_defaults(func=cmd_train_kernel)

    p = sub.add_parser("filter-dump", help="write the spatial filter as a CSV heatmap")
    _add_reward_overrides(p)
    p.set_defaults(func=cmd_filter_dump)
    return parser


def _emit_error(code: str, message: str, context: dict) -> None:
    print(json.dumps({"code": code, "message": message, "context": context}), file=sys.stderr)


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except CoopSimError as e:
        logger.error("%s: %s", e.code, e.message)
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception("Unexpected failure")
        _emit_error("internal_error", str(e), {"type": type(e).__name__})
        return 1


if __name__ == "__main__":
    sys.exit(main())
