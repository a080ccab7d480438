"""Command line entry point: ``pfpn {train,sweep,eval,density,probe-variance}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .. import trainer
from ..envs import make_env
from . import artifacts as art
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, apply_overrides, config_from_dict, dump_config, load_config

log = logging.getLogger("pfpn")

DEFAULT_SWEEP_SEEDS = (0, 1, 2, 3, 4)


def _out_root() -> Path:
    return Path(os.environ.get("PFPN_OUT_DIR", "runs"))


def resolve_out_dir(cfg: ExperimentConfig, config_path, out=None) -> Path:
    if out:
        return Path(out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return _out_root() / f"{Path(config_path).stem}-seed{cfg.seed}"


def _load(config_path, seed=None, overrides=(), workers=None) -> ExperimentConfig:
    extra = list(overrides or ())
    if seed is not None:
        extra.append(f"seed={int(seed)}")
    if workers is not None:
        extra.append(f"workers={int(workers)}")
    return load_config(config_path, extra)


def cmd_train(config_path, seed=None, out=None, overrides=(), workers=None) -> Path:
    cfg = _load(config_path, seed, overrides, workers)
    run_dir = resolve_out_dir(cfg, config_path, out)
    run_dir.mkdir(parents=True, exist_ok=True)
    trainer.train(cfg, run_dir)
    return run_dir


def cmd_sweep(config_path, seeds=DEFAULT_SWEEP_SEEDS, out=None, overrides=(), workers=None) -> list[Path]:
    root = Path(out) if out else _out_root() / Path(config_path).stem
    dirs = []
    for seed in seeds:
        dirs.append(cmd_train(config_path, seed=seed, out=root / f"seed_{seed}", overrides=overrides, workers=workers))
    return dirs


def _config_for_checkpoint(checkpoint, config_path=None) -> ExperimentConfig:
    if config_path is not None:
        return load_config(config_path)
    for candidate in (Path(checkpoint).parent / "config.json", Path(checkpoint).parent.parent / "config.json"):
        if candidate.exists():
            return load_config(candidate)
    raise FileNotFoundError(f"no config.json next to {checkpoint}; pass --config")


def cmd_eval(checkpoint, episodes=10, config_path=None, out=None) -> dict:
    """Deterministic-action rollouts of a saved head. Writes one CSV row per episode."""
    head, _ = load_checkpoint(checkpoint)
    cfg = _config_for_checkpoint(checkpoint, config_path)
    env_params = {"dims": cfg.env.dims, "horizon": cfg.env.horizon, "reset_noise": cfg.env.reset_noise}

    def factory(i):
        return make_env(cfg.env.name, seed=10_000 + cfg.seed + i, **env_params)

    returns, lengths, infos = trainer.evaluate_policy(head, factory, episodes)
    out_path = Path(out) if out else Path(checkpoint).with_suffix(".eval.csv")
    art.write_csv(out_path, art.EVAL_COLUMNS,
                  ({"episode": i, "return": float(r), "length": int(n)} for i, (r, n) in enumerate(zip(returns, lengths))))
    return {"mean": float(returns.mean()), "std": float(returns.std()), "returns": returns,
            "infos": infos, "path": out_path}


DENSITY_BINS = 200


def density_histogram(actions, bins=DENSITY_BINS):
    """Normalized histogram of environment actions (clamped to [-1, 1])."""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(actions, -1.0, 1.0), bins=edges)
    width = edges[1] - edges[0]
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, counts / (len(actions) * width)


def cmd_density(checkpoint, samples=100_000, seed=0, out=None) -> list[Path]:
    """Histogram stochastic action samples; one file per action dimension for multi-d heads."""
    head, _ = load_checkpoint(checkpoint)
    rng = np.random.default_rng(seed)
    states = np.zeros((samples, head.obs_dim))
    actions = np.atleast_2d(head.sample(states, rng).action)
    base = Path(out) if out else Path(checkpoint).with_suffix(".density.csv")
    paths = []
    for k in range(head.act_dim):
        path = base if head.act_dim == 1 else base.with_name(f"{base.stem}_dim{k}{base.suffix}")
        centers, dens = density_histogram(actions[:, k])
        art.write_csv(path, art.DENSITY_COLUMNS,
                      ({"bin_center": float(c), "density": float(d)} for c, d in zip(centers, dens)))
        paths.append(path)
    return paths


def cmd_probe_variance(n_list=(1, 5, 10, 35, 100), samples=100_000, seed=0, out=None):
    report = trainer.variance_probe(n_list, samples, np.random.default_rng(seed), seed=seed)
    out_path = Path(out) if out else _out_root() / "variance_probe.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    art.write_csv(out_path, art.VARIANCE_COLUMNS, report.rows())
    return report, out_path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfpn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", required=True)
        p.add_argument("--out")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--workers", type=int)

    p = sub.add_parser("train", help="train one run")
    run_flags(p)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sweep", help="train one run per seed")
    run_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SWEEP_SEEDS))

    p = sub.add_parser("eval", help="deterministic evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--config")
    p.add_argument("--out")

    p = sub.add_parser("density", help="histogram of stochastic action samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("probe-variance", help="policy-gradient variance vs number of particles")
    p.add_argument("--n", type=int, nargs="+", default=[1, 5, 10, 35, 100])
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            run_dir = cmd_train(args.config, args.seed, args.out, args.override, args.workers)
            print(run_dir)
        elif args.command == "sweep":
            for d in cmd_sweep(args.config, args.seeds, args.out, args.override, args.workers):
                print(d)
        elif args.command == "eval":
            summary = cmd_eval(args.checkpoint, args.episodes, args.config, args.out)
            for i, r in enumerate(summary["returns"]):
                print(f"episode {i}: {r:.6f}")
            print(f"mean {summary['mean']:.6f} std {summary['std']:.6f}")
        elif args.command == "density":
            for path in cmd_density(args.checkpoint, args.samples, args.seed, args.out):
                print(path)
        elif args.command == "probe-variance":
            report, path = cmd_probe_variance(args.n, args.samples, args.seed, args.out)
            for row in report.rows():
                print(f"n={row['n']:>4}  variance={row['variance']:.6f}  discrete={row['discrete_variance']:.6f}")
            print(path)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (trainer.TrainingError, trainer.RolloutError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
