"""Command-line entry point: ``pickladder <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading
from dataclasses import replace
from pathlib import Path

from .config import EnvConfig
from .placement import LADDER, Phase, Regime, make_pairing_split

log = logging.getLogger("pickladder")


def _env_config(args) -> EnvConfig:
    cfg = EnvConfig.load(args.config) if getattr(args, "config", None) else EnvConfig()
    if getattr(args, "objects", None):
        cfg = cfg.first_objects(args.objects)
    return cfg


def _scenario(args):
    from .rollout import Scenario

    cfg = _env_config(args)
    regime = Regime.parse(args.regime)
    if getattr(args, "split_seed", None) is not None or getattr(args, "phase", None):
        phase = Phase.EVAL if args.phase == "eval" else Phase.TRAIN
        return Scenario(cfg, regime, make_pairing_split(args.split_seed), phase)
    return Scenario(cfg, regime)


def _expert(spec: str, config: EnvConfig):
    from .policies import make_scripted

    if spec.startswith("ppo:"):
        from .ppo import load_expert

        return load_expert(spec[4:], config)
    if spec.startswith("bc:"):
        from .imitation import load_bc

        return load_bc(spec[3:], config)
    return make_scripted(spec, config)


def _add_scene(p, regime_default="small"):
    p.add_argument("--regime", default=regime_default, help="small | medium | large | full")
    p.add_argument("--objects", type=int, default=None, help="use the first N objects (default all five)")
    p.add_argument("--split-seed", type=int, default=None, help="compositional pairing split (enables split mode)")
    p.add_argument("--phase", choices=("train", "eval"), default=None, help="compositional phase")


def cmd_gen_data(args) -> int:
    from .recorder import EpisodeServer, client_record, record_in_process

    sc = _scenario(args)
    expert = _expert(args.expert, sc.config)
    if args.via == "inprocess" or args.count == 0:
        n = record_in_process(expert, sc, args.out, args.count, base_seed=args.seed)
    else:
        server = EpisodeServer(expert, sc, ("127.0.0.1", 0), budget=10**9, base_seed=args.seed)
        t = threading.Thread(target=server.serve, daemon=True)
        t.start()
        n = client_record(server.address, args.out, args.count, sc)
        t.join(timeout=5)
    print(f"{args.out}: {n} episodes")
    return 0


def cmd_train_rl(args) -> int:
    from .ppo import PPOConfig, save_expert, train

    sc = _scenario(args)
    cfg = PPOConfig(total_timesteps=args.timesteps, num_envs=args.envs, seed=args.seed, eval_every=args.eval_every)
    result = train(cfg, sc, progress=lambda row: print(json.dumps(row), flush=True))
    save_expert(args.out, result, cfg, sc)
    print(f"{args.out}: final success {result.final_success():.3f}")
    return 0


def _bc_config(args):
    from .imitation import BCConfig

    return BCConfig(
        chunk_size=args.chunk,
        execution_horizon=args.horizon,
        batch_size=args.batch,
        learning_rate=args.lr,
        epochs=args.epochs,
        obs_mode=args.mode,
        seed=args.seed,
    )


def cmd_train_bc(args) -> int:
    from .dataset import load_meta, read_dataset
    from .imitation import bc_train, build_training_set, save_bc

    meta = load_meta(args.data)
    config = EnvConfig().with_objects(meta.objects)
    records = read_dataset(args.data, subset=args.subset, config=config)
    cfg = _bc_config(args)
    result = bc_train(cfg, build_training_set(records, cfg, config), config)
    save_bc(args.out, result, config, {"dataset": str(args.data), "demos": len(records)})
    print(f"{args.out}: final loss {result.losses[-1] if result.losses else float('nan'):.6f}")
    return 0


def cmd_grid_search(args) -> int:
    from .dataset import load_meta, read_dataset
    from .imitation import default_grid, grid_csv, grid_search
    from .rollout import Scenario

    meta = load_meta(args.data)
    config = EnvConfig().with_objects(meta.objects)
    records = read_dataset(args.data, subset=args.subset, config=config)
    scenario = Scenario.from_dict(records[0].episode.scenario) if records else Scenario(config, Regime.parse(meta.regime))
    if args.phase:
        scenario = scenario.with_phase(Phase.EVAL if args.phase == "eval" else Phase.TRAIN)
    best, rows = grid_search(default_grid(_bc_config(args)), records, scenario, args.episodes)
    text = grid_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    print(f"best: chunk {best.chunk_size}, horizon {best.execution_horizon}")
    return 0


def cmd_eval(args) -> int:
    from .experiments import ExperimentConfig, run_experiment

    if args.manifest:
        cfg = ExperimentConfig.from_manifest(args.manifest, out=args.out)
    else:
        out_root = os.environ.get("PICKLADDER_OUT", "runs")
        cfg = ExperimentConfig(experiment=args.experiment, out=args.out or f"{out_root}/{args.experiment}")
        if args.regimes:
            cfg.regimes = args.regimes.split(",")
        elif args.experiment == "compositional":
            cfg.regimes = ["small"]
        elif args.experiment == "scale":
            cfg.regimes = ["medium", "large", "full"]
        elif args.experiment == "object-count":
            cfg.regimes = ["full"]
        if args.policies:
            cfg.policies = args.policies.split(",")
        elif args.experiment == "compositional":
            cfg.policies = ["shortcut"]
        elif args.experiment == "scale":
            cfg.policies = ["bc-blind"]
        elif args.experiment == "object-count":
            cfg.policies = ["nearest"]
        if args.counts:
            cfg.counts = [int(c) for c in args.counts.split(",")]
        if args.sizes:
            small, large = (int(s) for s in args.sizes.split(","))
            cfg.sizes = {r: [small, large] for r in cfg.regimes}
        cfg.eval_episodes = args.episodes
        cfg.demos = args.demos
        cfg.seed = args.seed
        cfg.split_seed = args.split_seed
        cfg.auto_data = not args.no_auto_data
        cfg.bc = replace(cfg.bc_config, epochs=args.bc_epochs).to_dict()
        if args.config:
            cfg.env = EnvConfig.load(args.config).to_dict()
    result = run_experiment(cfg, check=args.self_check)
    print(result.report_text, end="")
    print(f"outputs in {result.out_dir}")
    if result.violations:
        for v in result.violations:
            print(f"VIOLATION: {v}", file=sys.stderr)
        return 1
    return 0


def cmd_serve(args) -> int:
    from .recorder import EpisodeServer, parse_address

    sc = _scenario(args)
    server = EpisodeServer(_expert(args.expert, sc.config), sc, parse_address(args.listen), args.budget, args.seed)
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    served = server.serve()
    print(f"served {served} episodes")
    return 0


def cmd_record(args) -> int:
    from .recorder import client_record, parse_address

    sc = _scenario(args)
    n = client_record(parse_address(args.connect), args.out, args.count, sc)
    print(f"{args.out}: {n} episodes")
    return 0


def cmd_report(args) -> int:
    if args.what == "figures":
        from .plots import scatter_export

        config = _env_config(args)
        regimes = [Regime.parse(r) for r in args.regime.split(",")] if args.regime else list(LADDER)
        for r in regimes:
            for p in scatter_export(config, r, args.n, args.seed, args.out):
                print(p)
        return 0
    from .metrics import aggregate, format_table, read_outcomes

    outcomes = []
    for p in args.outcomes:
        outcomes += read_outcomes(p)
    print(format_table(aggregate(outcomes, args.group_by.split(","))), end="")
    return 0


def cmd_dataset(args) -> int:
    from .dataset import dataset_stats, format_stats

    stats = dataset_stats(args.path)
    print(json.dumps(stats, indent=2) if args.json else format_stats(stats), end="\n" if args.json else "")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pickladder", description="tabletop grasping benchmark harness")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="record a success-filtered demonstration dataset")
    _add_scene(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--expert", default="oracle", help="oracle | ppo:PATH")
    p.add_argument("--via", choices=("inprocess", "network"), default="inprocess")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="env config JSON")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-rl", help="train a state-based PPO expert")
    _add_scene(p)
    p.add_argument("--timesteps", type=int, default=2_000_000)
    p.add_argument("--envs", type=int, default=64)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="env config JSON")
    p.set_defaults(func=cmd_train_rl)

    for name, func, help_text in (
        ("train-bc", cmd_train_bc, "train a behavior-cloning policy on a dataset"),
        ("grid-search", cmd_grid_search, "sweep chunk size and execution horizon"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data", required=True)
        p.add_argument("--subset", type=int, default=None, help="use the first N episodes")
        p.add_argument("--mode", choices=("identity_blind", "grounded"), default="identity_blind")
        p.add_argument("--chunk", type=int, default=16)
        p.add_argument("--horizon", type=int, default=4)
        p.add_argument("--batch", type=int, default=128)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--epochs", type=int, default=10)
        p.add_argument("--seed", type=int, default=0)
        if name == "train-bc":
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--episodes", type=int, default=100)
            p.add_argument("--phase", choices=("train", "eval"), default=None)
            p.add_argument("--out", default=None, help="CSV report path")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="run an experiment and write reports")
    p.add_argument("--experiment", choices=("ladder", "compositional", "scale", "object-count"), default="ladder")
    p.add_argument("--regimes", help="comma-separated regimes")
    p.add_argument("--policies", help="comma-separated: oracle, shortcut, nearest, random, bc-blind, bc-grounded, bc:PATH, ppo:PATH")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--demos", type=int, default=1000)
    p.add_argument("--sizes", help="two dataset sizes for the scale experiment, e.g. 100,500")
    p.add_argument("--counts", help="object counts for the object-count experiment")
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--bc-epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=1_000_003)
    p.add_argument("--out", default=None)
    p.add_argument("--config", help="env config JSON")
    p.add_argument("--manifest", help="re-run from a previous manifest.json")
    p.add_argument("--no-auto-data", action="store_true", help="fail instead of recording missing datasets")
    p.add_argument("--self-check", action="store_true", help="exit nonzero on any invariant violation")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="stream expert episodes to a recording client")
    _add_scene(p)
    p.add_argument("--listen", default="127.0.0.1:5555")
    p.add_argument("--expert", default="oracle")
    p.add_argument("--budget", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="env config JSON")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("record", help="connect to a server and store successful episodes")
    _add_scene(p)
    p.add_argument("--connect", default="127.0.0.1:5555")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--config", help="env config JSON")
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("report", help="figures or tables from stored results")
    p.add_argument("what", choices=("figures", "table"))
    p.add_argument("outcomes", nargs="*", help="outcome logs (table)")
    p.add_argument("--group-by", default="regime,policy")
    p.add_argument("--regime", default=None, help="comma-separated regimes (figures)")
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="figures")
    p.add_argument("--config", help="env config JSON")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    q = dsub.add_parser("stats", help="episode/frame counts and per-regime breakdown")
    q.add_argument("path")
    q.add_argument("--json", action="store_true")
    q.set_defaults(func=cmd_dataset)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, ConnectionError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
