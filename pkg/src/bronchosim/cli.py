"""Command-line entry point: airway generation, dataset collection, the
three training stages, transfer, evaluation, ablation tables, replay
verification and the teleop server.

Every run accepts --seed and --config (JSON overrides, keyed by section:
reward/env/camera/robot/perception/fusion/ppo/tree/eval) and writes a
run manifest with input content hashes into --out for reproducibility.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import sys
from pathlib import Path

import numpy as np

from . import ndiff as nd
from .airway import AirwayTree, TreeConfig, generate_tree
from .broncho_env import BronchoEnv, EnvConfig, RewardConfig
from .fusion import FUSION_MODES, FusionConfig, load_stage2, save_stage2, train_stage2
from .harness import (
    AgentPolicy,
    CenterlineGreedyPolicy,
    EvalSettings,
    RandomPolicy,
    ablation_to_csv,
    ablation_to_text,
    collect_scripted,
    evaluate,
    format_report_text,
    report_to_json,
    run_ablation,
    write_run_manifest,
)
from .lumen_render import CameraConfig
from .perception import PerceptionConfig, Stage1Dataset, load_stage1, save_stage1, train_stage1
from .ppo_agent import PPOAgent, PPOConfig, train_stage3, transfer_train, write_curve_csv
from . import trajectory


def _load_overrides(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _cfg(cls, overrides: dict, section: str, **extra):
    kwargs = dict(overrides.get(section, {}))
    kwargs.update({k: v for k, v in extra.items() if v is not None})
    if cls is PerceptionConfig and "conv_channels" in kwargs:
        kwargs["conv_channels"] = tuple(kwargs["conv_channels"])
    return cls(**kwargs)


def _asdict(obj) -> dict:
    d = dataclasses.asdict(obj)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _parse_target(text: str) -> list[float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("target must be x,y,z")
    return parts


def _log(msg: str) -> None:
    print(msg, flush=True)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands -----------------------------------------------------------------

def cmd_gen_airway(args) -> int:
    overrides = _load_overrides(args.config)
    cfg = _cfg(TreeConfig, overrides, "tree",
               generations=args.generations, preset=args.preset)
    tree = generate_tree(args.seed, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tree.save(out)
    write_run_manifest(out.parent, "gen-airway", {"tree": _asdict(cfg)},
                       inputs={}, outputs=[str(out)], seed=args.seed)
    _log(f"wrote {out} ({len(tree.segments)} segments, "
         f"max generation {tree.max_generation()})")
    return 0


def cmd_collect(args) -> int:
    overrides = _load_overrides(args.config)
    tree = AirwayTree.load(args.tree)
    camera = _cfg(CameraConfig, overrides, "camera",
                  width=args.resolution, height=args.resolution)
    reward = _cfg(RewardConfig, overrides, "reward")
    env_cfg = _cfg(EnvConfig, overrides, "env")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = collect_scripted(tree, steps=args.steps, noise=args.noise,
                                seed=args.seed, out_path=out, camera=camera,
                                reward=reward, env_cfg=env_cfg,
                                max_generation=args.max_generation,
                                tree_path=str(args.tree),
                                log=_log if args.verbose else None)
    write_run_manifest(out.parent, "collect",
                       {"steps": args.steps, "noise": args.noise,
                        "camera": _asdict(camera)},
                       inputs={"tree": args.tree},
                       outputs=[str(out)], seed=args.seed)
    _log(f"collected {manifest['steps']} steps over {manifest['episodes']} episodes -> {out}")
    return 0


def _expand_data(patterns) -> list[str]:
    paths: list[str] = []
    for pat in patterns:
        hits = sorted(glob.glob(pat))
        paths.extend(hits if hits else [pat])
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"dataset files not found: {missing}")
    return paths


def cmd_train_stage1(args) -> int:
    overrides = _load_overrides(args.config)
    cfg = _cfg(PerceptionConfig, overrides, "perception", resolution=args.resolution)
    paths = _expand_data(args.data)
    dataset = Stage1Dataset.from_files(paths, cfg.resolution)
    store, curves = train_stage1(dataset, epochs=args.epochs, cfg=cfg,
                                 seed=args.seed, log=_log)
    out = _out_dir(args)
    ckpt = out / "stage1.ckpt"
    save_stage1(store, cfg, ckpt)
    _write_loss_csv(out / "stage1_losses.csv", curves)
    write_run_manifest(out, "train-stage1",
                       {"perception": _asdict(cfg), "epochs": args.epochs},
                       inputs={p: p for p in paths},
                       outputs=[str(ckpt)], seed=args.seed)
    _log(f"stage1 done: visual {curves['visual'][-1]:.5f} "
         f"proprio {curves['proprio'][-1]:.5f} -> {ckpt}")
    return 0


def cmd_train_stage2(args) -> int:
    overrides = _load_overrides(args.config)
    store, stage1_cfg, visual, proprio, _ = load_stage1(args.stage1)
    fcfg = _cfg(FusionConfig, overrides, "fusion", mode=args.mode)
    paths = _expand_data(args.data)
    dataset = Stage1Dataset.from_files(paths, stage1_cfg.resolution)
    combined, curves = train_stage2(store, stage1_cfg, dataset,
                                    epochs=args.epochs, cfg=fcfg,
                                    seed=args.seed, log=_log)
    out = _out_dir(args)
    ckpt = out / "stage2.ckpt"
    save_stage2(combined, stage1_cfg, fcfg, ckpt)
    _write_loss_csv(out / "stage2_losses.csv", curves)
    write_run_manifest(out, "train-stage2",
                       {"fusion": _asdict(fcfg), "epochs": args.epochs},
                       inputs={"stage1": args.stage1, **{p: p for p in paths}},
                       outputs=[str(ckpt)], seed=args.seed)
    _log(f"stage2 done: combined {curves['combined'][-1]:.5f} -> {ckpt}")
    return 0


def _env_factory_from(args, overrides, tree):
    camera = _cfg(CameraConfig, overrides, "camera",
                  width=args.resolution, height=args.resolution)
    reward = _cfg(RewardConfig, overrides, "reward")
    env_cfg = _cfg(EnvConfig, overrides, "env")
    from .lumen_render import LumenRenderer
    renderer = LumenRenderer(tree, camera)

    def factory(i):
        return BronchoEnv(tree, args.target, reward=reward,
                          env=EnvConfig(**{**dataclasses.asdict(env_cfg), "mode": "train"}),
                          renderer=renderer)

    return factory, camera, reward, env_cfg, renderer


def cmd_train_stage3(args) -> int:
    overrides = _load_overrides(args.config)
    tree = AirwayTree.load(args.tree)
    ppo = _cfg(PPOConfig, overrides, "ppo", max_episodes=args.episodes)
    factory, camera, reward, env_cfg, _ = _env_factory_from(args, overrides, tree)
    out = _out_dir(args)
    agent, curve = train_stage3(factory, args.stage2, ppo_cfg=ppo,
                                seed=args.seed, out_dir=out, log=_log)
    write_run_manifest(out, "train-stage3",
                       {"ppo": _asdict(ppo), "camera": _asdict(camera),
                        "reward": _asdict(reward), "target": args.target},
                       inputs={"stage2": args.stage2, "tree": args.tree},
                       outputs=[str(out / "policy.ckpt"), str(out / "curve.csv")],
                       seed=args.seed)
    sr = np.mean([row["success"] for row in curve[-20:]]) if curve else 0.0
    _log(f"stage3 done: {len(curve)} episodes, trailing SR {sr:.2f} -> {out / 'policy.ckpt'}")
    return 0


def cmd_transfer(args) -> int:
    overrides = _load_overrides(args.config)
    tree = AirwayTree.load(args.tree)
    ppo = _cfg(PPOConfig, overrides, "ppo", max_episodes=args.episodes)
    factory, camera, reward, env_cfg, _ = _env_factory_from(args, overrides, tree)
    out = _out_dir(args)
    agent, curve = transfer_train(factory, args.policy, ppo_cfg=ppo,
                                  seed=args.seed, warm_start=not args.no_warm_start,
                                  out_dir=out, log=_log)
    write_run_manifest(out, "transfer",
                       {"ppo": _asdict(ppo), "target": args.target,
                        "warm_start": not args.no_warm_start},
                       inputs={"policy": args.policy, "tree": args.tree},
                       outputs=[str(out / "policy.ckpt"), str(out / "curve.csv")],
                       seed=args.seed)
    _log(f"transfer done: {len(curve)} episodes -> {out / 'policy.ckpt'}")
    return 0


def _make_policy(spec: str, seed: int):
    if spec == "random":
        return RandomPolicy(seed=seed)
    if spec in ("centerline-greedy", "centerline_greedy"):
        return CenterlineGreedyPolicy(seed=seed)
    agent = PPOAgent.load(spec, seed=seed)
    return AgentPolicy(agent, greedy=True, name=Path(spec).stem)


def cmd_evaluate(args) -> int:
    overrides = _load_overrides(args.config)
    tree = AirwayTree.load(args.tree)
    camera = _cfg(CameraConfig, overrides, "camera",
                  width=args.resolution, height=args.resolution)
    reward = _cfg(RewardConfig, overrides, "reward")
    env_cfg = _cfg(EnvConfig, overrides, "env")
    settings = _cfg(EvalSettings, overrides, "eval",
                    episodes=args.episodes, seed=args.seed,
                    save_paths=args.save_paths or None)
    policy = _make_policy(args.policy, args.seed)
    report = evaluate(policy, tree, args.target, settings=settings,
                      reward=reward, camera=camera, env_cfg=env_cfg,
                      log=_log if args.verbose else None)
    out = _out_dir(args)
    (out / "report.json").write_text(report_to_json(report))
    (out / "report.txt").write_text(format_report_text(report))
    if args.save_paths:
        paths = {f"target_{i}": t.get("paths", []) for i, t in enumerate(report["targets"])}
        (out / "tip_paths.json").write_text(json.dumps(paths, sort_keys=True))
    inputs = {"tree": args.tree}
    if Path(args.policy).exists():
        inputs["policy"] = args.policy
    write_run_manifest(out, "evaluate",
                       {"eval": _asdict(settings), "camera": _asdict(camera),
                        "targets": args.target},
                       inputs=inputs,
                       outputs=[str(out / "report.json"), str(out / "report.txt")],
                       seed=args.seed)
    print(format_report_text(report), end="")
    return 0


def cmd_ablation(args) -> int:
    overrides = _load_overrides(args.config)
    tree = AirwayTree.load(args.tree)
    camera = _cfg(CameraConfig, overrides, "camera",
                  width=args.resolution, height=args.resolution)
    settings = _cfg(EvalSettings, overrides, "eval",
                    episodes=args.episodes, seed=args.seed)
    reports = {}
    inputs = {"tree": args.tree}
    for pair in args.ckpt:
        mode, _, path = pair.partition("=")
        if mode not in FUSION_MODES:
            raise SystemExit(f"unknown fusion mode {mode!r}; choose from {FUSION_MODES}")
        if not path or not Path(path).exists():
            reports[mode] = None
            continue
        inputs[mode] = path
        policy = _make_policy(path, args.seed)
        reports[mode] = evaluate(policy, tree, args.target, settings=settings,
                                 camera=camera)
    table = run_ablation(reports)
    out = _out_dir(args)
    (out / "ablation.csv").write_text(ablation_to_csv(table))
    (out / "ablation.txt").write_text(ablation_to_text(table))
    write_run_manifest(out, "ablation",
                       {"eval": _asdict(settings), "targets": args.target},
                       inputs=inputs,
                       outputs=[str(out / "ablation.csv"), str(out / "ablation.txt")],
                       seed=args.seed)
    print(ablation_to_text(table), end="")
    return 0


def cmd_replay(args) -> int:
    overrides = _load_overrides(args.config)
    tree = AirwayTree.load(args.tree)
    records = trajectory.load_records(args.data)
    trajectory.validate_schema(records)
    data_path = Path(args.data)
    mpath = data_path.with_name(data_path.stem + ".manifest.json")
    manifest = json.loads(mpath.read_text()) if mpath.exists() else None
    reward = _cfg(RewardConfig, overrides, "reward") if "reward" in overrides else None
    env_cfg = _cfg(EnvConfig, overrides, "env") if "env" in overrides else None
    renderer = None
    if "camera" in overrides:
        from .lumen_render import LumenRenderer
        renderer = LumenRenderer(tree, _cfg(CameraConfig, overrides, "camera"))
    ok = trajectory.replay_dataset(records, tree, renderer=renderer,
                                   reward=reward, env_cfg=env_cfg,
                                   manifest=manifest)
    n_eps = len(trajectory.group_episodes(records))
    if ok:
        _log(f"replay OK: {n_eps} episodes, {len(records)} records reproduced bit-identically")
        return 0
    _log("replay MISMATCH: recorded observations were not reproduced")
    return 1


def cmd_teleop_serve(args) -> int:
    overrides = _load_overrides(args.config)
    tree = AirwayTree.load(args.tree)
    camera = _cfg(CameraConfig, overrides, "camera",
                  width=args.resolution, height=args.resolution)
    reward = _cfg(RewardConfig, overrides, "reward")
    env_cfg = _cfg(EnvConfig, overrides, "env")
    target = args.target
    if target is None:
        deepest = max(tree.segments.values(), key=lambda s: s.generation)
        target = [float(x) for x in deepest.points[-2]]
    from .teleop_bridge import serve
    _log(f"teleop server on ws://{args.host}:{args.port}/teleop "
         f"(target {','.join(f'{x:.1f}' for x in target)})")
    serve(tree, target, port=args.port, host=args.host, camera=camera,
          record_dir=args.record, static_dir=args.static,
          reward=reward, env_cfg=env_cfg)
    return 0


def _write_loss_csv(path: Path, curves: dict) -> None:
    keys = sorted(curves)
    with open(path, "w") as fh:
        fh.write("epoch," + ",".join(keys) + "\n")
        for i in range(len(curves[keys[0]])):
            fh.write(f"{i}," + ",".join(f"{curves[k][i]:.8f}" for k in keys) + "\n")


# --- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bronchosim",
                                description="Airway navigation simulator and "
                                            "staged multimodal RL trainer")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default=None):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON config override file")
        if out_default is not None:
            sp.add_argument("--out", default=out_default)
        sp.add_argument("--verbose", action="store_true")

    sp = sub.add_parser("gen-airway", help="generate a procedural airway tree")
    sp.add_argument("--generations", type=int, default=4)
    sp.add_argument("--preset", choices=["upper-lobe"], default=None)
    sp.add_argument("--out", default="tree.json")
    common(sp)
    sp.set_defaults(func=cmd_gen_airway)

    sp = sub.add_parser("collect", help="scripted exploration dataset")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--noise", type=float, default=0.15)
    sp.add_argument("--max-generation", type=int, default=None)
    sp.add_argument("--resolution", type=int, default=None)
    sp.add_argument("--out", default="runs/dataset.jsonl")
    common(sp)
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("train-stage1", help="reconstruction pretraining")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--resolution", type=int, default=None)
    common(sp, out_default="runs/stage1")
    sp.set_defaults(func=cmd_train_stage1)

    sp = sub.add_parser("train-stage2", help="cross-attention fusion training")
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--mode", choices=list(FUSION_MODES), default=None)
    sp.add_argument("--epochs", type=int, default=50)
    common(sp, out_default="runs/stage2")
    sp.set_defaults(func=cmd_train_stage2)

    sp = sub.add_parser("train-stage3", help="PPO policy training")
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--tree", required=True)
    sp.add_argument("--target", type=_parse_target, required=True)
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--resolution", type=int, default=None)
    common(sp, out_default="runs/stage3")
    sp.set_defaults(func=cmd_train_stage3)

    sp = sub.add_parser("transfer", help="retrain the RL module on a new tree "
                                         "with representations frozen")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--tree", required=True)
    sp.add_argument("--target", type=_parse_target, required=True)
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--resolution", type=int, default=None)
    sp.add_argument("--no-warm-start", action="store_true")
    common(sp, out_default="runs/transfer")
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("evaluate", help="run evaluation episodes")
    sp.add_argument("--policy", required=True,
                    help="checkpoint path, 'random', or 'centerline-greedy'")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--target", type=_parse_target, action="append", required=True)
    sp.add_argument("--episodes", type=int, default=80)
    sp.add_argument("--resolution", type=int, default=None)
    sp.add_argument("--save-paths", action="store_true")
    common(sp, out_default="runs/eval")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablation", help="fusion-mode comparison table")
    sp.add_argument("--ckpt", action="append", required=True,
                    metavar="MODE=PATH")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--target", type=_parse_target, action="append", required=True)
    sp.add_argument("--episodes", type=int, default=50)
    sp.add_argument("--resolution", type=int, default=None)
    common(sp, out_default="runs/ablation")
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("replay", help="verify a dataset replays bit-identically")
    sp.add_argument("--data", required=True)
    sp.add_argument("--tree", required=True)
    common(sp)
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("teleop-serve", help="interactive WebSocket teleoperation")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--target", type=_parse_target, default=None)
    sp.add_argument("--port", type=int, default=8701)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--record", default=None, help="directory for recordings")
    sp.add_argument("--static", default=None, help="frontend static dir to serve")
    sp.add_argument("--resolution", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_teleop_serve)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
