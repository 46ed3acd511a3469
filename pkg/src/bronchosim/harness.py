"""Evaluation campaigns, scripted baselines, dataset collection, run manifests.

Evaluation runs N episodes per target in evaluation mode (500-action
failure cap), seeded so reports are byte-identical across repeats. NA/TL
(and force) statistics are computed over successful episodes only and
reported as '-' when the success rate is below the reporting threshold,
mirroring the convention of leaving low-SR cells blank.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .airway import AirwayTree
from .broncho_env import BronchoEnv, EnvConfig, RewardConfig
from .lumen_render import CameraConfig, LumenRenderer
from .robot import ACTIONS, Action, RobotParams
from . import trajectory
from .trajectory import TrajectoryWriter, write_manifest


# --- policies -------------------------------------------------------------------

class RandomPolicy:
    """Uniform over the 12 actions; fresh sub-rng per episode seed."""

    name = "random"

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)

    def start_episode(self, env: BronchoEnv, env_idx: int, seed: int) -> None:
        self._rng = np.random.default_rng(seed ^ 0x5EED)

    def act(self, obs, env: BronchoEnv, env_idx: int = 0) -> int:
        return int(self._rng.integers(len(ACTIONS)))


class CenterlineGreedyPolicy:
    """Scripted baseline: steer the endoscope frame toward a lookahead point
    on the reference path, advance when roughly aligned. Privileged (reads
    the env's path); optional action noise for exploration datasets."""

    name = "centerline_greedy"

    _BENDS = (Action.E_LEFT, Action.E_RIGHT, Action.E_IN, Action.E_OUT)

    def __init__(self, lookahead: float = 9.0, align_tol: float = 0.12,
                 noise: float = 0.0, seed: int = 0):
        self.lookahead = lookahead
        self.align_tol = align_tol
        self.noise = noise
        self._rng = np.random.default_rng(seed)

    def start_episode(self, env: BronchoEnv, env_idx: int, seed: int) -> None:
        self._rng = np.random.default_rng(seed ^ 0xA11C)

    def act(self, obs, env: BronchoEnv, env_idx: int = 0) -> int:
        if self.noise > 0 and self._rng.random() < self.noise:
            return int(self._rng.integers(len(ACTIONS)))
        state = env.state
        tip = state.tip
        poly = env.path.polyline
        seg = np.diff(poly, axis=0)
        ln2 = np.maximum((seg * seg).sum(axis=1), 1e-18)
        rel = tip[None, :] - poly[:-1]
        t = np.clip(np.einsum("ij,ij->i", rel, seg) / ln2, 0.0, 1.0)
        closest = poly[:-1] + t[:, None] * seg
        i = int(np.argmin(np.linalg.norm(tip[None, :] - closest, axis=1)))
        arcs = np.concatenate([[0], np.cumsum(np.sqrt(ln2))])
        s_here = arcs[i] + t[i] * np.sqrt(ln2[i])
        s_look = min(s_here + self.lookahead, arcs[-1])
        j = int(np.searchsorted(arcs, s_look, side="right")) - 1
        j = min(max(j, 0), len(seg) - 1)
        frac = (s_look - arcs[j]) / max(arcs[j + 1] - arcs[j], 1e-12)
        look = poly[j] + frac * seg[j]
        desired = look - tip
        n = np.linalg.norm(desired)
        if n < 1e-9:
            desired = env.path.target - tip
            n = np.linalg.norm(desired)
        desired = desired / max(n, 1e-12)

        heading = state.scope_dir
        if _angle(heading, desired) <= self.align_tol:
            return Action.E_FORWARD.index
        best, best_angle = None, np.inf
        from .robot import _local_rotation  # candidate one-step bends
        for a in self._BENDS:
            sign = 1.0 if a.verb in ("LEFT", "IN") else -1.0
            axis = 1 if a.verb in ("LEFT", "RIGHT") else 0
            cand = (state.scope_frame @ _local_rotation(axis, sign * env.robot_params.bend_rad))[:, 2]
            ang = _angle(cand, desired)
            if ang < best_angle:
                best, best_angle = a, ang
        if best_angle >= _angle(heading, desired):
            return Action.E_FORWARD.index
        return best.index


def _angle(a, b) -> float:
    c = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


class AgentPolicy:
    """Adapter: trained PPO agent -> evaluation policy interface."""

    def __init__(self, agent, greedy: bool = True, name: str = "agent"):
        self.agent = agent
        self.greedy = greedy
        self.name = name

    def start_episode(self, env: BronchoEnv, env_idx: int, seed: int) -> None:
        self.agent.invalidate_cache(env_idx)

    def act(self, obs, env: BronchoEnv, env_idx: int = 0) -> int:
        r_p, r_i = self.agent.observe(obs, env_idx)
        actions, _, _, _ = self.agent.act_batch(r_p[None], r_i[None], greedy=self.greedy)
        return int(actions[0])


# --- evaluation ---------------------------------------------------------------------

@dataclass
class EvalSettings:
    episodes: int = 80
    seed: int = 0
    min_success_rate: float = 0.5   # below this, NA/TL/F reported as '-'
    save_paths: bool = False


def run_episode(env: BronchoEnv, policy, seed: int, env_idx: int = 0,
                writer: TrajectoryWriter | None = None, episode_id: int = 0,
                max_steps: int | None = None) -> dict:
    res = env.reset(seed=seed)
    if hasattr(policy, "start_episode"):
        policy.start_episode(env, env_idx, seed)
    if writer:
        writer.write_reset(episode_id, res, seed, target=env.path.target)
    t = 0
    while not res.done:
        t += 1
        action = policy.act(res.observation, env, env_idx)
        res = env.step(action)
        if writer:
            writer.write_step(episode_id, t, ACTIONS[action] if isinstance(action, int)
                              else action, res)
        if max_steps is not None and t >= max_steps:
            break
    m = env.metrics() if env.record.finished else {
        "success": False, "NA": t, "TL": 0.0, "F_M": 0.0, "F_A": 0.0, "return": 0.0}
    m["reason"] = env.done_reason
    m["tips"] = [tp.tolist() for tp in env.record.tips]
    return m


def evaluate(policy, tree: AirwayTree, targets, settings: EvalSettings | None = None,
             reward: RewardConfig | None = None, camera: CameraConfig | None = None,
             robot: RobotParams | None = None, env_cfg: EnvConfig | None = None,
             renderer: LumenRenderer | None = None, log=None) -> dict:
    """N evaluation episodes per target; deterministic given the seed."""
    st = settings or EvalSettings()
    renderer = renderer or LumenRenderer(tree, camera or CameraConfig())
    base_env_cfg = env_cfg or EnvConfig()
    report = {"policy": getattr(policy, "name", "policy"),
              "episodes_per_target": st.episodes,
              "seed": st.seed,
              "min_success_rate": st.min_success_rate,
              "targets": []}
    for ti, target in enumerate(targets):
        env = BronchoEnv(tree, target,
                         reward=reward or RewardConfig(),
                         env=EnvConfig(n_backbone=base_env_cfg.n_backbone, mode="eval",
                                       train_step_cap=base_env_cfg.train_step_cap,
                                       eval_step_cap=base_env_cfg.eval_step_cap,
                                       reset_tilt=base_env_cfg.reset_tilt),
                         robot=robot, renderer=renderer)
        runs = []
        for e in range(st.episodes):
            seed = st.seed * 1_000_000 + ti * 10_000 + e
            runs.append(run_episode(env, policy, seed, env_idx=ti))
            if log and (e + 1) % 10 == 0:
                sr = np.mean([r["success"] for r in runs])
                log(f"target {ti}: {e + 1}/{st.episodes} episodes, SR {sr:.2f}")
        report["targets"].append(_target_stats(target, runs, st))
    return report


def _target_stats(target, runs: list[dict], st: EvalSettings) -> dict:
    n = len(runs)
    succ = [r for r in runs if r["success"]]
    sr = len(succ) / n if n else 0.0
    entry = {
        "target": [float(x) for x in np.asarray(target)],
        "episodes": n,
        "SR": sr,
        "SR_sigma": float(np.sqrt(sr * (1 - sr) / n)) if n else 0.0,
        "reasons": {r: sum(1 for x in runs if x["reason"] == r)
                    for r in sorted({x["reason"] for x in runs if x["reason"]})},
    }
    if sr >= st.min_success_rate and succ:
        for key in ("NA", "TL", "F_M", "F_A"):
            vals = np.array([r[key] for r in succ], dtype=float)
            entry[key] = float(vals.mean())
            entry[f"{key}_sigma"] = float(vals.std())
    else:
        for key in ("NA", "TL", "F_M", "F_A"):
            entry[key] = None
            entry[f"{key}_sigma"] = None
    if st.save_paths:
        entry["paths"] = [r["tips"] for r in runs]
    return entry


def report_to_json(report: dict) -> str:
    clean = json.loads(json.dumps(report))
    for t in clean.get("targets", []):
        t.pop("paths", None)
    return json.dumps(clean, sort_keys=True, indent=2) + "\n"


def format_report_text(report: dict) -> str:
    out = io.StringIO()
    out.write(f"policy: {report['policy']}  episodes/target: "
              f"{report['episodes_per_target']}  seed: {report['seed']}\n")
    hdr = f"{'target':<28}{'SR':>8}{'NA':>10}{'TL':>8}{'F_M':>8}{'F_A':>8}\n"
    out.write(hdr)
    for t in report["targets"]:
        tgt = ",".join(f"{x:.0f}" for x in t["target"])

        def cell(key, fmt):
            return "-" if t[key] is None else format(t[key], fmt)

        out.write(f"{tgt:<28}{t['SR']:>8.2f}{cell('NA', '>10.1f')}"
                  f"{cell('TL', '>8.2f')}{cell('F_M', '>8.3f')}{cell('F_A', '>8.3f')}\n")
    return out.getvalue()


# --- ablation table --------------------------------------------------------------------

def run_ablation(reports_by_mode: dict[str, dict | None]) -> dict:
    """Assemble a mode x target comparison from per-mode eval reports.
    Missing checkpoints produce 'absent' rows, not zeros."""
    table = {"rows": []}
    for mode in reports_by_mode:
        report = reports_by_mode[mode]
        if report is None:
            table["rows"].append({"mode": mode, "absent": True, "targets": []})
            continue
        table["rows"].append({"mode": mode, "absent": False,
                              "targets": report["targets"]})
    return table


def ablation_to_csv(table: dict) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["mode", "target", "SR", "NA", "TL", "F_M", "F_A"])
    for row in table["rows"]:
        if row["absent"]:
            writer.writerow([row["mode"], "absent", "", "", "", "", ""])
            continue
        for t in row["targets"]:
            tgt = ";".join(f"{x:.1f}" for x in t["target"])
            cells = [t["SR"]] + [("-" if t[k] is None else t[k])
                                 for k in ("NA", "TL", "F_M", "F_A")]
            writer.writerow([row["mode"], tgt] + cells)
    return out.getvalue()


def ablation_to_text(table: dict) -> str:
    out = io.StringIO()
    out.write(f"{'mode':<18}{'target':<24}{'SR':>7}{'NA':>9}{'TL':>7}{'F_M':>8}{'F_A':>8}\n")
    for row in table["rows"]:
        if row["absent"]:
            out.write(f"{row['mode']:<18}{'(no checkpoint)':<24}\n")
            continue
        for t in row["targets"]:
            tgt = ",".join(f"{x:.0f}" for x in t["target"])

            def cell(key, fmt):
                return "-" if t[key] is None else format(t[key], fmt)

            out.write(f"{row['mode']:<18}{tgt:<24}{t['SR']:>7.2f}{cell('NA', '>9.1f')}"
                      f"{cell('TL', '>7.2f')}{cell('F_M', '>8.3f')}{cell('F_A', '>8.3f')}\n")
    return out.getvalue()


# --- scripted collection -----------------------------------------------------------------

def collect_scripted(tree: AirwayTree, steps: int, noise: float, seed: int,
                     out_path: str | Path, camera: CameraConfig | None = None,
                     reward: RewardConfig | None = None,
                     env_cfg: EnvConfig | None = None,
                     max_generation: int | None = None,
                     tree_path: str | None = None, log=None) -> dict:
    """Noisy centerline-walker exploration over every branch up to the
    configured generation; writes the JSON-lines dataset + manifest."""
    renderer = LumenRenderer(tree, camera or CameraConfig())
    gen_cap = tree.max_generation() if max_generation is None else max_generation
    leaves = [s for s in tree.segments.values()
              if s.generation == gen_cap or not tree.children(s.id)]
    leaves = [s for s in leaves if s.generation <= gen_cap]
    leaves.sort(key=lambda s: s.id)
    visited: set[int] = set()
    total = 0
    episode = 0
    cam = renderer.config
    with TrajectoryWriter(out_path) as writer:
        while total < steps or not _covered(tree, visited, gen_cap):
            leaf = leaves[episode % len(leaves)]
            target = leaf.points[-2]
            env = BronchoEnv(tree, target, reward=reward,
                             env=env_cfg or EnvConfig(mode="train"),
                             renderer=renderer)
            policy = CenterlineGreedyPolicy(noise=noise, seed=seed + episode)
            ep_seed = seed * 100_000 + episode
            res = env.reset(seed=ep_seed)
            policy.start_episode(env, 0, ep_seed)
            writer.write_reset(episode, res, ep_seed, target=env.path.target)
            t = 0
            while not res.done:
                t += 1
                action = policy.act(res.observation, env, 0)
                res = env.step(action)
                writer.write_step(episode, t, ACTIONS[action], res)
                sid, _, _, _ = tree.nearest_centerline_point(env.state.tip)
                visited.add(sid)
                total += 1
            if log:
                log(f"collect episode {episode}: {t} steps, total {total}, "
                    f"reason {res.done_reason}, coverage "
                    f"{len(visited)}/{sum(1 for s in tree.segments.values() if s.generation <= gen_cap)}")
            episode += 1
            if episode > 40 * len(leaves):
                raise RuntimeError("scripted collection failed to cover the tree")
    manifest = {
        "kind": "trajectory_dataset",
        "steps": total,
        "episodes": episode,
        "noise": noise,
        "seed": seed,
        "camera": dataclasses.asdict(cam),
        "reward": dataclasses.asdict(reward or RewardConfig()),
        "env": dataclasses.asdict(env_cfg or EnvConfig(mode="train")),
        "tree": tree_path,
        "tree_hash": hashlib.sha256(tree.to_json().encode()).hexdigest(),
        "coverage": sorted(visited),
    }
    write_manifest(out_path, manifest)
    return manifest


def _covered(tree: AirwayTree, visited: set[int], gen_cap: int) -> bool:
    need = {s.id for s in tree.segments.values() if s.generation <= gen_cap}
    return need.issubset(visited)


# --- run manifests ------------------------------------------------------------------------

def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_manifest(out_dir: str | Path, command: str, config: dict,
                       inputs: dict[str, str], outputs: list[str],
                       seed: int | None = None) -> Path:
    """Reproducibility record: resolved config, seeds, input content hashes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: (file_hash(v) if Path(v).exists() else None)
                   for k, v in inputs.items()},
        "input_paths": dict(inputs),
        "outputs": sorted(outputs),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path
