"""Trajectory dataset files: JSON-lines, one record per step.

Each record carries the action taken, the newest camera frame (base64 raw
grayscale bytes with a {w,h} header), the bbox-normalized backbone array,
reward components and the done flag. Episode resets are records with
``action = null`` and the reset seed, so a file replays deterministically:
feeding the recorded actions after reset(seed) reproduces the recorded
observations bit-for-bit.

A sidecar ``<name>.manifest.json`` stores the environment construction
parameters needed for replay.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .broncho_env import BronchoEnv, StepResult
from .lumen_render import Frame
from .robot import Action


def encode_frame(values: np.ndarray) -> dict:
    u8 = np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
    h, w = u8.shape
    return {"b64": base64.b64encode(u8.tobytes()).decode("ascii"), "w": w, "h": h}


def decode_frame(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["b64"])
    if len(raw) != d["w"] * d["h"]:
        raise ValueError(f"frame payload has {len(raw)} bytes, expected {d['w'] * d['h']}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(d["h"], d["w"])


def _record(episode: int, step: int, action: str | None, result: StepResult,
            seed: int | None = None, target=None) -> dict:
    rec = {
        "episode": episode,
        "step": step,
        "action": action,
        "backbone": [float(x) for x in result.observation.backbone],
        "frame": encode_frame(result.observation.frames[-1]),
        "reward": {"r_d": result.r_d, "r_a": result.r_a, "r_b": result.r_b,
                   "r_g": result.r_g, "total": result.reward},
        "done": bool(result.done),
        "reason": result.done_reason,
    }
    if seed is not None:
        rec["seed"] = int(seed)
    if target is not None:
        rec["target"] = [float(x) for x in np.asarray(target)]
    return rec


class TrajectoryWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w")
        self.steps_written = 0

    def write_reset(self, episode: int, result: StepResult, seed: int,
                    target=None) -> None:
        self._fh.write(json.dumps(_record(episode, 0, None, result, seed=seed,
                                          target=target), sort_keys=True) + "\n")

    def write_step(self, episode: int, step: int, action: Action,
                   result: StepResult) -> None:
        self._fh.write(json.dumps(_record(episode, step, action.value, result),
                                  sort_keys=True) + "\n")
        self.steps_written += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_manifest(dataset_path: str | Path, manifest: dict) -> Path:
    p = Path(dataset_path)
    mpath = p.with_suffix(p.suffix + ".manifest.json") if p.suffix != ".jsonl" \
        else p.with_name(p.stem + ".manifest.json")
    mpath.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return mpath


def load_records(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def group_episodes(records: list[dict]) -> list[list[dict]]:
    """Split a record stream into per-episode lists (reset record first)."""
    episodes: dict[int, list[dict]] = {}
    for rec in records:
        episodes.setdefault(rec["episode"], []).append(rec)
    out = []
    for eid in sorted(episodes):
        recs = sorted(episodes[eid], key=lambda r: r["step"])
        out.append(recs)
    return out


def validate_schema(records: list[dict]) -> None:
    """Light structural validation of a trajectory record stream."""
    for i, rec in enumerate(records):
        for key in ("episode", "step", "action", "backbone", "frame", "reward", "done"):
            if key not in rec:
                raise ValueError(f"record {i}: missing field {key!r}")
        f = rec["frame"]
        if len(base64.b64decode(f["b64"])) != f["w"] * f["h"]:
            raise ValueError(f"record {i}: frame byte count mismatch")
        if rec["action"] is None and rec["step"] != 0:
            raise ValueError(f"record {i}: null action outside a reset record")


def replay_dataset(records: list[dict], tree, renderer=None, reward=None,
                   env_cfg=None, robot=None, manifest: dict | None = None) -> bool:
    """Replay every episode of a dataset, rebuilding each episode's env from
    the recorded target (and the sidecar manifest's env/reward/camera config
    when given). All episodes must replay bit-identically."""
    from .broncho_env import EnvConfig, RewardConfig
    from .lumen_render import LumenRenderer, CameraConfig

    if manifest:
        if reward is None and "reward" in manifest:
            reward = RewardConfig(**manifest["reward"])
        if env_cfg is None and "env" in manifest:
            env_cfg = EnvConfig(**manifest["env"])
        if renderer is None and "camera" in manifest:
            renderer = LumenRenderer(tree, CameraConfig(**manifest["camera"]))
    episodes = group_episodes(records)
    if renderer is None:
        head = episodes[0][0]
        w, h = head["frame"]["w"], head["frame"]["h"]
        renderer = LumenRenderer(tree, CameraConfig(width=w, height=h))
    for ep in episodes:
        head = ep[0]
        if "target" not in head:
            raise ValueError("reset record lacks a target; cannot rebuild env")
        env = BronchoEnv(tree, head["target"], reward=reward, env=env_cfg,
                         robot=robot, renderer=renderer)
        if not replay_episode(env, ep):
            return False
    return True


def replay_episode(env: BronchoEnv, episode_records: list[dict]) -> bool:
    """Re-run recorded actions and compare observations bit-for-bit."""
    head = episode_records[0]
    if head["action"] is not None or "seed" not in head:
        raise ValueError("episode does not start with a seeded reset record")
    result = env.reset(seed=head["seed"])
    if encode_frame(result.observation.frames[-1]) != head["frame"]:
        return False
    for rec in episode_records[1:]:
        result = env.step(rec["action"])
        if encode_frame(result.observation.frames[-1]) != rec["frame"]:
            return False
        got_backbone = [float(x) for x in result.observation.backbone]
        if got_backbone != rec["backbone"]:
            return False
        if bool(result.done) != rec["done"]:
            return False
    return True
