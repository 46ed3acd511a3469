"""WebSocket teleoperation service: a human (or scripted client) steers the
robot live and records stage-1 exploration datasets.

Protocol (JSON text messages, one state reply per client message):

  client -> server: {"id": n, "type": "reset"|"action"|"record_start"|
                     "record_stop", ...payload}
  server -> client: {"id": m, "ack": n, "type": "state", "step": t,
                     "frame": {"b64", "w", "h"}, "backbone": [mm floats],
                     "reward": {...}, "done": bool, "reason": str|null,
                     "recording": bool}

Server message ids increase strictly. Malformed input gets a {"type":
"error"} reply and the session survives. One interactive client at a time;
extra connections are turned away with a "busy" error. Recorded files use
the trajectory JSON-lines schema and are valid stage-1 training inputs.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .airway import AirwayTree
from .broncho_env import BronchoEnv, EnvConfig, RewardConfig, StepResult
from .lumen_render import CameraConfig, LumenRenderer
from .robot import ACTIONS, action_from_name, backbone_observation
from .trajectory import TrajectoryWriter, encode_frame, write_manifest

PROTOCOL_VERSION = 1


def tree_projection(tree: AirwayTree) -> dict:
    """Principal-plane orthographic projection basis for the 2-D map."""
    pts = np.concatenate([s.points for s in tree.segments.values()])
    mean = pts.mean(axis=0)
    cov = np.cov((pts - mean).T)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    u, vv = v[:, order[0]], v[:, order[1]]
    return {"origin": mean.tolist(), "u": u.tolist(), "v": vv.tolist()}


class TeleopSession:
    """Owns one env; processes one message at a time (single in-flight)."""

    def __init__(self, tree: AirwayTree, target, renderer: LumenRenderer,
                 record_dir: str | Path | None = None,
                 reward: RewardConfig | None = None,
                 env_cfg: EnvConfig | None = None):
        self.tree = tree
        self.env = BronchoEnv(tree, target, reward=reward,
                              env=env_cfg or EnvConfig(mode="train"),
                              renderer=renderer)
        self.record_dir = Path(record_dir) if record_dir else None
        self.writer: TrajectoryWriter | None = None
        self.record_path: Path | None = None
        self.msg_id = 0
        self.episode = -1
        self.step = 0
        self.last: StepResult | None = None
        self._reset_seed = 0

    def _next_id(self) -> int:
        self.msg_id += 1
        return self.msg_id

    def _state_message(self, ack, result: StepResult) -> dict:
        raw_backbone = backbone_observation(self.env.state,
                                            self.env.env_cfg.n_backbone)
        return {
            "id": self._next_id(),
            "ack": ack,
            "type": "state",
            "version": PROTOCOL_VERSION,
            "step": self.step,
            "episode": self.episode,
            "frame": encode_frame(result.observation.frames[-1]),
            "backbone": [float(x) for x in raw_backbone],
            "reward": {"r_d": result.r_d, "r_a": result.r_a, "r_b": result.r_b,
                       "r_g": result.r_g, "total": result.reward},
            "done": bool(result.done),
            "reason": result.done_reason,
            "recording": self.writer is not None,
            "subgoal": result.subgoal_index,
            "contact": {"max_force": result.contact.max_force,
                        "mean_force": result.contact.mean_force},
        }

    def _error(self, ack, message: str) -> dict:
        return {"id": self._next_id(), "ack": ack, "type": "error",
                "message": message}

    def handle(self, raw: str) -> dict:
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError:
            return self._error(None, "malformed JSON")
        if not isinstance(msg, dict) or "type" not in msg:
            return self._error(None, "message must be an object with a 'type'")
        ack = msg.get("id")
        mtype = msg["type"]
        if mtype == "reset":
            seed = int(msg.get("seed", self._reset_seed))
            self._reset_seed = seed + 1
            self.episode += 1
            self.step = 0
            self.last = self.env.reset(seed=seed)
            if self.writer:
                self.writer.write_reset(self.episode, self.last, seed,
                                        target=self.env.path.target)
            return self._state_message(ack, self.last)
        if mtype == "action":
            name = msg.get("name")
            if self.last is None:
                return self._error(ack, "no episode; send reset first")
            if self.env.done:
                return self._error(ack, "episode finished; send reset")
            try:
                action = action_from_name(name)
            except (ValueError, TypeError):
                return self._error(ack, f"unknown action {name!r}")
            self.step += 1
            self.last = self.env.step(action)
            if self.writer:
                self.writer.write_step(self.episode, self.step, action, self.last)
            return self._state_message(ack, self.last)
        if mtype == "record_start":
            if self.record_dir is None:
                return self._error(ack, "server started without a record dir")
            if self.writer is not None:
                return self._error(ack, "already recording")
            self.record_dir.mkdir(parents=True, exist_ok=True)
            name = msg.get("name", f"teleop_{self.episode + 1:04d}")
            self.record_path = self.record_dir / f"{name}.jsonl"
            self.writer = TrajectoryWriter(self.record_path)
            if self.last is not None and not self.env.done:
                # mid-episode start: snapshot current state as a reset record
                self.episode += 1
                self.step = 0
                self.writer.write_reset(self.episode, self.last,
                                        seed=self._reset_seed - 1,
                                        target=self.env.path.target)
            return {"id": self._next_id(), "ack": ack, "type": "recording",
                    "active": True, "path": str(self.record_path)}
        if mtype == "record_stop":
            if self.writer is None:
                return self._error(ack, "not recording")
            self.writer.close()
            cam = self.env.renderer.config
            write_manifest(self.record_path, {
                "kind": "trajectory_dataset",
                "source": "teleop",
                "camera": dataclasses.asdict(cam),
                "reward": dataclasses.asdict(self.env.reward_cfg),
                "env": dataclasses.asdict(self.env.env_cfg),
                "steps": self.writer.steps_written,
            })
            path = str(self.record_path)
            self.writer = None
            self.record_path = None
            return {"id": self._next_id(), "ack": ack, "type": "recording",
                    "active": False, "path": path}
        return self._error(ack, f"unknown message type {mtype!r}")

    def close(self) -> None:
        if self.writer is not None:
            self.writer.close()
            self.writer = None


def build_app(tree: AirwayTree, target, camera: CameraConfig | None = None,
              record_dir: str | Path | None = None,
              reward: RewardConfig | None = None,
              env_cfg: EnvConfig | None = None,
              static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="bronchosim teleop")
    renderer = LumenRenderer(tree, camera or CameraConfig())
    busy = {"active": False}

    @app.get("/tree")
    def get_tree():
        doc = json.loads(tree.to_json())
        doc["projection"] = tree_projection(tree)
        doc["target"] = [float(x) for x in np.asarray(target)]
        doc["actions"] = [a.value for a in ACTIONS]
        return JSONResponse(doc)

    @app.websocket("/teleop")
    async def teleop(ws: WebSocket):
        await ws.accept()
        if busy["active"]:
            await ws.send_text(json.dumps(
                {"id": 0, "type": "error", "message": "busy: another client is connected"}))
            await ws.close()
            return
        busy["active"] = True
        session = TeleopSession(tree, target, renderer, record_dir=record_dir,
                                reward=reward, env_cfg=env_cfg)
        try:
            while True:
                raw = await ws.receive_text()
                reply = session.handle(raw)
                await ws.send_text(json.dumps(reply))
        except WebSocketDisconnect:
            pass
        finally:
            session.close()
            busy["active"] = False

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="frontend")
    return app


def serve(tree: AirwayTree, target, port: int = 8701, host: str = "127.0.0.1",
          camera: CameraConfig | None = None, record_dir=None,
          static_dir=None, reward=None, env_cfg=None) -> None:
    import uvicorn

    app = build_app(tree, target, camera=camera, record_dir=record_dir,
                    reward=reward, env_cfg=env_cfg, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
