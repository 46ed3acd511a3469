"""Teleop bridge protocol: round trips, recording, error handling."""

import base64
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from bronchosim.airway import TreeConfig, generate_tree
from bronchosim.broncho_env import EnvConfig
from bronchosim.lumen_render import CameraConfig
from bronchosim.perception import PerceptionConfig, Stage1Dataset, train_stage1
from bronchosim.teleop_bridge import build_app, tree_projection
from bronchosim import trajectory

TREE = generate_tree(3, TreeConfig(generations=2))
TARGET = [float(x) for x in
          max(TREE.segments.values(), key=lambda s: s.generation).points[-2]]
CAM = CameraConfig(width=16, height=16, backend="grid")


def make_client(tmp_path=None):
    app = build_app(TREE, TARGET, camera=CAM,
                    record_dir=tmp_path,
                    env_cfg=EnvConfig(mode="train", reset_tilt=0.02))
    return TestClient(app)


def send(ws, msg):
    ws.send_text(json.dumps(msg))
    return json.loads(ws.receive_text())


def test_reset_gives_step_zero_state():
    with make_client() as client:
        with client.websocket_connect("/teleop") as ws:
            reply = send(ws, {"id": 1, "type": "reset", "seed": 0})
            assert reply["type"] == "state"
            assert reply["step"] == 0
            assert not reply["done"]
            assert reply["ack"] == 1
            f = reply["frame"]
            assert len(base64.b64decode(f["b64"])) == f["w"] * f["h"]


def test_forward_action_advances_tip_3mm():
    with make_client() as client:
        with client.websocket_connect("/teleop") as ws:
            r0 = send(ws, {"id": 1, "type": "reset", "seed": 0})
            tip0 = np.array(r0["backbone"][-3:])
            r1 = send(ws, {"id": 2, "type": "action", "name": "s_FORWARD"})
            tip1 = np.array(r1["backbone"][-3:])
            assert np.linalg.norm(tip1 - tip0) == pytest.approx(3.0, abs=1e-6)


def test_hundred_action_round_trip_in_order():
    with make_client() as client:
        with client.websocket_connect("/teleop") as ws:
            reply = send(ws, {"id": 0, "type": "reset", "seed": 1})
            ids = [reply["id"]]
            rng = np.random.default_rng(0)
            actions = ["s_FORWARD", "s_LEFT", "s_RIGHT", "s_IN", "s_OUT",
                       "e_FORWARD", "e_BACKWARD"]
            n = 0
            k = 1
            while n < 100:
                name = actions[rng.integers(len(actions))]
                reply = send(ws, {"id": k, "type": "action", "name": name})
                k += 1
                if reply["type"] == "state" and reply.get("done"):
                    reply = send(ws, {"id": k, "type": "reset"})
                    k += 1
                    ids.append(reply["id"])
                    continue
                assert reply["type"] == "state"
                assert reply["ack"] == k - 1
                f = reply["frame"]
                assert len(base64.b64decode(f["b64"])) == f["w"] * f["h"]
                ids.append(reply["id"])
                n += 1
            assert all(a < b for a, b in zip(ids, ids[1:]))  # strictly increasing


def test_malformed_messages_keep_session_alive():
    with make_client() as client:
        with client.websocket_connect("/teleop") as ws:
            ws.send_text("this is not json")
            reply = json.loads(ws.receive_text())
            assert reply["type"] == "error"
            reply = send(ws, {"id": 1, "type": "unknown_thing"})
            assert reply["type"] == "error"
            reply = send(ws, {"id": 2, "type": "action", "name": "warp_drive"})
            assert reply["type"] == "error"
            # still usable
            reply = send(ws, {"id": 3, "type": "reset", "seed": 0})
            assert reply["type"] == "state"


def test_action_before_reset_is_error():
    with make_client() as client:
        with client.websocket_connect("/teleop") as ws:
            reply = send(ws, {"id": 1, "type": "action", "name": "s_FORWARD"})
            assert reply["type"] == "error"


def test_second_client_rejected_busy():
    with make_client() as client:
        with client.websocket_connect("/teleop") as ws1:
            send(ws1, {"id": 1, "type": "reset", "seed": 0})
            with client.websocket_connect("/teleop") as ws2:
                reply = json.loads(ws2.receive_text())
                assert reply["type"] == "error"
                assert "busy" in reply["message"]
            # first session still alive
            reply = send(ws1, {"id": 2, "type": "action", "name": "s_FORWARD"})
            assert reply["type"] == "state"


def test_recording_replays_and_feeds_stage1(tmp_path):
    with make_client(tmp_path) as client:
        with client.websocket_connect("/teleop") as ws:
            rec = send(ws, {"id": 1, "type": "record_start", "name": "session"})
            assert rec["type"] == "recording" and rec["active"]
            send(ws, {"id": 2, "type": "reset", "seed": 7})
            rng = np.random.default_rng(1)
            k = 3
            steps = 0
            while steps < 60:
                name = ["s_FORWARD", "s_FORWARD", "s_LEFT", "s_IN"][rng.integers(4)]
                reply = send(ws, {"id": k, "type": "action", "name": name})
                k += 1
                if reply.get("done"):
                    send(ws, {"id": k, "type": "reset"})
                    k += 1
                steps += 1
            stop = send(ws, {"id": k, "type": "record_stop"})
            assert stop["type"] == "recording" and not stop["active"]

    path = tmp_path / "session.jsonl"
    records = trajectory.load_records(path)
    trajectory.validate_schema(records)
    manifest = json.loads((tmp_path / "session.manifest.json").read_text())
    assert trajectory.replay_dataset(records, TREE, manifest=manifest)
    ds = Stage1Dataset.from_files([path], resolution=16)
    assert len(ds) > 20
    # short training smoke on the recorded file
    store, curves = train_stage1(ds, epochs=1,
                                 cfg=PerceptionConfig(resolution=16, batch_size=16),
                                 seed=0, min_samples=10)
    assert np.isfinite(curves["visual"][0])


def test_record_stop_without_start_is_error(tmp_path):
    with make_client(tmp_path) as client:
        with client.websocket_connect("/teleop") as ws:
            reply = send(ws, {"id": 1, "type": "record_stop"})
            assert reply["type"] == "error"


def test_tree_endpoint_serves_projection():
    with make_client() as client:
        doc = client.get("/tree").json()
        assert "segments" in doc and "projection" in doc
        proj = doc["projection"]
        u, v = np.array(proj["u"]), np.array(proj["v"])
        assert abs(np.dot(u, v)) < 1e-9
        assert abs(np.linalg.norm(u) - 1) < 1e-9
        assert len(doc["actions"]) == 12


def test_projection_spans_principal_plane():
    proj = tree_projection(TREE)
    pts = np.concatenate([s.points for s in TREE.segments.values()])
    centered = pts - np.array(proj["origin"])
    u, v = np.array(proj["u"]), np.array(proj["v"])
    in_plane = np.abs(centered @ u).var() + np.abs(centered @ v).var()
    n = np.cross(u, v)
    out_of_plane = (centered @ n).var()
    assert in_plane > out_of_plane
