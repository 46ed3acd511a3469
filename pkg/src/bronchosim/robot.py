"""Simplified dual-segment flexible endoscope.

Kinematic follow-the-leader model: the body polyline occupies positions
previously visited by the tip. The outer sheath owns the proximal portion
of the polyline and the inner endoscope the distal portion; the boundary
is a node index that slides when the sheath advances or retreats over the
stationary endoscope. Bend actions rotate an instrument's tip frame only;
curvature is encoded by the node history. Contact with the airway wall is
penalty-based: out-of-tube nodes are projected back to the boundary and
report a force proportional to the pre-projection penetration.

Model conventions (the source papers for this class of robot leave them
open; all are config-exposed):

* only one instrument acts per step;
* sheath FORWARD with the endoscope extended slides the sheath along the
  existing body curve (the tip does not move);
* sheath BACKWARD with the endoscope extended exposes more endoscope
  without moving any node;
* with the endoscope fully retracted, sheath motion moves the whole
  assembly and bends carry the endoscope frame along;
* the tip-travel odometer adds the step length for every executed
  FORWARD/BACKWARD command.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .airway import AirwayTree


class Action(str, enum.Enum):
    """12 discrete commands: 6 per instrument (sheath s_*, endoscope e_*)."""
    S_FORWARD = "s_FORWARD"
    S_BACKWARD = "s_BACKWARD"
    S_LEFT = "s_LEFT"
    S_RIGHT = "s_RIGHT"
    S_IN = "s_IN"
    S_OUT = "s_OUT"
    E_FORWARD = "e_FORWARD"
    E_BACKWARD = "e_BACKWARD"
    E_LEFT = "e_LEFT"
    E_RIGHT = "e_RIGHT"
    E_IN = "e_IN"
    E_OUT = "e_OUT"

    @property
    def is_sheath(self) -> bool:
        return self.value.startswith("s_")

    @property
    def verb(self) -> str:
        return self.value[2:]

    @property
    def index(self) -> int:
        return ACTIONS.index(self)


ACTIONS: tuple[Action, ...] = tuple(Action)
N_ACTIONS = len(ACTIONS)


def action_from_index(i: int) -> Action:
    return ACTIONS[i]


def action_from_name(name: str) -> Action:
    for a in ACTIONS:
        if a.value == name:
            return a
    raise ValueError(f"unknown action {name!r}")


@dataclass
class RobotParams:
    step_mm: float = 3.0
    bend_rad: float = 0.2
    r_robot: float = 1.5          # body radius, mm
    k_contact: float = 0.2        # N per mm of penetration
    recovery_depth: float = 5.0   # beyond this penetration the robot is "lost"


@dataclass(frozen=True)
class ContactReport:
    max_force: float = 0.0
    mean_force: float = 0.0
    contact_count: int = 0
    max_penetration: float = 0.0


@dataclass(frozen=True)
class RobotState:
    """Value type; step logic is pure (state in, state out)."""
    nodes: np.ndarray             # (N,3) base -> tip, mm
    scope_start: int              # index of the sheath-tip node
    sheath_frame: np.ndarray      # (3,3) columns x, y, z; z = heading
    scope_frame: np.ndarray
    sheath_bend: np.ndarray       # cumulative commanded (xz, yz) bend, rad
    scope_bend: np.ndarray
    node_forces: np.ndarray       # (N,), N per node, from last contact pass
    tip_travel: float = 0.0
    lost: bool = False
    last_noop: bool = False

    @property
    def tip(self) -> np.ndarray:
        return self.nodes[-1]

    @property
    def extension_nodes(self) -> int:
        return len(self.nodes) - 1 - self.scope_start

    @property
    def sheath_dir(self) -> np.ndarray:
        return self.sheath_frame[:, 2]

    @property
    def scope_dir(self) -> np.ndarray:
        return self.scope_frame[:, 2]

    @property
    def tip_direction(self) -> np.ndarray:
        return self.scope_dir if self.extension_nodes > 0 else self.sheath_dir

    @property
    def sheath_insertion(self) -> float:
        seg = self.nodes[1:self.scope_start + 1] - self.nodes[:self.scope_start]
        return float(np.linalg.norm(seg, axis=1).sum())

    @property
    def scope_extension(self) -> float:
        seg = self.nodes[self.scope_start + 1:] - self.nodes[self.scope_start:-1]
        return float(np.linalg.norm(seg, axis=1).sum())


def _frame_from_direction(direction: np.ndarray) -> np.ndarray:
    z = np.asarray(direction, dtype=np.float64)
    z = z / np.linalg.norm(z)
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(ref, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def initial_state(position, direction) -> RobotState:
    frame = _frame_from_direction(direction)
    return RobotState(
        nodes=np.asarray(position, dtype=np.float64).reshape(1, 3).copy(),
        scope_start=0,
        sheath_frame=frame.copy(),
        scope_frame=frame.copy(),
        sheath_bend=np.zeros(2),
        scope_bend=np.zeros(2),
        node_forces=np.zeros(1),
    )


def _local_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == 0:    # about local x: bends in the yOz plane
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])  # about local y: xOz plane


def _align_z(frame: np.ndarray, new_z: np.ndarray) -> np.ndarray:
    """Minimal rotation taking the frame's z axis onto new_z (keeps roll)."""
    z = frame[:, 2]
    new_z = new_z / np.linalg.norm(new_z)
    c = float(np.clip(np.dot(z, new_z), -1.0, 1.0))
    axis = np.cross(z, new_z)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return frame if c > 0 else -frame  # antiparallel flip is degenerate
    axis = axis / n
    angle = float(np.arctan2(n, c))
    k = axis
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
    return R @ frame


def resolve_contact(state: RobotState, tree: AirwayTree,
                    params: RobotParams | None = None) -> tuple[RobotState, ContactReport]:
    """Project penetrating nodes to the tube boundary and report forces.

    Idempotent: already-valid states come back unchanged with zero forces.
    """
    p = params or RobotParams()
    nodes, pen = tree.project_inside(state.nodes, clearance=p.r_robot)
    forces = p.k_contact * pen
    lost = bool(np.any(pen > p.recovery_depth))

    # keep consecutive nodes within one step length: subdivide stretched links
    scope_start = state.scope_start
    max_iter = 4
    while max_iter > 0:
        gaps = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
        bad = np.where(gaps > p.step_mm + 1e-9)[0]
        if len(bad) == 0:
            break
        i = int(bad[0])
        mid = 0.5 * (nodes[i] + nodes[i + 1])
        mid_p, mid_pen = tree.project_inside(mid.reshape(1, 3), clearance=p.r_robot)
        nodes = np.vstack([nodes[:i + 1], mid_p, nodes[i + 1:]])
        forces = np.concatenate([forces[:i + 1], p.k_contact * mid_pen, forces[i + 1:]])
        if scope_start > i:
            scope_start += 1
        max_iter -= 1

    contact = forces > 0
    report = ContactReport(
        max_force=float(forces.max(initial=0.0)),
        mean_force=float(forces[contact].mean()) if contact.any() else 0.0,
        contact_count=int(contact.sum()),
        max_penetration=float(pen.max(initial=0.0)),
    )
    new_state = replace(state, nodes=nodes, scope_start=scope_start,
                        node_forces=forces, lost=state.lost or lost)
    return new_state, report


def apply_action(state: RobotState, action: Action, tree: AirwayTree,
                 params: RobotParams | None = None) -> tuple[RobotState, ContactReport]:
    """Execute one discrete command and resolve wall contact."""
    p = params or RobotParams()
    nodes = state.nodes
    scope_start = state.scope_start
    sheath_frame = state.sheath_frame.copy()
    scope_frame = state.scope_frame.copy()
    sheath_bend = state.sheath_bend.copy()
    scope_bend = state.scope_bend.copy()
    travel = state.tip_travel
    noop = False
    ext = state.extension_nodes
    verb = action.verb

    if verb in ("LEFT", "RIGHT", "IN", "OUT"):
        sign = 1.0 if verb in ("LEFT", "IN") else -1.0
        axis = 1 if verb in ("LEFT", "RIGHT") else 0   # y-axis => xOz plane
        R = _local_rotation(axis, sign * p.bend_rad)
        if action.is_sheath:
            sheath_frame = sheath_frame @ R
            sheath_bend[0 if axis == 1 else 1] += sign * p.bend_rad
            if ext == 0:
                scope_frame = scope_frame @ R  # carried inside the sheath
        else:
            scope_frame = scope_frame @ R
            scope_bend[0 if axis == 1 else 1] += sign * p.bend_rad

    elif verb == "FORWARD":
        if action.is_sheath:
            if ext == 0:
                new = nodes[-1] + p.step_mm * sheath_frame[:, 2]
                nodes = np.vstack([nodes, new])
                scope_start += 1
            else:
                scope_start += 1  # slide over the stationary endoscope
                tangent = nodes[min(scope_start + 1, len(nodes) - 1)] - nodes[scope_start - 1]
                if np.linalg.norm(tangent) > 1e-9:
                    sheath_frame = _align_z(sheath_frame, tangent)
        else:
            new = nodes[-1] + p.step_mm * scope_frame[:, 2]
            nodes = np.vstack([nodes, new])
        travel += p.step_mm

    elif verb == "BACKWARD":
        if action.is_sheath:
            if ext == 0:
                if len(nodes) <= 1:
                    noop = True  # cannot retract below zero insertion
                else:
                    nodes = nodes[:-1]
                    scope_start -= 1
                    if len(nodes) >= 2:
                        sheath_frame = _align_z(sheath_frame, nodes[-1] - nodes[-2])
                        scope_frame = _align_z(scope_frame, nodes[-1] - nodes[-2])
            else:
                if scope_start == 0:
                    noop = True
                else:
                    scope_start -= 1
                    tangent = nodes[min(scope_start + 1, len(nodes) - 1)] - nodes[max(scope_start - 1, 0)]
                    if np.linalg.norm(tangent) > 1e-9:
                        sheath_frame = _align_z(sheath_frame, tangent)
        else:
            if ext == 0:
                noop = True  # endoscope fully retracted
            else:
                nodes = nodes[:-1]
                if len(nodes) - 1 - scope_start > 0:
                    scope_frame = _align_z(scope_frame, nodes[-1] - nodes[-2])
                else:
                    scope_frame = sheath_frame.copy()
        if not noop:
            travel += p.step_mm
    else:  # pragma: no cover
        raise ValueError(f"unhandled action {action}")

    moved = replace(state, nodes=nodes.copy(), scope_start=scope_start,
                    sheath_frame=sheath_frame, scope_frame=scope_frame,
                    sheath_bend=sheath_bend, scope_bend=scope_bend,
                    node_forces=np.zeros(len(nodes)),
                    tip_travel=travel, last_noop=noop)
    return resolve_contact(moved, tree, p)


def backbone_observation(state: RobotState, n_nodes: int = 20,
                         bbox: np.ndarray | None = None) -> np.ndarray:
    """Arc-length resampling of the body to exactly n_nodes, concatenated
    [x,y,z] per node base->tip. With a bbox the coordinates are normalized
    to the tree's bounding-box scale for network input."""
    nodes = state.nodes
    if len(nodes) == 1:
        res = np.repeat(nodes, n_nodes, axis=0)
    else:
        steps = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
        arcs = np.concatenate([[0.0], np.cumsum(steps)])
        s = np.linspace(0.0, arcs[-1], n_nodes)
        res = np.stack([np.interp(s, arcs, nodes[:, k]) for k in range(3)], axis=1)
    if bbox is not None:
        scale = float((bbox[1] - bbox[0]).max())
        res = (res - bbox[0]) / scale
    return res.reshape(-1)


def tip_orientation(state: RobotState) -> np.ndarray:
    """Unit vector from the third-to-last to the last body node; falls back
    to the stored tip direction for bodies shorter than 3 nodes."""
    if len(state.nodes) < 3:
        return state.tip_direction.copy()
    d = state.nodes[-1] - state.nodes[-3]
    n = np.linalg.norm(d)
    if n < 1e-12:
        return state.tip_direction.copy()
    return d / n
