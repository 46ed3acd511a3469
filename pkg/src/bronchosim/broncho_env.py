"""The navigation POMDP: reset/step loop, shaped reward, sub-goal tracking,
break thresholds and per-episode metric accumulation.

Reward at each step:

    R = w1 * r_d + w2 * r_a + r_b + r_g

* ``r_d``  negated Euclidean distance from the tip to the current
  generation sub-goal (the reference-path segment endpoint; the final
  target once the last path segment is reached);
* ``r_a``  -(exp(angle/pi) - 1) where angle in [0, pi] separates the tip
  orientation from the current path segment's direction;
* ``r_b``  -20 once a break threshold trips (contact force, direction
  angle, or distance from the reference path), ending the episode;
* ``r_g``  +10 when the tip comes within the reach threshold of the
  target, ending the episode with success.

Sub-goal index k advances when the tip passes within the capture radius
of the current sub-goal or its nearest centerline segment already belongs
to the next path generation; k never decreases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .airway import AirwayTree, ReferencePath, build_reference_path, segment_direction
from .lumen_render import CameraConfig, Frame, FrameStack, LumenRenderer
from .robot import (
    Action,
    ContactReport,
    RobotParams,
    RobotState,
    action_from_index,
    action_from_name,
    apply_action,
    backbone_observation,
    initial_state,
    tip_orientation,
)


@dataclass
class RewardConfig:
    w1: float = 0.05
    w2: float = 1.0
    break_penalty: float = -20.0
    goal_bonus: float = 10.0
    reach_threshold: float = 7.0      # mm
    force_threshold: float = 1.5      # N
    angle_threshold: float = 2.6      # rad
    path_dist_threshold: float = 15.0  # mm
    subgoal_capture: float = 5.0      # mm

    def validate(self) -> None:
        for name in ("reach_threshold", "force_threshold", "angle_threshold",
                     "path_dist_threshold", "subgoal_capture"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class EnvConfig:
    n_backbone: int = 20
    mode: str = "train"               # "train" (cap 1000) or "eval" (cap 500)
    train_step_cap: int = 1000
    eval_step_cap: int = 500
    reset_tilt: float = 0.05          # rad, random initial heading jitter

    @property
    def step_cap(self) -> int:
        return self.train_step_cap if self.mode == "train" else self.eval_step_cap


def reward_distance(tip, subgoal) -> float:
    """r_d: negated Euclidean distance (mm)."""
    return -float(np.linalg.norm(np.asarray(tip, float) - np.asarray(subgoal, float)))


def angle_between(v1, v2) -> float:
    v1 = np.asarray(v1, float)
    v2 = np.asarray(v2, float)
    c = float(np.dot(v1, v2) / (np.linalg.norm(v1) * np.linalg.norm(v2)))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def reward_alignment(v1, v2) -> float:
    """r_a: -(e^(angle/pi) - 1); 0 when aligned, -(e-1) when reversed."""
    return -float(np.expm1(angle_between(v1, v2) / np.pi))


def reward_goal(distance: float, threshold: float, bonus: float = 10.0) -> float:
    return bonus if distance <= threshold else 0.0


@dataclass(frozen=True)
class Observation:
    frames: np.ndarray          # (3,H,W) float32, oldest first
    backbone: np.ndarray        # (3*n_backbone,) float32, bbox-normalized
    frame_ids: tuple[int, int, int]
    step: int


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    r_d: float
    r_a: float
    r_b: float
    r_g: float
    reward: float
    done: bool
    done_reason: str | None     # reached|break_force|break_angle|break_distance|step_cap
    contact: ContactReport
    subgoal_index: int
    tip: np.ndarray
    noop: bool = False


@dataclass
class EpisodeRecord:
    actions: int = 0
    tip_travel: float = 0.0
    reference_length: float = 0.0
    max_force: float = 0.0
    mean_force_sum: float = 0.0
    success: bool = False
    finished: bool = False
    tips: list = field(default_factory=list)
    total_reward: float = 0.0

    @property
    def mean_force(self) -> float:
        return self.mean_force_sum / self.actions if self.actions else 0.0


def episode_metrics(record: EpisodeRecord) -> dict:
    """SR contribution, action count, normalized trajectory length, forces."""
    if not record.finished:
        raise ValueError("episode not finished")
    return {
        "success": bool(record.success),
        "NA": int(record.actions),
        "TL": record.tip_travel / record.reference_length if record.reference_length else 0.0,
        "F_M": record.max_force,
        "F_A": record.mean_force,
        "return": record.total_reward,
    }


class EpisodeDone(RuntimeError):
    pass


class BronchoEnv:
    """One environment instance per rollout worker; the tree is shared."""

    def __init__(self, tree: AirwayTree, target, reward: RewardConfig | None = None,
                 env: EnvConfig | None = None, camera: CameraConfig | None = None,
                 robot: RobotParams | None = None, renderer: LumenRenderer | None = None):
        self.tree = tree
        self.reward_cfg = reward or RewardConfig()
        self.reward_cfg.validate()
        self.env_cfg = env or EnvConfig()
        self.robot_params = robot or RobotParams()
        self.renderer = renderer or LumenRenderer(tree, camera or CameraConfig())
        self.path: ReferencePath = build_reference_path(tree, target)
        self._frames = FrameStack()
        self._frame_counter = 0
        self._rng = np.random.default_rng(0)
        self.state: RobotState | None = None
        self.done = True
        self.done_reason = None
        self.k = 0
        self.steps = 0
        self.record = EpisodeRecord()

    # -- lifecycle ----------------------------------------------------------

    def reset(self, seed: int | None = None) -> StepResult:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        root = self.tree.segments[self.tree.root_id]
        entry = root.points[0].copy()
        direction = root.points[1] - root.points[0]
        direction = direction / np.linalg.norm(direction)
        tilt = self.env_cfg.reset_tilt
        if tilt > 0:
            axis = self._rng.normal(size=3)
            axis -= axis.dot(direction) * direction
            n = np.linalg.norm(axis)
            if n > 1e-9:
                axis /= n
                a = self._rng.uniform(0.0, tilt)
                direction = (direction * np.cos(a) + np.cross(axis, direction) * np.sin(a))
                direction /= np.linalg.norm(direction)
        self.state = initial_state(entry, direction)
        self.done = False
        self.done_reason = None
        self.steps = 0
        seg_id, _, _, _ = self.tree.nearest_centerline_point(self.state.tip)
        gen = self.tree.segments[seg_id].generation
        self.k = min(gen, len(self.path.segment_ids) - 1)
        self.record = EpisodeRecord(reference_length=self.path.arc_length)
        frame = self._render(self.state)
        self._frames.reset(frame)
        self._frame_counter += 1
        obs = self._observation()
        return StepResult(observation=obs, r_d=0.0, r_a=0.0, r_b=0.0, r_g=0.0,
                          reward=0.0, done=False, done_reason=None,
                          contact=ContactReport(), subgoal_index=self.k,
                          tip=self.state.tip.copy())

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeDone("step() called on a finished episode; reset() first")
        if isinstance(action, (int, np.integer)):
            action = action_from_index(int(action))
        elif isinstance(action, str):
            action = action_from_name(action)

        cfg = self.reward_cfg
        self.state, contact = apply_action(self.state, action, self.tree, self.robot_params)
        self.steps += 1

        tip = self.state.tip
        subgoal = self._current_subgoal()
        r_d = reward_distance(tip, subgoal)
        seg = self.tree.segments[self.path.segment_ids[self.k]]
        v1 = tip_orientation(self.state)
        v2 = segment_direction(seg)
        angle = angle_between(v1, v2)
        r_a = -float(np.expm1(angle / np.pi))

        dist_to_target = float(np.linalg.norm(tip - self.path.target))
        reached = dist_to_target <= cfg.reach_threshold
        reason = None
        r_b = 0.0
        r_g = 0.0
        if reached:
            r_g = cfg.goal_bonus
            reason = "reached"
        elif contact.max_force > cfg.force_threshold:
            r_b = cfg.break_penalty
            reason = "break_force"
        elif angle > cfg.angle_threshold:
            r_b = cfg.break_penalty
            reason = "break_angle"
        elif self.state.lost or self.path.distance_to_path(tip) > cfg.path_dist_threshold:
            r_b = cfg.break_penalty
            reason = "break_distance"
        elif self.steps >= self.env_cfg.step_cap:
            reason = "step_cap"

        total = cfg.w1 * r_d + cfg.w2 * r_a + r_b + r_g
        self.done = reason is not None
        self.done_reason = reason

        # bookkeeping
        rec = self.record
        rec.actions += 1
        rec.tip_travel = self.state.tip_travel
        rec.max_force = max(rec.max_force, contact.max_force)
        rec.mean_force_sum += contact.mean_force
        rec.total_reward += total
        rec.tips.append(tip.copy())
        if self.done:
            rec.finished = True
            rec.success = reason == "reached"

        self._advance_subgoal(tip)

        frame = self._render(self.state)
        self._frames.push(frame)
        self._frame_counter += 1
        return StepResult(observation=self._observation(), r_d=r_d, r_a=r_a,
                          r_b=r_b, r_g=r_g, reward=total, done=self.done,
                          done_reason=reason, contact=contact,
                          subgoal_index=self.k, tip=tip.copy(),
                          noop=self.state.last_noop)

    # -- helpers ---------------------------------------------------------------

    def _current_subgoal(self) -> np.ndarray:
        if self.k >= len(self.path.segment_ids) - 1:
            return self.path.target
        return self.path.subgoals[self.k]

    def _advance_subgoal(self, tip: np.ndarray) -> None:
        cfg = self.reward_cfg
        while self.k < len(self.path.segment_ids) - 1:
            near_goal = np.linalg.norm(tip - self.path.subgoals[self.k]) <= cfg.subgoal_capture
            seg_id, _, _, _ = self.tree.nearest_centerline_point(tip)
            entered_next = seg_id == self.path.segment_ids[self.k + 1]
            if near_goal or entered_next:
                self.k += 1
            else:
                break

    def _render(self, state: RobotState) -> Frame:
        return self.renderer.render(state.tip, tip_orientation(state),
                                    step=self._frame_counter)

    def _observation(self) -> Observation:
        stack = self._frames.get()
        ids = tuple(f.step for f in stack)
        backbone = backbone_observation(self.state, self.env_cfg.n_backbone,
                                        bbox=self.tree.bbox).astype(np.float32)
        return Observation(frames=self._frames.as_array(), backbone=backbone,
                           frame_ids=ids, step=self.steps)

    def metrics(self) -> dict:
        return episode_metrics(self.record)
