"""Local navigation policy: a state machine driven by match scores and room inferences.

Phases::

    INIT_ROTATE -> SEEK -> APPROACH -> ADVANCE -> SEEK -> ... -> GOAL_REACHED
                     \\______ REPLANNING (from any active phase) ______/

The robot rotates in place until RoomNet is confident, plans a room
hierarchy, then repeatedly scans for the next visual target, servos toward
it, and declares arrival once the score trend turns down while the product
of score and room confidence is small.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .frames import Frame, MatchConfig, MatchResult, match_frames
from .roomnet import Inference
from .topo_graph import Plan, RoomGraph, plan, replan


class Phase(str, enum.Enum):
    INIT_ROTATE = "INIT_ROTATE"
    SEEK = "SEEK"
    APPROACH = "APPROACH"
    ADVANCE = "ADVANCE"
    GOAL_REACHED = "GOAL_REACHED"
    REPLANNING = "REPLANNING"


class StaleInputError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    m_s0: float = 0.35
    C_o: float = 1.5
    l: int = 5
    eta: float = 1.0
    smooth_w: int = 3
    replan_k: int | None = None  # defaults to l
    rot_speed: float = 0.6
    lin_speed: float = 0.3
    steer_gain: float = 1.5
    init_turn: float = 2 * math.pi  # radians swept in place before the first plan
    explore_time: float = 2.0  # seconds driven forward after a fruitless SEEK scan

    def __post_init__(self):
        if not 0.0 < self.m_s0 < 1.0:
            raise ValueError("m_s0 must lie in (0, 1)")
        if self.C_o <= 0:
            raise ValueError("C_o must be positive")
        if self.l < 1 or self.smooth_w < 1:
            raise ValueError("l and smooth_w must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.replan_k is not None and self.replan_k < 1:
            raise ValueError("replan_k must be >= 1")
        if self.rot_speed <= 0 or self.lin_speed <= 0:
            raise ValueError("speed bounds must be positive")
        if self.init_turn < 0 or self.explore_time < 0:
            raise ValueError("init_turn and explore_time must be non-negative")

    @property
    def replan_after(self) -> int:
        return self.l if self.replan_k is None else self.replan_k


@dataclass(frozen=True)
class Command:
    linear: float
    angular: float


STOP = Command(0.0, 0.0)


@dataclass(frozen=True, eq=False)
class NavState:
    goal_image: Frame
    goal_prior: np.ndarray | None = None  # room probabilities for the goal image
    phase: Phase = Phase.INIT_ROTATE
    plan: Plan | None = None
    target_index: int = 0
    score_history: tuple[float, ...] = ()
    room_window: tuple[int, ...] = ()
    off_plan_count: int = 0
    identified: bool = False  # m_s0 crossed for the current target
    anchor_room: int | None = None  # last room inferred with C_t >= C_o
    replan_room: int | None = None
    replans: int = 0
    last_timestamp: float | None = None
    start_timestamp: float | None = None
    # SEEK scan bookkeeping
    scan_start: float | None = None
    scan_best: float = -1.0
    explore_until: float | None = None
    # diagnostics of the latest step
    last_score: float = 0.0
    last_gradient: float | None = None
    last_confidence: float = 0.0

    @property
    def current_target(self) -> Frame | None:
        if self.plan is None:
            return None
        if self.target_index < len(self.plan.transition_targets):
            return self.plan.transition_targets[self.target_index]
        return self.plan.goal_image

    @property
    def seeking_goal(self) -> bool:
        return self.plan is not None and self.target_index == len(self.plan.transition_targets)


def confidence(room_window: Sequence[int], r: int) -> float:
    """Sum of exp(-|r - r_i|) over the window of recent room predictions."""
    if len(room_window) == 0:
        return 0.0
    w = np.asarray(room_window, dtype=np.float64)
    return float(np.exp(-np.abs(r - w)).sum())


def score_gradient(score_history: Sequence[float], eta: float, smooth_w: int) -> float | None:
    """eta * (mean of newest smooth_w scores - mean of the smooth_w before), or None if too short."""
    if len(score_history) < 2 * smooth_w:
        return None
    h = np.asarray(score_history[-2 * smooth_w:], dtype=np.float64)
    return float(eta * (h[smooth_w:].mean() - h[:smooth_w].mean()))


def arrival_check(v: float | None, m_s: float, c_t: float, cfg: PolicyConfig,
                  identified: bool = True) -> bool:
    if v is None or not identified:
        return False
    return v < 0 and m_s * c_t < cfg.C_o


def target_score(target: Frame, current: Frame, match_cfg: MatchConfig = MatchConfig()) -> MatchResult:
    # the stored target is the query: the score is the share of the target's
    # keypoints seen now, which peaks at the pose the target was taken from
    return match_frames(target, current, match_cfg)


def steer(res: MatchResult, cfg: PolicyConfig) -> Command:
    if len(res.pairs) == 0:
        return Command(cfg.lin_speed, 0.0)
    offset = 0.5 - float(res.target_positions[:, 0].mean())
    w = float(np.clip(cfg.steer_gain * offset, -cfg.rot_speed, cfg.rot_speed))
    return Command(cfg.lin_speed, w)


def _check_bounds(cmd: Command, cfg: PolicyConfig) -> Command:
    if abs(cmd.linear) > cfg.lin_speed + 1e-12 or abs(cmd.angular) > cfg.rot_speed + 1e-12:
        raise AssertionError(f"command {cmd} outside bounds")
    return cmd


def step(state: NavState, frame: Frame, inference: Inference, graph: RoomGraph,
         cfg: PolicyConfig = PolicyConfig(),
         match_cfg: MatchConfig = MatchConfig()) -> tuple[NavState, Command]:
    """Advance the policy by one frame; returns the new state and a velocity command."""
    if state.last_timestamp is not None and frame.timestamp <= state.last_timestamp:
        raise StaleInputError("frame timestamp did not advance")
    if inference.timestamp is not None and inference.timestamp != frame.timestamp:
        raise StaleInputError("inference does not belong to this frame")
    new, cmd = _transition(state, frame, inference, graph, cfg, match_cfg)
    return new, _check_bounds(cmd, cfg)


def _transition(state, frame, inference, graph, cfg, match_cfg):
    m = graph.room_count
    room = inference.room_id
    window = (state.room_window + (room,))[-(cfg.l + 1):]
    c_t = confidence(window, room)
    confident = c_t >= cfg.C_o and room < m
    s = replace(
        state,
        room_window=window,
        last_timestamp=frame.timestamp,
        start_timestamp=frame.timestamp if state.start_timestamp is None else state.start_timestamp,
        last_confidence=c_t,
        last_gradient=None,
        anchor_room=room if confident else state.anchor_room,
    )
    rotate = Command(0.0, cfg.rot_speed)

    if s.phase == Phase.GOAL_REACHED:
        return s, STOP

    if s.phase == Phase.REPLANNING:
        new_plan = replan(graph, s.replan_room, s.plan, match_cfg)
        return _retarget(s, Phase.SEEK, plan=new_plan, target_index=0, replan_room=None,
                         replans=s.replans + 1), STOP

    if s.plan is not None:
        # only confident inferences count towards (or reset) the off-plan run
        off = s.off_plan_count
        if confident:
            off = off + 1 if room not in s.plan.hierarchy else 0
        if off >= cfg.replan_after:
            return replace(s, phase=Phase.REPLANNING, off_plan_count=0, replan_room=room), STOP
        s = replace(s, off_plan_count=off)

    if s.phase == Phase.INIT_ROTATE:
        swept = (frame.timestamp - s.start_timestamp) * cfg.rot_speed
        if swept >= cfg.init_turn and len(window) == cfg.l + 1 and c_t >= 2 * cfg.C_o and room < m:
            p = plan(graph, room, s.goal_image, cfg.m_s0, match_cfg, s.goal_prior)
            s = _retarget(s, Phase.SEEK, plan=p, target_index=0)
        return s, rotate

    if s.phase == Phase.ADVANCE:
        return _retarget(s, Phase.SEEK, target_index=s.target_index + 1), rotate

    res = target_score(s.current_target, frame, match_cfg)
    s = replace(s, last_score=res.score)

    if s.phase == Phase.SEEK:
        if res.score > cfg.m_s0:
            return replace(s, phase=Phase.APPROACH, identified=True,
                           score_history=(res.score,)), steer(res, cfg)
        return _scan(s, res, frame, cfg)

    # APPROACH
    hist = (s.score_history + (res.score,))[-(4 * cfg.smooth_w):]
    v = score_gradient(hist, cfg.eta, cfg.smooth_w)
    smoothed = float(np.mean(hist[-cfg.smooth_w:]))
    s = replace(s, score_history=hist, last_gradient=v)
    if arrival_check(v, smoothed, c_t, cfg, s.identified):
        if not s.seeking_goal:
            return replace(s, phase=Phase.ADVANCE), STOP
        if s.anchor_room == s.plan.goal_room:
            return replace(s, phase=Phase.GOAL_REACHED), STOP
        # the goal was seen from a neighbouring room (e.g. through a doorway)
        return _retarget(s, Phase.SEEK), rotate
    return s, steer(res, cfg)


def _scan(s: NavState, res: MatchResult, frame: Frame, cfg: PolicyConfig):
    """Rotate in place; after a full fruitless turn, face the most promising
    heading seen (best score, then most keypoints) and drive a little."""
    t = frame.timestamp
    rotate = Command(0.0, cfg.rot_speed)
    forward = Command(cfg.lin_speed, 0.0)
    if s.explore_until is not None:
        if t < s.explore_until:
            return s, forward
        return replace(s, scan_start=t, scan_best=-1.0, explore_until=None), rotate
    start = t if s.scan_start is None else s.scan_start
    key = res.score + 1e-3 * len(frame)
    swept = (t - start) * cfg.rot_speed
    if swept < 2 * math.pi:
        return replace(s, scan_start=start, scan_best=max(s.scan_best, key)), rotate
    if key >= 0.95 * s.scan_best or swept >= 4 * math.pi:
        return replace(s, scan_start=start, explore_until=t + cfg.explore_time), forward
    return replace(s, scan_start=start), rotate


def _retarget(s: NavState, phase: Phase, **kw) -> NavState:
    return replace(s, phase=phase, score_history=(), identified=False, off_plan_count=0,
                   scan_start=None, scan_best=-1.0, explore_until=None, **kw)


def initial_state(goal_image: Frame, goal_prior: np.ndarray | None = None) -> NavState:
    return NavState(goal_image, goal_prior=goal_prior)


__all__ = [
    "Phase", "PolicyConfig", "Command", "NavState", "StaleInputError", "confidence",
    "score_gradient", "arrival_check", "target_score", "steer", "step", "initial_state", "STOP",
]
