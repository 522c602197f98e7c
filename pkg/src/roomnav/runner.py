"""Closed-loop pipeline: mapping, training and navigation trials in the simulator."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence, TextIO

import numpy as np

from .frames import BackboneParams, Frame, MatchConfig, extract_feature
from .nav_policy import Command, NavState, Phase, PolicyConfig, initial_state, step
from .roomnet import (FeatureHistory, LabeledSequence, QueueConfig, RoomNetModel, TrainConfig,
                      TrainResult, classify_frame, infer, init_model, mask_with_graph, train)
from .simulator import (Episode, RecorderConfig, RobotPose, World, build_world, door_between,
                        door_crossing, euler_tour, mapping_scripts, perturb,
                        random_route, record_episode, render_frame, route_script, step_robot,
                        visible_landmarks)
from .topo_graph import TRANSIT_LABEL, RoomGraph, build_graph

if TYPE_CHECKING:
    from .config import RunConfig

log = logging.getLogger(__name__)


def record_mapping_episodes(world: World, rec: RecorderConfig = RecorderConfig(),
                            seed: int = 0) -> list[Episode]:
    return [record_episode(world, s, rec, seed=seed + i) for i, s in enumerate(mapping_scripts(world))]


def record_training_episodes(world: World, count: int, seed: int, hops: int = 3,
                             rec: RecorderConfig = RecorderConfig()) -> list[Episode]:
    """Random room-to-room tours with jittered spin points, one noise stream each."""
    rng = np.random.default_rng(seed)
    eps = []
    for i in range(count):
        route = random_route(world, rng, hops)
        script = route_script(world, route, rng=rng, jitter=0.6)
        eps.append(record_episode(world, script, rec, seed=seed * 1000 + 100 + i))
    return eps


def labeled_sequence(ep: Episode, backbone: BackboneParams, room_count: int) -> LabeledSequence:
    feats = np.stack([extract_feature(r.frame, backbone).vector for r in ep.records])
    labels = np.array([room_count if r.label == TRANSIT_LABEL else r.label for r in ep.records])
    return LabeledSequence(ep.timestamps, feats, labels)


def train_roomnet(episodes: Sequence[Episode], room_count: int, qcfg: QueueConfig,
                  hp: TrainConfig, backbone_seed: int, hidden: int = 32,
                  attention: int = 32) -> TrainResult:
    backbone = BackboneParams.from_seed(backbone_seed)
    model = init_model(room_count, backbone, hidden, attention, seed=hp.seed)
    seqs = [labeled_sequence(ep, backbone, room_count) for ep in episodes]
    return train(model, seqs, qcfg, hp)


def frame_accuracy(model: RoomNetModel, ep: Episode, qcfg: QueueConfig) -> float:
    from .roomnet import build_samples, forward

    seq = labeled_sequence(ep, model.backbone, model.room_count)
    shorts, longs, curs, labels = build_samples([seq], qcfg)
    pred = [int(np.argmax(forward(model.params, s, l, c)[0])) for s, l, c in zip(shorts, longs, curs)]
    return float(np.mean(np.asarray(pred) == labels))


@dataclass
class NavSystem:
    world: World
    model: RoomNetModel
    graph: RoomGraph
    qcfg: QueueConfig = QueueConfig()
    policy: PolicyConfig = PolicyConfig()
    match: MatchConfig = MatchConfig()
    rate: float = 10.0


@dataclass
class TrialResult:
    success: bool
    phase: Phase
    steps: int
    replans: int
    rooms_visited: list[int]
    plans: list[tuple[int, ...]]
    goal_room: int
    final_room: int
    replan_steps: list[int] = field(default_factory=list)

    @property
    def followed_plan(self) -> bool:
        """Rooms visited (ground truth) equal the first planned hierarchy."""
        return bool(self.plans) and self.rooms_visited == list(self.plans[0])

    def summary(self) -> dict:
        return {
            "success": self.success,
            "phase": self.phase.value,
            "steps": self.steps,
            "replans": self.replans,
            "rooms_visited": self.rooms_visited,
            "plans": [list(p) for p in self.plans],
            "goal_room": self.goal_room,
            "final_room": self.final_room,
        }


Override = Callable[[int, NavState, RobotPose], "Command | None"]


def run_navigation(system: NavSystem, start: RobotPose, goal_image: Frame, goal_room: int,
                   stream: int = 0, max_steps: int = 3000, override: Override | None = None,
                   trajectory: TextIO | None = None) -> TrialResult:
    """Drive the robot until GOAL_REACHED or ``max_steps``.

    ``override`` may replace the policy's command at any step (scripted
    disturbances).  Ground-truth poses are used only for the log and the
    outcome bookkeeping, never by the policy.
    """
    world, dt = system.world, 1.0 / system.rate
    history = FeatureHistory(system.qcfg)
    goal_prior = classify_frame(system.model, goal_image, system.qcfg).probs[:world.room_count]
    state = initial_state(goal_image, goal_prior)
    pose = start
    visited = [world.room_of(pose.x, pose.y)]
    plans: list[tuple[int, ...]] = []
    replan_steps = []
    k = 0
    for k in range(max_steps):
        t = k * dt
        frame = render_frame(world, pose, counter=k, timestamp=t, stream=stream)
        history.push(t, extract_feature(frame, system.model.backbone))
        inf = infer(system.model, history.queues())
        if state.anchor_room is not None:
            inf = mask_with_graph(inf, system.graph, state.anchor_room)
        prev_phase = state.phase
        state, cmd = step(state, frame, inf, system.graph, system.policy, system.match)
        if state.plan is not None and (not plans or plans[-1] != state.plan.hierarchy):
            plans.append(state.plan.hierarchy)
        if state.phase == Phase.REPLANNING and prev_phase != Phase.REPLANNING:
            replan_steps.append(k)
        if override is not None:
            forced = override(k, state, pose)
            if forced is not None:
                cmd = forced
        if trajectory is not None:
            trajectory.write(json.dumps({
                "t": round(t, 3),
                "pose": [round(pose.x, 5), round(pose.y, 5), round(pose.theta, 5)],
                "phase": state.phase.value,
                "room": inf.room_id,
                "p_m": round(inf.p_m, 6),
                "m_s": round(state.last_score, 6),
                "v": None if state.last_gradient is None else round(state.last_gradient, 6),
                "C_t": round(state.last_confidence, 6),
                "cmd": [round(cmd.linear, 6), round(cmd.angular, 6)],
            }) + "\n")
        if state.phase == Phase.GOAL_REACHED:
            break
        pose = step_robot(world, pose, cmd, dt)
        r = world.room_of(pose.x, pose.y)
        if r != visited[-1]:
            visited.append(r)
    final_room = world.room_of(pose.x, pose.y)
    reached = state.phase == Phase.GOAL_REACHED
    return TrialResult(
        success=reached and final_room == goal_room,
        phase=state.phase,
        steps=k + 1,
        replans=state.replans,
        rooms_visited=visited,
        plans=plans,
        goal_room=goal_room,
        final_room=final_room,
        replan_steps=replan_steps,
    )


def random_pose(world: World, room: int, rng: np.random.Generator, margin: float = 0.6) -> RobotPose:
    r = world.room(room)
    return RobotPose(
        float(rng.uniform(r.xmin + margin, r.xmax - margin)),
        float(rng.uniform(r.ymin + margin, r.ymax - margin)),
        float(rng.uniform(-math.pi, math.pi)),
    )


def make_goal_image(world: World, room: int, rng: np.random.Generator, stream: int,
                    min_keypoints: int = 8) -> tuple[Frame, RobotPose]:
    """A view from inside ``room`` showing only that room's landmarks."""
    for _ in range(1000):
        pose = random_pose(world, room, rng, margin=0.8)
        idx, _ = visible_landmarks(world, pose)
        if len(idx) >= min_keypoints and np.all(world.lm_room[idx] == room):
            return render_frame(world, pose, counter=0, stream=stream), pose
    raise RuntimeError(f"could not find a textured goal view in room {room}")


def detour_override(world: World, rooms: Sequence[int], lin_speed: float = 0.3,
                    rot_speed: float = 0.6) -> Override:
    """Scripted disturbance: once the policy has a plan, drive the robot along
    ``rooms`` (through the connecting doorways, ending at the last room's
    centre) using ground truth, then hand control back."""
    pts: list[tuple[float, float]] = []
    for a, b in zip(rooms, rooms[1:]):
        pts += [(x, y) for _, x, y in door_crossing(world, door_between(world, a, b), a)]
    pts.append(world.room(rooms[-1]).center)
    remaining = list(pts)
    started = [False]

    def override(k: int, state: NavState, pose: RobotPose) -> Command | None:
        if not remaining:
            return None
        if not started[0]:
            if state.plan is None:
                return None
            started[0] = True
        gx, gy = remaining[0]
        if math.hypot(gx - pose.x, gy - pose.y) < 0.1:
            remaining.pop(0)
            if not remaining:
                return None
            gx, gy = remaining[0]
        err = math.atan2(gy - pose.y, gx - pose.x) - pose.theta
        err = (err + math.pi) % (2 * math.pi) - math.pi
        w = float(np.clip(2.0 * err, -rot_speed, rot_speed))
        return Command(lin_speed if abs(err) < 0.3 else 0.0, w)

    return override


@dataclass(frozen=True)
class TrialSpec:
    seed: int
    start_room: int = 0
    goal_room: int = 3


def run_trial(system: NavSystem, spec: TrialSpec, max_steps: int = 3000,
              override: Override | None = None, trajectory: TextIO | None = None) -> TrialResult:
    rng = np.random.default_rng([spec.seed, 7])
    start = random_pose(system.world, spec.start_room, rng)
    goal, _ = make_goal_image(system.world, spec.goal_room, rng, stream=10_000 + spec.seed)
    return run_navigation(system, start, goal, spec.goal_room, stream=spec.seed,
                          max_steps=max_steps, override=override, trajectory=trajectory)


def build_system(world: World, mapping: Sequence[Episode], training: Sequence[Episode],
                 qcfg: QueueConfig, hp: TrainConfig, backbone_seed: int,
                 policy: PolicyConfig = PolicyConfig(), transit_window: float = 1.0) -> tuple[NavSystem, TrainResult]:
    graph = build_graph(mapping, window=transit_window, room_count=world.room_count)
    result = train_roomnet(training, world.room_count, qcfg, hp, backbone_seed)
    return NavSystem(world, result.model, graph, qcfg, policy), result


# -- pipeline stages driven by a RunConfig -------------------------------------

def build_run_world(cfg: RunConfig, perturb_level: float = 0.0) -> World:
    """The configured world, optionally perturbed after the fact (p = q = level)."""
    world = build_world(cfg.world_spec())
    if perturb_level > 0:
        world = perturb(world, perturb_level, perturb_level, cfg.sub_seed("perturb"))
    return world


def map_stage(cfg: RunConfig, world: World) -> tuple[list[Episode], RoomGraph]:
    episodes = record_mapping_episodes(world, cfg.recorder, seed=cfg.sub_seed("mapping"))
    graph = build_graph(episodes, window=cfg.map.transit_window,
                        keyframe_interval=cfg.map.keyframe_interval,
                        room_count=world.room_count, keyframe_margin=cfg.map.keyframe_margin)
    return episodes, graph


def train_stage(cfg: RunConfig, world: World, mapping: Sequence[Episode]) -> TrainResult:
    """Train RoomNet on the mapping tours plus ``cfg.train.episodes`` random tours."""
    extra = record_training_episodes(world, cfg.train.episodes, cfg.sub_seed("training"),
                                     hops=cfg.train.hops, rec=cfg.recorder)
    hp = TrainConfig(cfg.train.epochs, cfg.train.lr, cfg.sub_seed("init"), cfg.train.stride)
    return train_roomnet(list(mapping) + extra, world.room_count, cfg.queue, hp,
                         cfg.sub_seed("backbone"), cfg.train.hidden, cfg.train.attention)


def holdout_episode(cfg: RunConfig, world: World) -> Episode:
    """A jittered full tour with its own noise stream, never used for training."""
    seed = cfg.sub_seed("holdout")
    rng = np.random.default_rng(seed)
    script = route_script(world, euler_tour(world, world.room_count // 2), rng=rng, jitter=0.6)
    return record_episode(world, script, cfg.recorder, seed=1_000_000 + seed)


def make_system(cfg: RunConfig, world: World, model: RoomNetModel, graph: RoomGraph) -> NavSystem:
    return NavSystem(world, model, graph, cfg.queue, cfg.policy, cfg.match, cfg.recorder.rate)
