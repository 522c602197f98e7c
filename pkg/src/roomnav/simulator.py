"""Deterministic synthetic multi-room world.

Rooms are axis-aligned rectangles that share walls; doorways are openings in
shared walls.  Every room owns ``L`` wall landmarks whose descriptors mix a
room-wide appearance direction with an individual component, so a room looks
consistent while single landmarks stay distinctive.  A pinhole-ish camera with
horizontal FOV ``fov`` and range ``range`` turns a pose into a :class:`Frame`.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .frames import (DESCRIPTOR_DIM, NULL_KEYPOINT_ID, Frame, null_descriptor, read_frame,
                     write_frame)
from .topo_graph import TRANSIT_LABEL, is_connected

EPISODE_MAGIC = b"RNEP"
CAMERA_HEIGHT = 1.0
VERTICAL_FOV = math.pi / 2


@dataclass(frozen=True)
class Room:
    id: int
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        return (self.xmin + margin <= x <= self.xmax - margin
                and self.ymin + margin <= y <= self.ymax - margin)


@dataclass(frozen=True)
class DoorSpec:
    a: int
    b: int
    width: float = 1.2
    at: float = 0.5  # position of the opening centre along the shared wall, as a fraction


@dataclass(frozen=True)
class Doorway:
    """Opening in the wall ``x = coord`` (vertical) or ``y = coord`` between rooms a and b."""

    a: int
    b: int
    vertical: bool
    coord: float
    lo: float
    hi: float

    @property
    def center(self) -> tuple[float, float]:
        mid = 0.5 * (self.lo + self.hi)
        return (self.coord, mid) if self.vertical else (mid, self.coord)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def other(self, room: int) -> int:
        return self.b if room == self.a else self.a

    def normal_from(self, room: Room) -> tuple[float, float]:
        """Unit normal pointing out of ``room`` through the opening."""
        cx, cy = room.center
        if self.vertical:
            return (1.0, 0.0) if self.coord > cx else (-1.0, 0.0)
        return (0.0, 1.0) if self.coord > cy else (0.0, -1.0)


@dataclass(frozen=True)
class WorldSpec:
    rooms: tuple[Room, ...]
    doors: tuple[DoorSpec, ...]
    landmarks_per_room: int = 40
    seed: int = 0
    p: float = 0.0
    q: float = 0.0
    perturb_seed: int = 1
    fov: float = math.pi / 2
    range: float = 6.0
    noise_sigma: float = 0.03
    style_weight: float = 0.6
    door_view_radius: float = 2.5
    descriptor_dim: int = DESCRIPTOR_DIM

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("rooms", "doors")}
        d["rooms"] = [[r.id, r.xmin, r.ymin, r.xmax, r.ymax] for r in self.rooms]
        d["doors"] = [{"rooms": [s.a, s.b], "width": s.width, "at": s.at} for s in self.doors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        rooms = tuple(Room(int(r[0]), *map(float, r[1:])) for r in d.pop("rooms"))
        doors = tuple(
            DoorSpec(int(s["rooms"][0]), int(s["rooms"][1]), float(s.get("width", 1.2)),
                     float(s.get("at", 0.5)))
            for s in d.pop("doors")
        )
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown world spec keys: {sorted(unknown)}")
        return cls(rooms, doors, **d)


def default_world_spec(seed: int = 0, size: float = 3.0) -> WorldSpec:
    """Four rooms in a 2x2 block; the doorway graph is the 4-cycle 0-1-2-3-0."""
    s = size
    rooms = (
        Room(0, 0.0, 0.0, s, s),
        Room(1, s, 0.0, 2 * s, s),
        Room(2, s, s, 2 * s, 2 * s),
        Room(3, 0.0, s, s, 2 * s),
    )
    doors = (DoorSpec(0, 1), DoorSpec(1, 2), DoorSpec(2, 3), DoorSpec(3, 0))
    return WorldSpec(rooms, doors, seed=seed)


def load_world_spec(path: str | Path) -> WorldSpec:
    return WorldSpec.from_dict(json.loads(Path(path).read_text()))


def save_world_spec(path: str | Path, spec: WorldSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def _make_doorway(rooms: dict[int, Room], spec: DoorSpec) -> Doorway:
    ra, rb = rooms[spec.a], rooms[spec.b]
    eps = 1e-9
    if abs(ra.xmax - rb.xmin) < eps or abs(rb.xmax - ra.xmin) < eps:
        coord = ra.xmax if abs(ra.xmax - rb.xmin) < eps else ra.xmin
        lo, hi = max(ra.ymin, rb.ymin), min(ra.ymax, rb.ymax)
        vertical = True
    elif abs(ra.ymax - rb.ymin) < eps or abs(rb.ymax - ra.ymin) < eps:
        coord = ra.ymax if abs(ra.ymax - rb.ymin) < eps else ra.ymin
        lo, hi = max(ra.xmin, rb.xmin), min(ra.xmax, rb.xmax)
        vertical = False
    else:
        raise ValueError(f"rooms {spec.a} and {spec.b} share no wall")
    if hi - lo < spec.width:
        raise ValueError(f"door between {spec.a} and {spec.b} wider than shared wall")
    mid = lo + spec.at * (hi - lo)
    mid = min(max(mid, lo + spec.width / 2), hi - spec.width / 2)
    return Doorway(spec.a, spec.b, vertical, coord, mid - spec.width / 2, mid + spec.width / 2)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class World:
    spec: WorldSpec
    doorways: tuple[Doorway, ...]
    styles: np.ndarray          # (m, D) room appearance directions
    lm_ids: np.ndarray          # (N,)
    lm_room: np.ndarray         # (N,)
    lm_xy: np.ndarray           # (N, 2)
    lm_height: np.ndarray       # (N,)
    lm_desc: np.ndarray         # (N, D) base descriptors, unit rows
    lm_individual: np.ndarray   # (N, D) individual component before mixing

    @property
    def rooms(self) -> tuple[Room, ...]:
        return self.spec.rooms

    @property
    def room_count(self) -> int:
        return len(self.spec.rooms)

    def room(self, rid: int) -> Room:
        return self.spec.rooms[rid]

    def doors_of(self, rid: int) -> list[Doorway]:
        return [d for d in self.doorways if rid in (d.a, d.b)]

    def adjacency(self) -> np.ndarray:
        m = self.room_count
        adj = np.zeros((m, m), dtype=bool)
        for d in self.doorways:
            adj[d.a, d.b] = adj[d.b, d.a] = True
        return adj

    def room_of(self, x: float, y: float) -> int:
        for r in self.rooms:
            if r.xmin <= x < r.xmax and r.ymin <= y < r.ymax:
                return r.id
        return min(self.rooms, key=lambda r: math.hypot(
            x - min(max(x, r.xmin), r.xmax), y - min(max(y, r.ymin), r.ymax))).id

    def hash(self) -> bytes:
        h = hashlib.sha256()
        for r in self.rooms:
            h.update(struct.pack("<i4d", r.id, r.xmin, r.ymin, r.xmax, r.ymax))
        for d in self.doorways:
            h.update(struct.pack("<ii?3d", d.a, d.b, d.vertical, d.coord, d.lo, d.hi))
        for arr in (self.lm_ids, self.lm_room, self.lm_xy, self.lm_height, self.lm_desc):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.digest()

    def doorway_hash(self) -> bytes:
        return hashlib.sha256(self.adjacency().tobytes()).digest()


def _wall_segments(room: Room, doors: Sequence[Doorway], gap: float = 0.1):
    """Free wall pieces of ``room`` as (x0, y0, x1, y1), openings removed."""
    walls = [
        (True, room.xmin, room.ymin, room.ymax),
        (True, room.xmax, room.ymin, room.ymax),
        (False, room.ymin, room.xmin, room.xmax),
        (False, room.ymax, room.xmin, room.xmax),
    ]
    segs = []
    for vertical, coord, lo, hi in walls:
        cuts = sorted(
            (d.lo - gap, d.hi + gap) for d in doors
            if d.vertical == vertical and abs(d.coord - coord) < 1e-9
        )
        start = lo
        for c0, c1 in cuts + [(hi, hi)]:
            if c0 > start:
                segs.append((vertical, coord, start, min(c0, hi)))
            start = max(start, c1)
    return segs


def _sample_wall_points(room: Room, doors: Sequence[Doorway], n: int, rng: np.random.Generator,
                        inset: float = 0.05) -> np.ndarray:
    segs = _wall_segments(room, doors)
    lengths = np.array([s[3] - s[2] for s in segs])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    u = rng.uniform(0.0, cum[-1], size=n)
    pts = np.empty((n, 2))
    cx, cy = room.center
    for k, t in enumerate(u):
        i = min(int(np.searchsorted(cum, t, side="right")) - 1, len(segs) - 1)
        vertical, coord, lo, _ = segs[i]
        along = lo + (t - cum[i])
        if vertical:
            pts[k] = (coord + (inset if coord < cx else -inset), along)
        else:
            pts[k] = (along, coord + (inset if coord < cy else -inset))
    return pts


def build_world(spec: WorldSpec) -> World:
    rooms = {r.id: r for r in spec.rooms}
    if sorted(rooms) != list(range(len(rooms))):
        raise ValueError("room ids must be 0..m-1")
    if not (0.0 <= spec.p <= 1.0 and 0.0 <= spec.q <= 1.0):
        raise ValueError("perturbation fractions must lie in [0, 1]")
    for i, a in enumerate(spec.rooms):
        for b in spec.rooms[i + 1:]:
            if a.xmin < b.xmax and b.xmin < a.xmax and a.ymin < b.ymax and b.ymin < a.ymax:
                raise ValueError(f"rooms {a.id} and {b.id} overlap")
    doorways = tuple(_make_doorway(rooms, s) for s in spec.doors)
    adj = np.zeros((len(rooms), len(rooms)), dtype=bool)
    for d in doorways:
        if d.a == d.b or adj[d.a, d.b]:
            raise ValueError(f"invalid or duplicate doorway between {d.a} and {d.b}")
        adj[d.a, d.b] = adj[d.b, d.a] = True
    if not is_connected(adj):
        raise ValueError("graph not connected")
    D, L = spec.descriptor_dim, spec.landmarks_per_room
    rng = np.random.default_rng(spec.seed)
    styles = _unit_rows(rng.standard_normal((len(rooms), D)))
    ids, room_ix, xy, height, indiv = [], [], [], [], []
    for r in spec.rooms:
        own = [d for d in doorways if r.id in (d.a, d.b)]
        xy.append(_sample_wall_points(r, own, L, rng))
        height.append(rng.uniform(0.3, 1.7, size=L))
        indiv.append(_unit_rows(rng.standard_normal((L, D))))
        ids.append(r.id * 1000 + np.arange(L))
        room_ix.append(np.full(L, r.id))
    lm_room = np.concatenate(room_ix)
    indiv = np.concatenate(indiv)
    world = World(
        spec, doorways, styles,
        np.concatenate(ids).astype(np.uint32), lm_room, np.concatenate(xy),
        np.concatenate(height), _mix(styles[lm_room], indiv, spec.style_weight), indiv,
    )
    if spec.p > 0 or spec.q > 0:
        world = perturb(world, spec.p, spec.q, spec.perturb_seed)
    return world


def _mix(style: np.ndarray, indiv: np.ndarray, w: float) -> np.ndarray:
    return _unit_rows(w * style + math.sqrt(1.0 - w * w) * indiv)


def perturb(world: World, p: float, q: float, seed: int) -> World:
    """Resample round(p*L) descriptors and displace round(q*L) landmarks per room.

    Room geometry and doorways are untouched.  Resampled landmarks keep their
    room's appearance direction.
    """
    if not (0.0 <= p <= 1.0 and 0.0 <= q <= 1.0):
        raise ValueError("perturbation fractions must lie in [0, 1]")
    if p == 0 and q == 0:
        return world
    rng = np.random.default_rng(seed)
    indiv = world.lm_individual.copy()
    xy = world.lm_xy.copy()
    for r in world.rooms:
        idx = np.flatnonzero(world.lm_room == r.id)
        n_p, n_q = int(round(p * len(idx))), int(round(q * len(idx)))
        re = rng.choice(idx, size=n_p, replace=False)
        indiv[re] = _unit_rows(rng.standard_normal((n_p, indiv.shape[1])))
        mv = rng.choice(idx, size=n_q, replace=False)
        xy[mv] = _sample_wall_points(r, world.doors_of(r.id), n_q, rng)
    desc = _mix(world.styles[world.lm_room], indiv, world.spec.style_weight)
    return replace(world, lm_xy=xy, lm_desc=desc, lm_individual=indiv,
                   spec=replace(world.spec, p=p, q=q, perturb_seed=seed))


# -- sensing -----------------------------------------------------------------

@dataclass(frozen=True)
class RobotPose:
    x: float
    y: float
    theta: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _through_door(door: Doorway, x0: float, y0: float, pts: np.ndarray) -> np.ndarray:
    """Mask of points whose sight line from (x0, y0) passes the opening."""
    if door.vertical:
        o0, o1, c0, c1 = x0, pts[:, 0], y0, pts[:, 1]
    else:
        o0, o1, c0, c1 = y0, pts[:, 1], x0, pts[:, 0]
    denom = o1 - o0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (door.coord - o0) / denom
    cross = c0 + t * (c1 - c0)
    return (t > 0) & (t < 1) & (cross >= door.lo) & (cross <= door.hi)


def visible_landmarks(world: World, pose: RobotPose) -> tuple[np.ndarray, np.ndarray]:
    """Indices of visible landmarks and their (u, v) image positions."""
    spec = world.spec
    rid = world.room_of(pose.x, pose.y)
    cand = [np.flatnonzero(world.lm_room == rid)]
    for door in world.doors_of(rid):
        cx, cy = door.center
        if math.hypot(pose.x - cx, pose.y - cy) > spec.door_view_radius:
            continue
        idx = np.flatnonzero(world.lm_room == door.other(rid))
        cand.append(idx[_through_door(door, pose.x, pose.y, world.lm_xy[idx])])
    idx = np.concatenate(cand)
    d = world.lm_xy[idx] - (pose.x, pose.y)
    dist = np.hypot(d[:, 0], d[:, 1])
    bearing = _wrap(np.arctan2(d[:, 1], d[:, 0]) - pose.theta)
    elev = np.arctan2(world.lm_height[idx] - CAMERA_HEIGHT, np.maximum(dist, 1e-9))
    ok = (dist <= spec.range) & (np.abs(bearing) <= spec.fov / 2) & (np.abs(elev) <= VERTICAL_FOV / 2)
    idx, bearing, elev = idx[ok], bearing[ok], elev[ok]
    uv = np.stack([0.5 - bearing / spec.fov, 0.5 - elev / VERTICAL_FOV], axis=1)
    order = np.argsort(world.lm_ids[idx], kind="stable")
    return idx[order], np.clip(uv[order], 0.0, 1.0)


def render_frame(world: World, pose: RobotPose, counter: int = 0, timestamp: float = 0.0,
                 stream: int = 0) -> Frame:
    """Frame seen from ``pose``; noise is a pure function of (world seed, stream, counter)."""
    idx, uv = visible_landmarks(world, pose)
    D = world.spec.descriptor_dim
    if len(idx) == 0:
        return Frame(np.array([NULL_KEYPOINT_ID]), np.array([[0.5, 0.5]]),
                     null_descriptor(D)[None, :], timestamp, counter)
    rng = np.random.default_rng([world.spec.seed, stream, counter])
    noisy = world.lm_desc[idx] + world.spec.noise_sigma * rng.standard_normal((len(idx), D))
    return Frame(world.lm_ids[idx], uv, _unit_rows(noisy), timestamp, counter)


# -- kinematics ----------------------------------------------------------------

ROBOT_RADIUS = 0.15


def is_free(world: World, x: float, y: float, margin: float = ROBOT_RADIUS) -> bool:
    for r in world.rooms:
        if r.contains(x, y, margin):
            return True
    for d in world.doorways:
        along, across = (y, x) if d.vertical else (x, y)
        if d.lo + margin <= along <= d.hi - margin and abs(across - d.coord) <= margin + 1e-6:
            return True
    return False


def step_robot(world: World, pose: RobotPose, cmd, dt: float) -> RobotPose:
    """Unicycle update; translation that would enter a wall slides or stops."""
    if hasattr(cmd, "linear"):
        v, w = cmd.linear, cmd.angular
    else:
        v, w = cmd
    dx = v * math.cos(pose.theta) * dt
    dy = v * math.sin(pose.theta) * dt
    x, y = pose.x, pose.y
    n = max(1, int(math.ceil(math.hypot(dx, dy) / 0.05)))
    sx, sy = dx / n, dy / n
    for _ in range(n):
        if is_free(world, x + sx, y + sy):
            x, y = x + sx, y + sy
        elif is_free(world, x + sx, y):
            x += sx
        elif is_free(world, x, y + sy):
            y += sy
        else:
            break
    theta = float(_wrap(pose.theta + w * dt))
    return RobotPose(x, y, theta)


# -- recording -----------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeRecord:
    frame: Frame
    label: int
    pose: tuple[float, float, float]

    def __iter__(self):
        return iter((self.frame, self.label, self.pose))

    def __getitem__(self, i):
        return (self.frame, self.label, self.pose)[i]


@dataclass(frozen=True)
class Episode:
    records: tuple[EpisodeRecord, ...]
    seed: int
    world_hash: bytes

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([r.frame.timestamp for r in self.records])

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return episode_to_bytes(self) == episode_to_bytes(other)

    __hash__ = None


@dataclass(frozen=True)
class RecorderConfig:
    rate: float = 10.0
    speed: float = 0.3
    turn_rate: float = 0.8
    transit_window: float = 1.0


def _follow(world: World, pose: RobotPose, script, cfg: RecorderConfig) -> list[RobotPose]:
    """Poses at every tick of a scripted tour of ``goto``/``spin`` steps."""
    dt = 1.0 / cfg.rate
    poses = [pose]
    for step in script:
        kind = step[0]
        if kind == "spin":
            remaining = float(step[1])
            while abs(remaining) > 1e-9:
                dth = math.copysign(min(abs(remaining), cfg.turn_rate * dt), remaining)
                pose = step_robot(world, pose, (0.0, dth / dt), dt)
                remaining -= dth
                poses.append(pose)
        elif kind == "goto":
            gx, gy = float(step[1]), float(step[2])
            for _ in range(100000):
                dist = math.hypot(gx - pose.x, gy - pose.y)
                if dist < 1e-3:
                    break
                err = float(_wrap(math.atan2(gy - pose.y, gx - pose.x) - pose.theta))
                if abs(err) > 1e-3:
                    dth = math.copysign(min(abs(err), cfg.turn_rate * dt), err)
                    pose = step_robot(world, pose, (0.0, dth / dt), dt)
                else:
                    v = min(cfg.speed, dist / dt)
                    nxt = step_robot(world, pose, (v, 0.0), dt)
                    if (nxt.x, nxt.y) == (pose.x, pose.y):
                        raise ValueError(f"scripted path blocked at ({pose.x:.2f}, {pose.y:.2f})")
                    pose = nxt
                poses.append(pose)
        else:
            raise ValueError(f"unknown script step {kind!r}")
    return poses


def label_poses(world: World, poses: Sequence[RobotPose], times: np.ndarray,
                transit_window: float) -> np.ndarray:
    rooms = np.array([world.room_of(p.x, p.y) for p in poses])
    labels = rooms.copy()
    change = np.flatnonzero(rooms[1:] != rooms[:-1])
    for c in change:
        t_cross = 0.5 * (times[c] + times[c + 1])
        labels[np.abs(times - t_cross) <= transit_window / 2 + 1e-9] = TRANSIT_LABEL
    return labels


def record_episode(world: World, script: Sequence, cfg: RecorderConfig = RecorderConfig(),
                   start: RobotPose | None = None, seed: int = 0, t0: float = 0.0) -> Episode:
    """Drive a scripted tour and record labelled frames at ``cfg.rate``.

    Labels come from ground truth: the occupied room, or ``TRANSIT_LABEL``
    within ``transit_window / 2`` seconds of a doorway crossing.
    """
    if start is None:
        first = next(s for s in script if s[0] == "goto")
        start = RobotPose(float(first[1]), float(first[2]), 0.0)
    poses = _follow(world, start, script, cfg)
    times = t0 + np.arange(len(poses)) / cfg.rate
    labels = label_poses(world, poses, times, cfg.transit_window)
    recs = []
    for i, (pose, lab, t) in enumerate(zip(poses, labels, times)):
        frame = render_frame(world, pose, counter=i, timestamp=float(t), stream=seed)
        p32 = tuple(float(v) for v in np.array(pose.as_tuple(), dtype=np.float32))
        recs.append(EpisodeRecord(frame, int(lab), p32))
    return Episode(tuple(recs), seed, world.hash())


# -- tour scripts --------------------------------------------------------------

def door_crossing(world: World, door: Doorway, frm: int, approach: float = 1.0) -> list:
    nx, ny = door.normal_from(world.room(frm))
    cx, cy = door.center
    return [("goto", cx - approach * nx, cy - approach * ny),
            ("goto", cx + approach * nx, cy + approach * ny)]


def door_between(world: World, a: int, b: int) -> Doorway:
    for d in world.doorways:
        if {d.a, d.b} == {a, b}:
            return d
    raise ValueError(f"no doorway between {a} and {b}")


def euler_tour(world: World, start: int = 0) -> list[int]:
    """Room sequence traversing every doorway once in each direction."""
    arcs = {r.id: sorted(world.adjacency()[r.id].nonzero()[0].tolist(), reverse=True)
            for r in world.rooms}
    stack, out = [start], []
    while stack:
        u = stack[-1]
        if arcs[u]:
            stack.append(arcs[u].pop())
        else:
            out.append(stack.pop())
    return out[::-1]


def route_script(world: World, rooms: Sequence[int], spin: float = 2 * math.pi,
                 rng: np.random.Generator | None = None, jitter: float = 0.0) -> list:
    """Visit ``rooms`` in order, spinning at a (jittered) interior point of each."""
    script = []
    for i, r in enumerate(rooms):
        cx, cy = world.room(r).center
        if rng is not None and jitter > 0:
            cx += rng.uniform(-jitter, jitter)
            cy += rng.uniform(-jitter, jitter)
        script.append(("goto", cx, cy))
        if spin:
            s = spin if rng is None else spin * rng.uniform(0.5, 1.25) * rng.choice([-1, 1])
            script.append(("spin", s))
        if i + 1 < len(rooms):
            script += door_crossing(world, door_between(world, r, rooms[i + 1]), r)
    return script


def mapping_scripts(world: World) -> list[list]:
    """One tour per connected component; each covers every doorway both ways."""
    adj = world.adjacency()
    seen: set[int] = set()
    scripts = []
    for r in world.rooms:
        if r.id in seen:
            continue
        tour = euler_tour(world, r.id)
        seen.update(tour)
        scripts.append(route_script(world, tour))
    return scripts


def random_route(world: World, rng: np.random.Generator, hops: int, start: int | None = None) -> list[int]:
    adj = world.adjacency()
    r = int(rng.integers(world.room_count)) if start is None else start
    rooms = [r]
    for _ in range(hops):
        nbrs = np.flatnonzero(adj[r])
        if len(nbrs) == 0:
            break
        r = int(rng.choice(nbrs))
        rooms.append(r)
    return rooms


# -- episode files -------------------------------------------------------------

_REC_TAIL = struct.Struct("<B3f")


def write_episode(fh: BinaryIO, ep: Episode) -> None:
    fh.write(EPISODE_MAGIC + ep.world_hash + struct.pack("<Q", ep.seed))
    for r in ep.records:
        write_frame(fh, r.frame)
        fh.write(_REC_TAIL.pack(r.label, *r.pose))


def read_episode(fh: BinaryIO, descriptor_dim: int = DESCRIPTOR_DIM) -> Episode:
    if fh.read(4) != EPISODE_MAGIC:
        raise ValueError("not an episode file")
    world_hash = fh.read(32)
    (seed,) = struct.unpack("<Q", fh.read(8))
    recs = []
    while True:
        peek = fh.read(1)
        if not peek:
            break
        fh.seek(-1, io.SEEK_CUR)
        frame = read_frame(fh, descriptor_dim)
        label, x, y, th = _REC_TAIL.unpack(fh.read(_REC_TAIL.size))
        recs.append(EpisodeRecord(frame, label, (x, y, th)))
    return Episode(tuple(recs), seed, world_hash)


def episode_to_bytes(ep: Episode) -> bytes:
    buf = io.BytesIO()
    write_episode(buf, ep)
    return buf.getvalue()


def save_episode(path: str | Path, ep: Episode) -> None:
    Path(path).write_bytes(episode_to_bytes(ep))


def load_episode(path: str | Path, descriptor_dim: int = DESCRIPTOR_DIM) -> Episode:
    with open(path, "rb") as fh:
        return read_episode(fh, descriptor_dim)
