"""Sparse room graph built from mapping episodes, plus Dijkstra planning.

Vertices are room ids ``0..m-1``.  Each undirected edge carries, per travel
direction, the frames recorded around the doorway crossing; these are the
intermediate visual goals the navigation policy seeks.  Each room also keeps a
thinned set of keyframes used to resolve which room a goal image belongs to.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from .frames import DESCRIPTOR_DIM, Frame, MatchConfig, match_frames, read_frame, write_frame

TRANSIT_LABEL = 255
GRAPH_MAGIC = b"RNGR"


class GraphError(ValueError):
    pass


class GoalNotRecognized(ValueError):
    def __init__(self, msg: str = "goal not recognized"):
        super().__init__(msg)


@dataclass(frozen=True, eq=False)
class RoomGraph:
    adjacency: np.ndarray
    transitions: Mapping[tuple[int, int], tuple[Frame, ...]]
    room_frames: Mapping[int, tuple[Frame, ...]]

    @property
    def room_count(self) -> int:
        return self.adjacency.shape[0]

    @property
    def rooms(self) -> range:
        return range(self.room_count)

    def neighbors(self, room: int) -> list[int]:
        return [int(r) for r in np.flatnonzero(self.adjacency[room])]

    def edges(self) -> list[tuple[int, int]]:
        m = self.room_count
        return [(a, b) for a in range(m) for b in range(a + 1, m) if self.adjacency[a, b]]

    def validate(self) -> None:
        adj = self.adjacency
        if not np.array_equal(adj, adj.T) or adj.diagonal().any():
            raise GraphError("adjacency must be symmetric with zero diagonal")
        for a, b in self.edges():
            if not self.transitions.get((a, b)) or not self.transitions.get((b, a)):
                raise GraphError(f"edge ({a}, {b}) lacks transition frames in both directions")
        if not is_connected(adj):
            raise GraphError("graph not connected")

    def __eq__(self, other):
        if not isinstance(other, RoomGraph):
            return NotImplemented
        return graph_to_bytes(self) == graph_to_bytes(other)

    __hash__ = None


@dataclass(frozen=True)
class Plan:
    hierarchy: tuple[int, ...]
    transition_targets: tuple[Frame, ...]
    goal_image: Frame
    goal_room: int

    def __post_init__(self):
        if len(self.transition_targets) != len(self.hierarchy) - 1:
            raise ValueError("need one transition target per hop")
        if self.hierarchy[-1] != self.goal_room:
            raise ValueError("hierarchy must end in the goal room")


def is_connected(adj: np.ndarray) -> bool:
    m = adj.shape[0]
    if m == 0:
        return False
    seen = {0}
    stack = [0]
    while stack:
        r = stack.pop()
        for n in np.flatnonzero(adj[r]):
            if n not in seen:
                seen.add(int(n))
                stack.append(int(n))
    return len(seen) == m


def build_graph(episodes: Sequence, window: float = 1.0, keyframe_interval: float = 1.0,
                room_count: int | None = None, keyframe_margin: float = 3.0) -> RoomGraph:
    """Build the room graph from labeled mapping episodes.

    Every change of room label (transit frames in between are skipped over)
    adds an edge.  The frames within ``window`` seconds of the crossing
    (midpoint of the transit run) become that direction's transition frames.
    Room keyframes are sampled every ``keyframe_interval`` seconds from frames
    at least ``keyframe_margin`` seconds away from any differently labeled
    frame, so they do not show the view through a doorway.

    ``episodes`` are sequences of ``(frame, label)`` pairs, or objects with a
    ``records`` attribute holding such records.
    """
    trans: dict[tuple[int, int], list[Frame]] = {}
    keyframes: dict[int, list[Frame]] = {}
    seen_rooms: set[int] = set()

    for ep in episodes:
        recs = [(r[0], int(r[1])) for r in getattr(ep, "records", ep)]
        if not recs:
            continue
        times = np.array([f.timestamp for f, _ in recs])
        labels = np.array([l for _, l in recs])
        last_room, last_idx = None, -1
        last_key: dict[int, float] = {}
        for i, (frame, label) in enumerate(recs):
            if label == TRANSIT_LABEL:
                continue
            seen_rooms.add(label)
            near = np.abs(times - frame.timestamp) < keyframe_margin
            interior = bool(np.all(labels[near] == label))
            if interior and (label not in last_key
                             or frame.timestamp - last_key[label] >= keyframe_interval - 1e-9):
                keyframes.setdefault(label, []).append(frame)
                last_key[label] = frame.timestamp
            if last_room is not None and label != last_room:
                t_cross = 0.5 * (times[last_idx] + times[i])
                sel = np.flatnonzero(np.abs(times - t_cross) <= window + 1e-9)
                trans.setdefault((last_room, label), []).extend(recs[j][0] for j in sel)
            last_room, last_idx = label, i

    if not seen_rooms:
        raise GraphError("no labeled frames")
    m = room_count if room_count is not None else max(seen_rooms) + 1
    missing = sorted(set(range(m)) - seen_rooms)
    if missing:
        raise GraphError(f"rooms with no episode coverage: {missing}")
    adj = np.zeros((m, m), dtype=bool)
    for a, b in trans:
        if a >= m or b >= m:
            raise GraphError(f"label {max(a, b)} outside room range")
        adj[a, b] = adj[b, a] = True
    # a doorway crossed one way only lends its frames to the other direction
    for a, b in list(trans):
        trans.setdefault((b, a), list(trans[(a, b)]))
    graph = RoomGraph(
        adj,
        {k: tuple(v) for k, v in sorted(trans.items())},
        {r: tuple(keyframes[r]) for r in range(m)},
    )
    graph.validate()
    return graph


def dijkstra(adj: np.ndarray, source: int, goal: int) -> list[int]:
    """Hop-count shortest path; at equal distance the lower room id is expanded
    first and keeps the predecessor slot."""
    m = adj.shape[0]
    dist = [np.inf] * m
    pred = [-1] * m
    dist[source] = 0
    heap = [(0, source)]
    done = [False] * m
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        if u == goal:
            break
        for v in np.flatnonzero(adj[u]):
            v = int(v)
            if d + 1 < dist[v]:
                dist[v] = d + 1
                pred[v] = u
                heapq.heappush(heap, (d + 1, v))
    if dist[goal] == np.inf:
        raise GraphError(f"room {goal} unreachable from {source}")
    path = [goal]
    while path[-1] != source:
        path.append(pred[path[-1]])
    return path[::-1]


def _top_mean(scores: list[float], k: int = 3) -> float:
    return float(np.mean(sorted(scores, reverse=True)[:k])) if scores else 0.0


def resolve_goal_room(graph: RoomGraph, goal_image: Frame, m_s0: float,
                      match_cfg: MatchConfig = MatchConfig(),
                      room_prior: np.ndarray | None = None) -> int:
    """Room whose keyframes best match the goal (mean of the top three scores).

    A keyframe is scored in both directions and the smaller share is kept: a
    frame looking through a doorway contains the goal, but the goal does not
    explain the rest of that frame.  Recognition itself only needs some
    keyframe to cover more than ``m_s0`` of the goal's keypoints.
    """
    best_room, best, best_any = -1, -1.0, 0.0
    for r in graph.rooms:
        fwd = [match_frames(goal_image, f, match_cfg).score for f in graph.room_frames[r]]
        rev = [match_frames(f, goal_image, match_cfg).score for f in graph.room_frames[r]]
        best_any = max([best_any] + fwd)
        s = _top_mean([min(a, b) for a, b in zip(fwd, rev)])
        if room_prior is not None:
            s *= float(room_prior[r])
        if s > best:
            best_room, best = r, s
    if best_any < m_s0:
        raise GoalNotRecognized()
    return best_room


def pick_transition_target(graph: RoomGraph, a: int, b: int,
                           match_cfg: MatchConfig = MatchConfig()) -> Frame:
    """Stored a->b transit frame most recognisable from inside room ``a``.

    Each candidate is scored by the mean of its top three matches against
    room ``a``'s keyframes; earliest frame wins ties.
    """
    frames = graph.transitions[(a, b)]
    room = graph.room_frames[a]
    best, best_s = frames[0], -1.0
    for f in frames:
        s = _top_mean([match_frames(f, k, match_cfg).score for k in room])
        if s > best_s:
            best, best_s = f, s
    return best


def _plan_to_room(graph: RoomGraph, source: int, goal_room: int, goal_image: Frame,
                  match_cfg: MatchConfig) -> Plan:
    if not 0 <= source < graph.room_count:
        raise GraphError(f"unknown room {source}")
    hierarchy = dijkstra(graph.adjacency, source, goal_room)
    targets = tuple(
        pick_transition_target(graph, a, b, match_cfg) for a, b in zip(hierarchy, hierarchy[1:])
    )
    return Plan(tuple(hierarchy), targets, goal_image, goal_room)


def plan(graph: RoomGraph, source: int, goal_image: Frame, m_s0: float = 0.35,
         match_cfg: MatchConfig = MatchConfig(), room_prior: np.ndarray | None = None) -> Plan:
    goal_room = resolve_goal_room(graph, goal_image, m_s0, match_cfg, room_prior)
    return _plan_to_room(graph, source, goal_room, goal_image, match_cfg)


def replan(graph: RoomGraph, current_room: int, existing: Plan,
           match_cfg: MatchConfig = MatchConfig()) -> Plan:
    return _plan_to_room(graph, current_room, existing.goal_room, existing.goal_image, match_cfg)


# -- persistence -------------------------------------------------------------

def write_graph(fh: BinaryIO, graph: RoomGraph) -> None:
    m = graph.room_count
    fh.write(GRAPH_MAGIC + struct.pack("<I", m))
    fh.write(graph.adjacency.astype("<u1").tobytes())
    for (a, b), frames in sorted(graph.transitions.items()):
        fh.write(struct.pack("<III", a, b, len(frames)))
        for f in frames:
            write_frame(fh, f)
    # room keyframes follow the directed edges
    for r in range(m):
        frames = graph.room_frames.get(r, ())
        fh.write(struct.pack("<II", r, len(frames)))
        for f in frames:
            write_frame(fh, f)


def read_graph(fh: BinaryIO, descriptor_dim: int = DESCRIPTOR_DIM) -> RoomGraph:
    if fh.read(4) != GRAPH_MAGIC:
        raise ValueError("not a room graph file")
    (m,) = struct.unpack("<I", fh.read(4))
    adj = np.frombuffer(fh.read(m * m), dtype="<u1").reshape(m, m).astype(bool)
    trans = {}
    for _ in range(int(adj.sum())):
        a, b, n = struct.unpack("<III", fh.read(12))
        trans[(a, b)] = tuple(read_frame(fh, descriptor_dim) for _ in range(n))
    rooms = {}
    for _ in range(m):
        r, n = struct.unpack("<II", fh.read(8))
        rooms[r] = tuple(read_frame(fh, descriptor_dim) for _ in range(n))
    return RoomGraph(adj, trans, rooms)


def graph_to_bytes(graph: RoomGraph) -> bytes:
    import io

    buf = io.BytesIO()
    write_graph(buf, graph)
    return buf.getvalue()


def save_graph(path: str | Path, graph: RoomGraph) -> None:
    Path(path).write_bytes(graph_to_bytes(graph))


def load_graph(path: str | Path, descriptor_dim: int = DESCRIPTOR_DIM) -> RoomGraph:
    with open(path, "rb") as fh:
        return read_graph(fh, descriptor_dim)
