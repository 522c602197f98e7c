import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from roomnav.cli import cmd_map, cmd_train
from roomnav.config import RunConfig
from roomnav.frames import DESCRIPTOR_DIM, Frame
from roomnav.roomnet import load_model
from roomnav.runner import NavSystem, build_run_world, make_system
from roomnav.simulator import World, build_world, default_world_spec
from roomnav.topo_graph import TRANSIT_LABEL, load_graph

# lines printed by the acceptance tests, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_frame(ids, descriptors, positions=None, timestamp=0.0, frame_id=0) -> Frame:
    ids = np.asarray(ids)
    desc = np.asarray(descriptors, dtype=np.float64)
    if positions is None:
        positions = np.full((len(ids), 2), 0.5)
    return Frame(ids, positions, desc, timestamp, frame_id)


# synthetic rooms: room r owns keypoint ids r*1000+k with fixed random descriptors
ROOM_DESC = np.random.default_rng(99).standard_normal((8, 20, DESCRIPTOR_DIM))
ROOM_DESC /= np.linalg.norm(ROOM_DESC, axis=2, keepdims=True)


def room_frame(r, t, frac=1.0):
    """Frame showing ``frac`` of room ``r``'s landmarks."""
    n = max(1, int(round(20 * frac)))
    return make_frame(r * 1000 + np.arange(n), ROOM_DESC[r, :n], timestamp=t)


def doorway_frame(a, b, t):
    ids = np.concatenate([a * 1000 + np.arange(10), b * 1000 + np.arange(10)])
    return make_frame(ids, np.vstack([ROOM_DESC[a, :10], ROOM_DESC[b, :10]]), timestamp=t)


def synthetic_episode(rooms, dwell=80, transit=6, rate=10.0):
    """Records ``(frame, label)`` for a tour dwelling ``dwell`` ticks per room."""
    recs, k = [], 0
    for i, r in enumerate(rooms):
        for _ in range(dwell):
            recs.append((room_frame(r, k / rate), r))
            k += 1
        if i + 1 < len(rooms):
            for _ in range(transit):
                recs.append((doorway_frame(r, rooms[i + 1], k / rate), TRANSIT_LABEL))
                k += 1
    return recs


@pytest.fixture(scope="session")
def world() -> World:
    return build_world(default_world_spec(0))


@dataclass
class TrainedRun:
    cfg: RunConfig
    out: Path
    system: NavSystem
    seconds: float  # wall time of map + train


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory) -> TrainedRun:
    """Default configuration mapped and trained once through the CLI stages."""
    out = tmp_path_factory.mktemp("default_run")
    cfg = RunConfig(out=str(out))
    t0 = time.perf_counter()
    cmd_map(cfg)
    cmd_train(cfg)
    seconds = time.perf_counter() - t0
    system = make_system(cfg, build_run_world(cfg), load_model(out / "model.rnmd"),
                         load_graph(out / "graph.rngr"))
    return TrainedRun(cfg, out, system, seconds)
