import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import room_frame, synthetic_episode
from roomnav.nav_policy import (STOP, Command, NavState, Phase, PolicyConfig, StaleInputError,
                                arrival_check, confidence, initial_state, score_gradient, step)
from roomnav.roomnet import Inference
from roomnav.topo_graph import build_graph, plan


@pytest.fixture(scope="module")
def chain():
    return build_graph([synthetic_episode([0, 1, 2, 3, 2, 1, 0])])


def sure(room, t, m=4):
    p = np.full(m + 1, 0.01)
    p[room] = 1.0
    return Inference.from_probs(p / p.sum(), t)


GOAL = room_frame(3, 0.0, 0.6)


# -- confidence -----------------------------------------------------------------

def test_confidence_examples():
    assert confidence([4] * 6, 4) == 6.0
    assert confidence([3, 3, 2], 3) == pytest.approx(2 + math.exp(-1), abs=1e-9)
    assert confidence([0, 4, 4], 0) == pytest.approx(1 + 2 * math.exp(-4), abs=1e-12)
    assert confidence([], 2) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.integers(0, 6), st.data())
def test_confidence_peaks_on_unanimous_window(n, r, data):
    window = [r] * n
    full = confidence(window, r)
    assert full == n
    i = data.draw(st.integers(0, n - 1))
    other = data.draw(st.integers(0, 6).filter(lambda x: x != r))
    window[i] = other
    assert 0 < confidence(window, r) < full


# -- score gradient and arrival ---------------------------------------------------

def test_score_gradient_examples():
    assert score_gradient([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 1.0, 3) > 0
    assert score_gradient([0.4] * 6, 1.0, 3) == 0.0
    assert score_gradient([0.9, 0.6, 0.5], 2.0, 1) == pytest.approx(-0.2)
    assert score_gradient([0.1, 0.2], 1.0, 3) is None


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=6, max_size=20), st.floats(0.01, 100))
def test_gradient_sign_does_not_depend_on_eta(hist, eta):
    a = score_gradient(hist, 1.0, 3)
    b = score_gradient(hist, eta, 3)
    assert np.sign(a) == np.sign(b)


def test_arrival_examples():
    cfg = PolicyConfig()
    assert not arrival_check(0.1, 0.1, 1.0, cfg)
    assert not arrival_check(-0.05, 0.9, 6.0, cfg)
    assert arrival_check(-0.05, 0.3, 3.0, cfg)
    assert not arrival_check(-0.05, 0.3, 3.0, cfg, identified=False)
    assert not arrival_check(None, 0.0, 0.0, cfg)


def test_config_validation():
    for bad in ({"m_s0": 1.0}, {"C_o": 0}, {"l": 0}, {"smooth_w": 0}, {"eta": 0},
                {"replan_k": 0}, {"rot_speed": 0}, {"init_turn": -1}):
        with pytest.raises(ValueError):
            PolicyConfig(**bad)
    assert PolicyConfig().replan_after == 5
    assert PolicyConfig(replan_k=2).replan_after == 2


# -- step -------------------------------------------------------------------------

def test_first_step_rotates_in_place(chain):
    cfg = PolicyConfig()
    s, cmd = step(initial_state(GOAL), room_frame(0, 0.0), sure(0, 0.0), chain, cfg)
    assert s.phase == Phase.INIT_ROTATE
    assert cmd == Command(0.0, cfg.rot_speed)


def test_init_rotation_sweeps_before_planning(chain):
    cfg = PolicyConfig()
    s = initial_state(GOAL)
    t = 0.0
    while s.phase == Phase.INIT_ROTATE:
        s, cmd = step(s, room_frame(0, t), sure(0, t), chain, cfg)
        assert cmd == Command(0.0, cfg.rot_speed)
        t = round(t + 0.1, 10)
    assert t * cfg.rot_speed >= cfg.init_turn
    assert s.phase == Phase.SEEK
    assert s.plan.hierarchy == (0, 1, 2, 3)


def test_init_waits_for_a_confident_window(chain):
    cfg = PolicyConfig(init_turn=0.0, l=2)
    s = initial_state(GOAL)
    for k in range(30):  # cycling rooms keep C_t below 2 C_o
        s, _ = step(s, room_frame(0, k * 0.1), sure(k % 4, k * 0.1), chain, cfg)
        assert s.last_confidence < 2 * cfg.C_o
    assert s.phase == Phase.INIT_ROTATE


def approaching(chain, room, hierarchy_from, history, target_index=None):
    p = plan(chain, hierarchy_from, GOAL)
    idx = len(p.transition_targets) if target_index is None else target_index
    return NavState(GOAL, phase=Phase.APPROACH, plan=p, target_index=idx,
                    score_history=tuple(history), room_window=(room,) * 5, identified=True,
                    anchor_room=room, last_timestamp=0.0, start_timestamp=0.0)


FALLING = (0.9, 0.9, 0.9, 0.3, 0.1)


def test_fabricated_arrival_on_goal_stops(chain):
    s = approaching(chain, 3, 3, FALLING)
    s, cmd = step(s, room_frame(2, 0.1), sure(3, 0.1), chain)
    assert s.phase == Phase.GOAL_REACHED
    assert cmd == STOP
    # absorbing
    s, cmd = step(s, room_frame(3, 0.2), sure(3, 0.2), chain)
    assert (s.phase, cmd) == (Phase.GOAL_REACHED, STOP)


def test_goal_seen_from_another_room_keeps_seeking(chain):
    s = approaching(chain, 2, 2, FALLING)
    s, cmd = step(s, room_frame(1, 0.1), sure(2, 0.1), chain)
    assert s.phase == Phase.SEEK
    assert cmd.linear == 0.0


def test_intermediate_arrival_advances(chain):
    s = approaching(chain, 0, 0, FALLING, target_index=0)
    s, cmd = step(s, room_frame(3, 0.1), sure(0, 0.1), chain)
    assert s.phase == Phase.ADVANCE and cmd == STOP
    s, _ = step(s, room_frame(0, 0.2), sure(0, 0.2), chain)
    assert s.phase == Phase.SEEK and s.target_index == 1


def test_no_arrival_while_score_is_high(chain):
    s = approaching(chain, 3, 3, (0.9, 0.9, 0.9, 0.9, 0.9))
    s, cmd = step(s, room_frame(3, 0.1, 0.6), sure(3, 0.1), chain)
    assert s.phase == Phase.APPROACH
    assert cmd.linear > 0


def test_seek_finds_target_and_approaches(chain):
    p = plan(chain, 3, GOAL)
    s = NavState(GOAL, phase=Phase.SEEK, plan=p, room_window=(3,) * 5, last_timestamp=0.0,
                 start_timestamp=0.0)
    s, cmd = step(s, room_frame(3, 0.1), sure(3, 0.1), chain)
    assert s.phase == Phase.APPROACH and s.identified
    assert cmd.linear > 0


def test_off_plan_run_triggers_replanning(chain):
    cfg = PolicyConfig()
    p = plan(chain, 1, GOAL)
    assert p.hierarchy == (1, 2, 3)
    s = NavState(GOAL, phase=Phase.SEEK, plan=p, room_window=(0,) * 5, last_timestamp=0.0,
                 start_timestamp=0.0)
    t = 0.0
    for k in range(cfg.replan_after):
        t = round(t + 0.1, 10)
        s, cmd = step(s, room_frame(0, t), sure(0, t), chain, cfg)
    assert s.phase == Phase.REPLANNING and cmd == STOP
    s, _ = step(s, room_frame(0, t + 0.1), sure(0, t + 0.1), chain, cfg)
    assert s.phase == Phase.SEEK
    assert s.plan.hierarchy == (0, 1, 2, 3)
    assert s.plan.goal_room == p.goal_room and s.plan.goal_image is p.goal_image
    assert s.replans == 1


def test_unconfident_steps_do_not_count_towards_replanning(chain):
    p = plan(chain, 1, GOAL)
    s = NavState(GOAL, phase=Phase.SEEK, plan=p, last_timestamp=0.0, start_timestamp=0.0)
    flat = Inference.from_probs(np.full(5, 0.2) + np.array([0.01, 0, 0, 0, 0]))
    for k in range(1, 20):
        s, _ = step(s, room_frame(0, k * 0.1), Inference(flat.probs, k % 2 * 3, 0.2, k * 0.1), chain)
        assert s.phase != Phase.REPLANNING


def test_stale_inputs_are_rejected(chain):
    s, _ = step(initial_state(GOAL), room_frame(0, 1.0), sure(0, 1.0), chain)
    with pytest.raises(StaleInputError):
        step(s, room_frame(0, 1.0), sure(0, 1.0), chain)
    with pytest.raises(StaleInputError):
        step(s, room_frame(0, 1.1), sure(0, 0.9), chain)


@st.composite
def input_streams(draw):
    n = draw(st.integers(1, 120))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 4, n)
    fracs = rng.uniform(0.05, 1.0, n)
    probs = rng.dirichlet(np.full(5, 0.3), n)
    return [(room_frame(int(f), 0.1 * (k + 1), fr), Inference.from_probs(p, 0.1 * (k + 1)))
            for k, (f, fr, p) in enumerate(zip(frames, fracs, probs))]


def run_stream(chain, stream, cfg):
    s = initial_state(GOAL)
    trace = []
    for frame, inf in stream:
        s, cmd = step(s, frame, inf, chain, cfg)
        trace.append((s.phase, cmd))
    return s, trace


@settings(max_examples=60, deadline=None)
@given(input_streams())
def test_policy_is_closed_bounded_and_deterministic(chain, stream):
    cfg = PolicyConfig(init_turn=0.0)
    s, trace = run_stream(chain, stream, cfg)
    for phase, cmd in trace:
        assert phase in Phase
        assert abs(cmd.linear) <= cfg.lin_speed and abs(cmd.angular) <= cfg.rot_speed
    if s.plan is not None:
        assert 0 <= s.target_index <= len(s.plan.transition_targets)
        h = s.plan.hierarchy
        assert all(chain.adjacency[a, b] for a, b in zip(h, h[1:]))
    _, again = run_stream(chain, stream, cfg)
    assert again == trace
