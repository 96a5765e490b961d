import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trafficfill.snfs import (InflowSchedule, ModelParams, RoadConfig, SimState, advance,
                              arrival_profile, check_state, inject_vehicles, kmh_to_cells,
                              plan_lane_changes, run_scenario, step)

ONE_LANE = RoadConfig(length_cells=200, lanes=1, speed_limit_per_lane=(5,))
TWO_LANES = RoadConfig(length_cells=200, lanes=2, speed_limit_per_lane=(4, 5))


def test_kmh_to_cells_rounds_to_nearest_cell():
    assert kmh_to_cells(100) == 5
    assert kmh_to_cells(80) == 4
    assert kmh_to_cells(29.9) == 1
    assert kmh_to_cells(30) == 2
    assert kmh_to_cells(0) == 0
    with pytest.raises(ValueError):
        kmh_to_cells(-1)


def test_road_from_km():
    road = RoadConfig.from_km(10, (80, 100), (8.6, 9.8), (5.89,))
    assert road.length_cells == 1000
    assert road.speed_limit_per_lane == (4, 5)
    assert road.bottleneck_span == (860, 980)
    assert road.max_speed_kmh == 100


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        ModelParams(1.2, 0.1, 0.1, 0.9)
    with pytest.raises(ValueError):
        RoadConfig(100, 2, (5,))


def test_free_vehicle_accelerates_one_cell_per_step():
    state = SimState.empty(ONE_LANE, 0)
    state.place(0, 10, 0)
    params = ModelParams(0.0, 0.0, 0.0, 0.5)
    step(state, ONE_LANE, params)
    assert state.vehicles()[0].velocity == 1
    step(state, ONE_LANE, params)
    assert state.vehicles()[0].velocity == 2


def test_follower_respects_stopped_leader():
    state = SimState.empty(ONE_LANE, 1)
    state.place(0, 10, 5)
    state.place(0, 12, 0)
    step(state, ONE_LANE, ModelParams(0.0, 0.0, 0.0, 0.0))
    follower, leader = state.vehicles()
    assert follower.velocity <= 1 + leader.velocity
    assert follower.cell < leader.cell


def test_certain_braking_holds_cruise_one_below_limit():
    state = SimState.empty(ONE_LANE, 2)
    state.place(0, 0, 4)
    params = ModelParams(0.0, 1.0, 0.0, 0.5)
    for _ in range(10):
        step(state, ONE_LANE, params)
        assert state.vehicles()[0].velocity == 4


def test_bottleneck_braking_only_inside_span():
    road = RoadConfig(200, 1, (5,), bottleneck_span=(50, 100))
    params = ModelParams(1.0, 0.0, 0.0, 0.5)
    outside = SimState.empty(road, 0)
    outside.place(0, 10, 5)
    step(outside, road, params)
    assert outside.vehicles()[0].velocity == 5
    inside = SimState.empty(road, 0)
    inside.place(0, 60, 5)
    step(inside, road, params)
    assert inside.vehicles()[0].velocity == 4


def test_vehicle_leaves_open_boundary():
    state = SimState.empty(ONE_LANE, 0)
    state.place(0, 198, 5)
    step(state, ONE_LANE, ModelParams(0, 0, 0, 0.5))
    assert state.n_vehicles == 0
    assert state.exited == 1
    assert len(state.exit_log) == 1


# --- lane changes ------------------------------------------------------------

def test_single_vehicle_never_changes_lane():
    road = RoadConfig(100, 2, (5, 5))
    state = SimState.empty(road, 3)
    state.place(0, 20, 2)
    for _ in range(2000):
        plan_lane_changes(state, road)
    assert state.vehicles()[0].lane == 0


def _blocked_pairs(n, seed):
    # lane 0: follower at 4k, blocking leader at 4k + 1; lane 1 empty
    road = RoadConfig(4 * n + 4, 2, (5, 5))
    state = SimState.empty(road, seed)
    followers = [state.place(0, 4 * k, 0) for k in range(n)]
    for k in range(n):
        state.place(0, 4 * k + 1, 0)
    return road, state, set(followers)


def _changed(state, followers):
    return sum(1 for v in state.vehicles() if v.vid in followers and v.lane == 1)


def test_blocked_vehicle_changes_with_ten_percent_probability():
    n = 10_000
    road, state, followers = _blocked_pairs(n, 11)
    plan_lane_changes(state, road)
    assert _changed(state, followers) / n == pytest.approx(0.10, abs=0.01)
    # leaders have an equal achievable velocity in both lanes and stay put
    assert all(v.lane == 0 for v in state.vehicles() if v.vid not in followers)


def test_per_minute_change_rate():
    n = 10_000
    road, state, followers = _blocked_pairs(n, 12)
    for _ in range(33):
        plan_lane_changes(state, road)
    assert 1 - 0.9**33 == pytest.approx(0.969097, abs=1e-6)
    assert _changed(state, followers) / n == pytest.approx(0.969, abs=0.01)


def test_lane_change_needs_safe_backward_gap():
    road = RoadConfig(100, 2, (5, 5))
    state = SimState.empty(road, 4)
    state.place(0, 50, 0)
    state.place(0, 51, 0)
    state.place(1, 47, 4)  # could reach cell 51 of lane 1, gap 2 < 4
    for _ in range(500):
        plan_lane_changes(state, road)
    assert [v.lane for v in state.vehicles()] == [0, 0, 1]


# --- injection ---------------------------------------------------------------

def test_arrival_profile_spreads_count():
    a = arrival_profile(50)
    assert a.sum() == 50 and len(a) == 33
    assert a.max() - a.min() <= 1
    assert arrival_profile(0).sum() == 0


def test_zero_count_only_advances_clock():
    state = SimState.empty(TWO_LANES, 0)
    inject_vehicles(state, TWO_LANES, 0, 80.0)
    assert state.n_vehicles == 0
    assert state.injected == 0
    assert state.time_step == 33


def test_one_vehicle_per_step_all_present_after_minute():
    state = SimState.empty(TWO_LANES, 5)
    inject_vehicles(state, TWO_LANES, 33, 80.0, ModelParams(0.0, 0.0, 0.0, 0.5))
    assert state.n_vehicles == 33
    assert state.injected == 33
    assert state.pending_injections == 0


def test_injected_velocity_from_speed():
    road = RoadConfig(100, 1, (5,))
    state = SimState.empty(road, 0)
    inject_vehicles(state, road, 1, 100.0)
    assert state.vehicles()[0].velocity == 5
    # clamped to the lane limit
    state = SimState.empty(TWO_LANES, 0)
    inject_vehicles(state, TWO_LANES, 2, 100.0)
    assert sorted((v.lane, v.velocity) for v in state.vehicles()) == [(0, 4), (1, 5)]


def test_blocked_origin_queues_arrivals():
    state = SimState.empty(TWO_LANES, 0)
    inject_vehicles(state, TWO_LANES, 10, 80.0)
    assert state.n_vehicles == 2
    assert state.pending_injections == 8


# --- full runs ---------------------------------------------------------------

def _flat_inflow(minutes, count, speed=80.0):
    return InflowSchedule(np.arange(minutes), np.full(minutes, count), np.full(minutes, speed))


def test_zero_inflow_gives_empty_log():
    log = run_scenario(TWO_LANES, ModelParams(0.3, 0.1, 0.1, 0.9), _flat_inflow(1, 0), 1, 0)
    assert len(log) == 0


def test_run_scenario_is_deterministic():
    road = RoadConfig.from_km(2, (80, 100), (1.5, 1.8))
    args = (road, ModelParams(0.5, 0.1, 0.2, 0.9), _flat_inflow(5, 40), 5)
    a = run_scenario(*args, seed=42)
    b = run_scenario(*args, seed=42)
    for name in ("time_step", "lane", "cell", "velocity"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = run_scenario(*args, seed=43)
    assert not np.array_equal(a.velocity, c.velocity)


def test_sample_count_matches_vehicles_per_step():
    road = RoadConfig.from_km(2, (80, 100), (1.5, 1.8))
    params = ModelParams(0.5, 0.1, 0.2, 0.9)
    log = run_scenario(road, params, _flat_inflow(3, 40), 3, seed=7)
    state = SimState.empty(road, 7)
    present = []
    for _ in range(3):
        for a in arrival_profile(40):
            advance(state, road, params, int(a), 80.0)
            present.append(state.n_vehicles)
    assert np.array_equal(np.bincount(log.time_step, minlength=99), present)
    assert len(log) == sum(present)


def test_missing_inflow_minute_raises():
    with pytest.raises(KeyError):
        run_scenario(TWO_LANES, ModelParams(0.3, 0.1, 0.1, 0.9), _flat_inflow(2, 5), 3, 0)


def run_checked(road, params, steps, seed, max_arrivals=2):
    """Drive random arrivals through ``advance`` checking invariants each step."""
    rng = np.random.default_rng(seed)
    state = SimState.empty(road, seed)
    last = {}
    for _ in range(steps):
        advance(state, road, params, int(rng.integers(0, max_arrivals + 1)), 80.0)
        check_state(state, road)
        alive = np.flatnonzero(state.alive)
        now = dict(zip(state.vid[alive].tolist(), state.cell[alive].tolist()))
        for vid, cell in now.items():
            assert cell >= last.get(vid, 0), "vehicle moved backwards"
        last = now
    return state


@settings(max_examples=25, deadline=None)
@given(p_bn=st.floats(0, 1), p=st.floats(0, 1), q=st.floats(0, 1), r=st.floats(0, 1),
       seed=st.integers(0, 2**31))
def test_invariants_hold_for_random_params(p_bn, p, q, r, seed):
    road = RoadConfig(150, 2, (4, 5), bottleneck_span=(100, 130))
    run_checked(road, ModelParams(p_bn, p, q, r), 400, seed)


def test_bottleneck_slows_traffic():
    road = RoadConfig.from_km(10, (80, 100), (8.6, 9.8))
    params = ModelParams(0.54, 0.06, 0.15, 0.96)
    inside, upstream = [], []
    for seed in range(10):
        log = run_scenario(road, params, _flat_inflow(40, 35), 40, seed)
        late = log.minute >= 20
        v = log.velocity * 20.0
        inside.append(v[late & (log.cell >= 860) & (log.cell < 980)].mean())
        # 2 km upstream of where the queue starts
        upstream.append(v[late & (log.cell >= 610) & (log.cell < 710)].mean())
    assert np.mean(inside) < np.mean(upstream)
    assert sum(a < b for a, b in zip(inside, upstream)) >= 9
