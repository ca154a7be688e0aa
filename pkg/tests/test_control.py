import io
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from oracles import cheapest_route_cost
from reactsim.conflict import Conflict, detect_pair
from reactsim.control import (
    MAX_ACCEL,
    MAX_LAT_ACCEL,
    MAX_YAW_RATE,
    MIN_ACCEL,
    NEIGHBOR_SENTINEL,
    REPLAY,
    STOP_GAP,
    AuditRecord,
    ConflictAwareC,
    ControlAction,
    InfeasibleYield,
    NoRoute,
    OffMap,
    ReplayL,
    TakeoverTarget,
    World,
    arrival_step,
    decide_yield,
    extract_features,
    goal_lanes,
    integrate,
    mode_transition,
    neighbor_table,
    plan_route,
    route_lanes,
    takeover_step,
    write_audit,
    yield_accel,
)
from reactsim.geometry import BezierPath, project_to_lane
from reactsim.predictor import single_mode
from reactsim.scenario import AgentState
from reactsim.synthetic import LANE_WIDTH, intersection_map, straight_road

DT = 0.1
finite = st.floats(-1e6, 1e6)


# --- mode state machine ---------------------------------------------------------------------------

conflicts_st = st.lists(
    st.builds(lambda a, d, s: Conflict((a, a + d), s, (float(a), float(s)), 0.1),
              st.integers(0, 3), st.integers(1, 3), st.integers(1, 40)),
    max_size=4,
)


@given(st.lists(st.tuples(conflicts_st, st.lists(st.booleans(), min_size=4, max_size=4), st.booleans()), max_size=25))
def test_mode_machine_is_closed(steps):
    me = 1
    mode = REPLAY
    for t, (conflicts, picks, reached) in enumerate(steps):
        yielders = {c.pair: c.pair[0] if p else c.pair[1] for c, p in zip(conflicts, picks)}
        mine = [c for c in conflicts if yielders[c.pair] == me]
        nxt = mode_transition(me, mode, t, conflicts, yielders, reached)
        assert isinstance(nxt, (ReplayL, ConflictAwareC))
        if isinstance(mode, ReplayL):
            assert isinstance(nxt, ConflictAwareC) == bool(mine)
            if mine:
                assert nxt.takeover_tick == t and nxt.yielding and nxt.conflict in mine
        else:
            if isinstance(nxt, ReplayL):
                assert reached and not any(c.involves(me) for c in conflicts)
            else:
                assert nxt.takeover_tick == mode.takeover_tick  # still the same takeover
                assert nxt.conflict == mode.conflict or nxt.conflict in mine
        mode = nxt


def test_driving_conflict_swaps_only_when_more_urgent_or_lapsed():
    old = Conflict((1, 2), 10, (5.0, 0.0), 0.1)
    mode = ConflictAwareC((5.0, 0.0), True, 0, old, 0)
    later = Conflict((1, 3), 12, (9.0, 0.0), 0.1)
    sooner = Conflict((1, 3), 4, (9.0, 0.0), 0.1)
    assert mode_transition(1, mode, 2, [later], {(1, 3): 1}, False) is mode
    swapped = mode_transition(1, mode, 2, [sooner], {(1, 3): 1}, False)
    assert swapped.conflict == sooner and swapped.detected_tick == 2 and swapped.takeover_tick == 0
    lapsed = mode_transition(1, mode, 11, [later], {(1, 3): 1}, False)
    assert lapsed.conflict == later
    assert mode_transition(1, mode, 5, [], {}, True) is REPLAY
    assert mode_transition(1, mode, 5, [later], {(1, 3): 3}, True) is mode  # still involved


# --- yielding -------------------------------------------------------------------------------------


def straight(aid, x0, y0, yaw, speed, steps=50):
    k = np.arange(1, steps + 1) * speed * DT
    pts = np.column_stack([x0 + k * math.cos(yaw), y0 + k * math.sin(yaw)])
    return single_mode(aid, pts, 1.0, (x0, y0, yaw))


@given(st.floats(5, 40), st.floats(5, 40), st.floats(2, 15), st.floats(2, 15), st.integers(0, 3))
def test_exactly_one_party_yields(da, db, va, vb, ego_pick):
    a, b = straight(1, -da, 0.0, 0.0, va), straight(2, 0.0, -db, math.pi / 2, vb)
    c = detect_pair(a, b, (2.0, 4.5), (2.0, 4.5))
    assume(c is not None)
    ego = (None, 1, 2, 7)[ego_pick]
    out = decide_yield(c, {1: a, 2: b}, ego)
    assert sorted(out) == [1, 2] and out[1] != out[2]
    if ego in (1, 2):
        assert not out[ego]
    elif arrival_step(a, c.cross_point) != arrival_step(b, c.cross_point):
        # the later arrival yields
        later = max((1, 2), key=lambda i: arrival_step({1: a, 2: b}[i], c.cross_point))
        assert out[later]


def test_yield_tie_goes_to_larger_id():
    a = straight(1, -20.0, 0.0, 0.0, 10.0)
    b = single_mode(2, a.point_estimate[:, ::-1], 1.0, (0.0, -20.0, math.pi / 2))  # exact mirror image
    c = detect_pair(a, b, (2.0, 4.5), (2.0, 4.5))
    assert arrival_step(a, c.cross_point) == arrival_step(b, c.cross_point)
    assert decide_yield(c, {1: a, 2: b}) == {1: False, 2: True}


def apply_profile(state: AgentState, accel: float, steps: int) -> np.ndarray:
    pts = []
    for _ in range(steps):
        state = integrate(state, ControlAction(0.0, accel))
        pts.append(state.position)
    return np.array(pts)


@given(st.floats(10, 40), st.floats(10, 40), st.floats(4, 15), st.floats(4, 15))
def test_yield_profile_removes_or_delays_conflict(da, db, va, vb):
    dims = (2.0, 4.5)
    preds = {1: straight(1, -da, 0.0, 0.0, va), 2: straight(2, 0.0, -db, math.pi / 2, vb)}
    c = detect_pair(preds[1], preds[2], dims, dims)
    assume(c is not None)
    who = decide_yield(c, preds)
    y = 1 if who[1] else 2
    o = c.other(y)
    p = preds[y]
    x0, y0, yaw = p.origin
    speed = va if y == 1 else vb
    state = AgentState(x0, y0, dims[0], dims[1], yaw, speed)
    distance = math.dist((x0, y0), c.cross_point) - dims[1] / 2
    needed = arrival_step(preds[o], c.cross_point) * DT + 1.0
    accel, feasible = yield_accel(speed, distance, needed, STOP_GAP)
    assume(feasible)
    moved = single_mode(y, apply_profile(state, accel, len(p)), 1.0, p.origin)
    again = detect_pair(moved, preds[o], dims, dims)
    assert again is None or again.first_step > c.first_step


@given(st.floats(0, 40), st.floats(0.5, 200), st.floats(0.1, 20))
def test_yield_accel_delays_arrival(v, d, need):
    a, feasible = yield_accel(v, d, need, STOP_GAP)
    assert MIN_ACCEL <= a <= 0.0
    if not feasible:
        return
    if a == 0.0:
        assert v * need <= d + 1e-9 or v <= 1e-6
        return
    stop_dist = v * v / (-2 * a)
    if stop_dist <= d + 1e-9:
        return  # comes to rest before the point
    # time to cover d under constant a is no earlier than needed
    t = (-v + math.sqrt(v * v + 2 * a * d)) / a
    assert t >= need - 1e-6


def test_yield_accel_examples():
    assert yield_accel(10.0, 50.0, 4.0, 2.0) == (0.0, True)
    a, ok = yield_accel(10.0, 30.0, 4.0, 2.0)
    assert ok and a == pytest.approx(2 * (30 - 40) / 16)
    a, ok = yield_accel(10.0, 12.0, 4.0, 2.0)
    assert ok and a == pytest.approx(-100 / 20)  # stops 2 m short
    assert yield_accel(20.0, 5.0, 4.0, 2.0) == (MIN_ACCEL, False)
    assert yield_accel(17.0, 17.0, 2.0, 2.0) == (MIN_ACCEL, False)  # timed profile would brake harder than allowed


# --- actions and motion ---------------------------------------------------------------------------


@given(finite, finite, finite)
def test_action_clamps(w, a, lat):
    act = ControlAction(w, a, lat)
    assert -MAX_YAW_RATE <= act.yaw_rate <= MAX_YAW_RATE
    assert MIN_ACCEL <= act.accel_long <= MAX_ACCEL
    assert -MAX_LAT_ACCEL <= act.accel_lat <= MAX_LAT_ACCEL
    if abs(a) <= 4.0:
        assert act.accel_long == a


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_action_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        ControlAction(0.0, bad)


@given(st.floats(-3, 3), st.floats(0, 30), st.floats(-8, 4), st.floats(-0.5, 0.5))
def test_integrate_never_reverses(yaw, v, a, w):
    s = AgentState(0.0, 0.0, 2.0, 4.5, yaw, v)
    n = integrate(s, ControlAction(w, a))
    assert n.speed >= 0.0
    assert n.speed == pytest.approx(max(0.0, v + a * DT))
    assert math.hypot(n.x, n.y) == pytest.approx((v + n.speed) / 2 * DT)
    assert n.yaw == pytest.approx(yaw + w * DT)


# --- routing -------------------------------------------------------------------------------------


@pytest.mark.parametrize("m", [straight_road(2), straight_road(3, length=400), intersection_map()])
def test_route_cost_is_minimal(m):
    ids = [lane.id for lane in m.lanes]
    for start in ids:
        for goal in ids:
            want = cheapest_route_cost(m, start, [goal])
            if math.isinf(want):
                with pytest.raises(NoRoute):
                    route_lanes(m, start, [goal])
                continue
            path = route_lanes(m, start, [goal])
            assert path[0] == (start, "start") and path[-1][0] == goal
            for (lid, _), (nxt, rel) in zip(path[:-1], path[1:]):
                assert (nxt, rel) in m.neighbors(lid)
            assert sum(m.lane(lid).length for lid, _ in path[1:]) == pytest.approx(want)


def test_planned_route_hits_start_and_goal():
    m = straight_road(2)
    start = project_to_lane(m, (5.0, 0.3), 0.0)
    goal = (60.0, LANE_WIDTH)  # one lane over
    path = plan_route(m, start, goal)
    assert np.allclose(path.evaluate(0.0), start.point)
    assert np.allclose(path.evaluate(1.0), goal)
    assert goal_lanes(m, goal) and all(lid // 100 == 1 for lid in goal_lanes(m, goal))


def test_pure_pursuit_steers_toward_the_path():
    path = BezierPath.from_control_points([(0, 0), (100, 0)])
    act = takeover_step(
        ConflictAwareC((50.0, 0.0), False, 0, Conflict((1, 2), 5, (50.0, 0.0), 0.1), 0),
        path, AgentState(0.0, 1.0, 2.0, 4.5, 0.0, 10.0), None, DT, TakeoverTarget(50.0, 3.0, 12.0),
    )
    assert act.yaw_rate < 0.0  # path is to the right
    assert act.accel_long == pytest.approx(2.0)  # tracks the logged speed


def test_yielding_takeover_uses_the_profile_and_signals_infeasible():
    path = BezierPath.from_control_points([(0, 0), (100, 0)])
    mode = ConflictAwareC((30.0, 0.0), True, 0, Conflict((1, 2), 5, (30.0, 0.0), 0.1), 0)
    state = AgentState(0.0, 0.0, 2.0, 4.5, 0.0, 10.0)
    act = takeover_step(mode, path, state, None, DT, TakeoverTarget(30.0, 3.0, 10.0))
    assert act.accel_long == pytest.approx(yield_accel(10.0, 30.0 - 2.25, 4.0, STOP_GAP)[0])
    fast = AgentState(0.0, 0.0, 2.0, 4.5, 0.0, 30.0)
    with pytest.raises(InfeasibleYield) as exc:
        takeover_step(mode, path, fast, None, DT, TakeoverTarget(10.0, 3.0, 30.0))
    assert exc.value.action.accel_long == MIN_ACCEL and exc.value.needed < MIN_ACCEL


# --- features --------------------------------------------------------------------------------------


def test_neighbor_table_orders_and_pads():
    me = AgentState(0.0, 0.0, 2.0, 4.0, 0.0, 10.0)
    others = [(5, AgentState(10.0, 0.0, 2.0, 4.0, 0.0, 12.0)),
              (3, AgentState(0.0, -10.0, 2.0, 4.0, math.pi / 2, 8.0)),
              (9, AgentState(2.0, 0.0, 2.0, 4.0, 0.0, 10.0)),
              (1, AgentState(100.0, 0.0, 2.0, 4.0, 0.0, 10.0))]
    t = neighbor_table(me, others, 30.0)
    assert t[0].tolist() == [0.0, 0.0, 0.0, 0.0]  # overlapping bumpers clamp at zero
    assert t[1] == pytest.approx([6.0, -2.0, -math.pi / 2, math.pi / 2])  # tie at 10 m broken by id
    assert t[2] == pytest.approx([6.0, 2.0, 0.0, 0.0])
    assert (t[3:, 0] == NEIGHBOR_SENTINEL).all() and (t[3:, 1:] == 0).all()


def test_features_vector_layout_and_off_map():
    m = straight_road(2)
    states = {0: AgentState(10.0, 0.5, 2.0, 4.5, 0.1, 9.0), 1: AgentState(20.0, 0.0, 1.8, 5.0, 0.0, 11.0)}
    f = extract_features(World(m, states, {0: -1.5}), 0)
    v = f.as_vector()
    assert v.shape == (f.SIZE,) == (35,)
    assert v[:4].tolist() == [4.5, 2.0, 9.0, -1.5]
    assert v[4:8] == pytest.approx([math.hypot(10.0, 0.5) - 4.75, 2.0, math.atan2(-0.5, 10.0) - 0.1, -0.1])
    assert v[-3:] == pytest.approx([0.5, 0.0, 0.1])
    with pytest.raises(OffMap):
        extract_features(World(m, {0: AgentState(10.0, 60.0, 2.0, 4.5, 0.0, 9.0)}), 0)
    with pytest.raises(OffMap):
        extract_features(World(None, states), 0)


def test_audit_csv():
    buf = io.BytesIO()
    write_audit([AuditRecord(3, 1, "L->C", (1, 2), (0.5, 2.0)), AuditRecord(9, 1, "C->L", (), ())], buf)
    assert buf.getvalue().decode().splitlines() == [
        "tick,agent_id,transition,pair,goal_x,goal_y", "3,1,L->C,1-2,0.5,2.0", "9,1,C->L,,,"]
