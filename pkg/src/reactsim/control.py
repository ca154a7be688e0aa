"""The takeover controller: per-agent modes, route planning, policy features
and the yield/proceed action law."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .conflict import Conflict
from .geometry import (
    BezierPath,
    LaneFrame,
    NoLaneWithinRange,
    bezier_fit,
    lane_station,
    point_polyline_distance,
    project_to_lane,
)
from .predictor import PredictedTrajectory
from .scenario import DT, AgentState, HDMap, wrap_angle

MAX_YAW_RATE = 0.5
MIN_ACCEL = -8.0
MAX_ACCEL = 4.0
MAX_LAT_ACCEL = 4.0

YIELD_MARGIN = 1.0  # s after the opponent reaches the cross point
GOAL_TOLERANCE = 1.5
LOOKAHEAD_MIN = 3.0
LOOKAHEAD_TIME = 1.0
SPEED_GAIN = 1.0
STOPPED_SPEED = 1e-6
STOP_GAP = 2.0  # front bumper to cross point when a yield ends in a stop

ROUTE_SPACING = 2.0
LANE_CHANGE_LENGTH = 20.0

N_NEIGHBORS = 6
NEIGHBOR_SENTINEL = 100.0
ROAD_SENTINEL = 100.0
DEFAULT_ROI = 30.0


class NoRoute(ValueError):
    pass


class OffMap(ValueError):
    pass


class InfeasibleYield(Exception):
    """Even full braking reaches the cross point too early; carries the emergency action."""

    def __init__(self, action: "ControlAction", needed: float):
        super().__init__(f"yield needs {needed:.2f} m/s^2")
        self.action = action
        self.needed = needed


# --- modes -----------------------------------------------------------------------


@dataclass(frozen=True)
class ReplayL:
    """Follow the log."""


@dataclass(frozen=True)
class ConflictAwareC:
    """Taken over to resolve ``conflict``, steering toward ``goal``.

    ``detected_tick`` is when the driving conflict was seen, so its absolute
    tick is ``detected_tick + conflict.first_step``.
    """

    goal: tuple[float, float]
    yielding: bool
    takeover_tick: int
    conflict: Conflict
    detected_tick: int

    @property
    def conflict_tick(self) -> int:
        return self.detected_tick + self.conflict.first_step


AgentMode = ReplayL | ConflictAwareC
REPLAY = ReplayL()


def mode_transition(
    agent_id,
    mode: AgentMode,
    t: int,
    conflicts: Sequence[Conflict],
    yielders: Mapping[tuple, object],
    goal_reached: bool,
) -> AgentMode:
    """Next mode of one agent given this tick's conflicts and who yields in each.

    Replay switches to takeover when a conflict names the agent as its yielder.
    A taken-over agent keeps a single driving conflict, swapping it only for a
    more urgent one or when the old one has lapsed unresolved, and returns to replay once its goal is reached and no
    conflict involves it.
    """
    mine = [c for c in conflicts if yielders.get(c.pair) == agent_id]
    if isinstance(mode, ReplayL):
        if not mine:
            return mode
        c = mine[0]
        return ConflictAwareC(c.cross_point, True, t, c, t)
    if mine:
        c = min(mine, key=lambda c: (c.first_step, c.pair))
        if t + c.first_step < mode.conflict_tick or mode.conflict_tick < t:
            return ConflictAwareC(c.cross_point, True, mode.takeover_tick, c, t)
    if goal_reached and not any(c.involves(agent_id) for c in conflicts):
        return REPLAY
    return mode


@dataclass(frozen=True)
class AuditRecord:
    tick: int
    agent: int
    transition: str
    pair: tuple
    goal: tuple

    def row(self) -> tuple:
        return (self.tick, self.agent, self.transition, f"{self.pair[0]}-{self.pair[1]}" if self.pair else "",
                self.goal[0] if self.goal else "", self.goal[1] if self.goal else "")


AUDIT_COLUMNS = ("tick", "agent_id", "transition", "pair", "goal_x", "goal_y")


def write_audit(records: Iterable[AuditRecord], sink: IO[bytes]) -> None:
    lines = [",".join(AUDIT_COLUMNS)]
    for r in records:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in r.row()))
    sink.write(("\n".join(lines) + "\n").encode())


def decide_yield(conflict: Conflict, preds: Mapping[int, PredictedTrajectory], ego=None) -> dict:
    """Which party of a conflict yields.

    A background agent always yields to the ego. Between two background agents
    the later arrival at the cross point yields; an exact tie goes to the larger id.
    """
    a, b = conflict.pair
    if ego is not None and ego in conflict.pair:
        y = b if a == ego else a
    else:
        ta = arrival_step(preds[a], conflict.cross_point)
        tb = arrival_step(preds[b], conflict.cross_point)
        y = a if ta > tb else b
    return {a: y == a, b: y == b}


def arrival_step(pred: PredictedTrajectory, point) -> int:
    """Future step (1-based) at which the point estimate passes closest to ``point``."""
    pts = pred.point_estimate
    if len(pts) == 0:
        return 0
    d = np.hypot(pts[:, 0] - point[0], pts[:, 1] - point[1])
    return int(np.argmin(d)) + 1


# --- actions ------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlAction:
    """Yaw rate, longitudinal and lateral acceleration, clamped on construction."""

    yaw_rate: float
    accel_long: float
    accel_lat: float = 0.0

    def __post_init__(self):
        vals = (self.yaw_rate, self.accel_long, self.accel_lat)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite action {vals}")
        object.__setattr__(self, "yaw_rate", min(max(float(self.yaw_rate), -MAX_YAW_RATE), MAX_YAW_RATE))
        object.__setattr__(self, "accel_long", min(max(float(self.accel_long), MIN_ACCEL), MAX_ACCEL))
        object.__setattr__(self, "accel_lat", min(max(float(self.accel_lat), -MAX_LAT_ACCEL), MAX_LAT_ACCEL))

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw_rate, self.accel_long, self.accel_lat])


ACTION_LOW = np.array([-MAX_YAW_RATE, MIN_ACCEL, -MAX_LAT_ACCEL])
ACTION_HIGH = np.array([MAX_YAW_RATE, MAX_ACCEL, MAX_LAT_ACCEL])


def integrate(state: AgentState, action: ControlAction, dt: float = DT) -> AgentState:
    """Advance a state one tick; speed never goes negative.

    Position moves along the mid-tick heading at the mean speed.
    """
    v_new = max(0.0, state.speed + action.accel_long * dt)
    yaw_mid = state.yaw + 0.5 * action.yaw_rate * dt
    v_mid = 0.5 * (state.speed + v_new)
    return AgentState(
        state.x + v_mid * dt * math.cos(yaw_mid),
        state.y + v_mid * dt * math.sin(yaw_mid),
        state.width,
        state.length,
        state.yaw + action.yaw_rate * dt,
        v_new,
    )


# --- route planning ---------------------------------------------------------------


def _lane_distance(lane, p) -> float:
    return float(point_polyline_distance(p, lane.centerline).min())


def goal_lanes(m: HDMap, goal) -> list[int]:
    """Lanes whose strip contains the goal, or the single nearest lane."""
    p = np.asarray(goal, dtype=float)
    dists = {lane.id: _lane_distance(lane, p) for lane in m.lanes}
    inside = [lid for lid, d in dists.items() if d <= m.lane(lid).width / 2]
    if inside:
        return sorted(inside)
    lid = min(dists, key=lambda k: (dists[k], k))
    if dists[lid] > 20.0:
        raise NoLaneWithinRange(f"goal {p.tolist()} is {dists[lid]:.1f} m from every lane")
    return [lid]


def route_lanes(m: HDMap, start_lane: int, goals: Sequence[int]) -> list[tuple[int, str]]:
    """Cheapest lane sequence from ``start_lane`` to any of ``goals``.

    Uniform-cost search; entering a lane costs its centerline length. Each
    entry is (lane id, relation used to enter it), the first being "start".
    """
    targets = set(goals)
    frontier = [(0.0, start_lane, ((start_lane, "start"),))]
    done = set()
    while frontier:
        cost, lid, path = heapq.heappop(frontier)
        if lid in done:
            continue
        if lid in targets:
            return list(path)
        done.add(lid)
        for nxt, rel in sorted(m.neighbors(lid)):
            if nxt not in done:
                heapq.heappush(frontier, (cost + m.lane(nxt).length, nxt, path + ((nxt, rel),)))
    raise NoRoute(f"no lane path from {start_lane} to {sorted(targets)}")


def _samples(lane, s0: float, s1: float, spacing: float) -> list[np.ndarray]:
    if s1 <= s0:
        return []
    return [lane.point_at(s) for s in np.arange(s0, s1, spacing)]


def route_waypoints(m: HDMap, start: LaneFrame, goal, lanes: Sequence[tuple[int, str]], spacing: float = ROUTE_SPACING) -> np.ndarray:
    """Start point, centerline samples along ``lanes`` every ``spacing`` m, then the goal.

    A lateral step joins the neighbor lane ``LANE_CHANGE_LENGTH`` further on.
    """
    pts = [np.asarray(start.point, dtype=float)]
    lane = m.lane(lanes[0][0])
    s = start.s + spacing
    for lid, rel in lanes[1:]:
        nxt = m.lane(lid)
        if rel == "successor":
            pts += _samples(lane, s, lane.length, spacing)
            s = max(s - lane.length, 0.0)
        else:
            here = lane.point_at(min(s, lane.length))
            s = min(lane_station(nxt, here)[0] + LANE_CHANGE_LENGTH, nxt.length)
        lane = nxt
    g = np.asarray(goal, dtype=float)
    s_goal, _ = lane_station(lane, g)
    pts += _samples(lane, s, s_goal - 0.5 * spacing, spacing)
    pts.append(g)
    return np.array(pts)


def plan_route(m: HDMap, start: LaneFrame, goal) -> BezierPath:
    """Smooth path from the start pose along the lane graph to ``goal``."""
    lanes = route_lanes(m, start.lane_id, goal_lanes(m, goal))
    return bezier_fit(route_waypoints(m, start, goal, lanes))


# --- policy features ----------------------------------------------------------------


@dataclass(frozen=True)
class World:
    """Snapshot of the scene that features are extracted from."""

    map: HDMap | None
    states: Mapping[int, AgentState]
    accels: Mapping[int, float] = field(default_factory=dict)
    roi_radius: float = DEFAULT_ROI


@dataclass(frozen=True)
class PolicyFeatures:
    """Own body and motion, up to six neighbors, and the lane-relative pose.

    ``neighbors`` rows are (bumper gap, relative speed, bearing, relative
    heading); empty slots hold the sentinel gap and zeros.
    """

    length: float
    width: float
    speed: float
    accel: float
    neighbors: np.ndarray  # (N_NEIGHBORS, 4)
    marker_dist_left: float
    marker_dist_right: float
    road_dist_left: float
    road_dist_right: float
    lane_offset: float
    lane_curvature: float
    lane_rel_heading: float

    SIZE = 4 + 4 * N_NEIGHBORS + 7

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                [self.length, self.width, self.speed, self.accel],
                self.neighbors.ravel(),
                [
                    self.marker_dist_left,
                    self.marker_dist_right,
                    self.road_dist_left,
                    self.road_dist_right,
                    self.lane_offset,
                    self.lane_curvature,
                    self.lane_rel_heading,
                ],
            ]
        )


def empty_neighbors() -> np.ndarray:
    out = np.zeros((N_NEIGHBORS, 4))
    out[:, 0] = NEIGHBOR_SENTINEL
    return out


def neighbor_table(me: AgentState, others: Iterable[tuple[int, AgentState]], radius: float) -> np.ndarray:
    """Nearest neighbors within ``radius`` by center distance, ties by id."""
    near = []
    for aid, o in others:
        d = math.hypot(o.x - me.x, o.y - me.y)
        if d <= radius:
            near.append((d, aid, o))
    near.sort(key=lambda r: (r[0], r[1]))
    out = empty_neighbors()
    for k, (d, _, o) in enumerate(near[:N_NEIGHBORS]):
        out[k] = (
            max(0.0, d - (me.length + o.length) / 2),
            o.speed - me.speed,
            wrap_angle(math.atan2(o.y - me.y, o.x - me.x) - me.yaw) if d > 0 else 0.0,
            wrap_angle(o.yaw - me.yaw),
        )
    return out


def extract_features(world: World, agent) -> PolicyFeatures:
    me = world.states[agent]
    if world.map is None:
        raise OffMap("no map to project onto")
    try:
        f = project_to_lane(world.map, me.position, me.yaw)
    except NoLaneWithinRange as e:
        raise OffMap(str(e)) from e
    others = ((aid, s) for aid, s in sorted(world.states.items()) if aid != agent)
    return PolicyFeatures(
        length=me.length,
        width=me.width,
        speed=me.speed,
        accel=float(world.accels.get(agent, 0.0)),
        neighbors=neighbor_table(me, others, world.roi_radius),
        marker_dist_left=f.marker_dist_left,
        marker_dist_right=f.marker_dist_right,
        road_dist_left=min(f.road_dist_left, ROAD_SENTINEL),
        road_dist_right=min(f.road_dist_right, ROAD_SENTINEL),
        lane_offset=f.d,
        lane_curvature=f.curvature,
        lane_rel_heading=f.heading_err,
    )


# --- takeover action law --------------------------------------------------------------


@dataclass(frozen=True)
class TakeoverTarget:
    """What the longitudinal law needs beyond the path.

    ``goal_s`` is the goal's arclength on the path, ``opponent_arrival`` the
    seconds until the other party reaches it, ``log_speed`` the logged speed
    to track when not yielding.
    """

    goal_s: float
    opponent_arrival: float
    log_speed: float
    margin: float = YIELD_MARGIN


def yield_accel(speed: float, distance: float, time_needed: float, standoff: float) -> tuple[float, bool]:
    """Constant acceleration so the agent covers ``distance`` no sooner than ``time_needed``.

    Returns (accel, feasible). When slowing cannot delay arrival enough without
    reversing, the agent stops ``standoff`` short of the point instead.
    """
    v, D, tr = speed, distance, time_needed
    if v <= STOPPED_SPEED or v * tr <= D:
        return 0.0, True
    if 2 * D >= v * tr:
        a = 2 * (D - v * tr) / tr**2
        return (a, True) if a >= MIN_ACCEL else (MIN_ACCEL, False)
    room = max(D - standoff, 1e-3)
    a = -(v**2) / (2 * room)
    if a < MIN_ACCEL:
        return MIN_ACCEL, False
    return a, True


def pure_pursuit(path: BezierPath, state: AgentState) -> float:
    """Yaw rate that steers toward the path point one lookahead ahead.

    Near the end the target stays on the final point, so the agent never
    aims past where the path stops.
    """
    s, _ = path.project(state.position)
    look = max(LOOKAHEAD_MIN, state.speed * LOOKAHEAD_TIME)
    tgt = path.point_at_length(min(s + look, path.length))
    dist = math.hypot(tgt[0] - state.x, tgt[1] - state.y)
    if dist < 1.0:
        return 0.0
    look = max(dist, 1.0) if s + look > path.length else look
    alpha = wrap_angle(math.atan2(tgt[1] - state.y, tgt[0] - state.x) - state.yaw)
    return 2.0 * state.speed * math.sin(alpha) / look


def takeover_step(
    mode: ConflictAwareC,
    path: BezierPath,
    state: AgentState,
    features: PolicyFeatures | None,
    dt: float,
    target: TakeoverTarget,
) -> ControlAction:
    """One tick of the deterministic takeover controller.

    Steering is pure pursuit on ``path``. A yielding agent brakes along a
    constant-deceleration profile that brings its front bumper to the goal
    ``margin`` seconds after the opponent; otherwise it tracks the logged speed. Raises
    InfeasibleYield carrying a full-braking action when no profile works.
    """
    del features, dt  # the deterministic law reads the path and target only
    yaw_rate = pure_pursuit(path, state)
    s, _ = path.project(state.position)
    remaining = target.goal_s - s
    time_needed = target.opponent_arrival + target.margin
    feasible = True
    if mode.yielding and time_needed > 0 and remaining > 0:
        accel, feasible = yield_accel(state.speed, remaining - state.length / 2, time_needed, STOP_GAP)
    else:
        accel = SPEED_GAIN * (target.log_speed - state.speed)
    act = ControlAction(yaw_rate, accel, state.speed * yaw_rate)
    if not feasible:
        raise InfeasibleYield(act, -(state.speed**2) / (2 * max(remaining - state.length / 2 - STOP_GAP, 1e-3)))
    return act
