"""Closed-loop replay with conflict-driven takeover of background agents."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import IO, Callable, Mapping

import numpy as np

from .conflict import Conflict, ConflictRecord, detect_all
from .control import (
    GOAL_TOLERANCE,
    REPLAY,
    SPEED_GAIN,
    AuditRecord,
    ConflictAwareC,
    ControlAction,
    InfeasibleYield,
    OffMap,
    ReplayL,
    TakeoverTarget,
    World,
    arrival_step,
    decide_yield,
    extract_features,
    integrate,
    mode_transition,
    plan_route,
    takeover_step,
)
from .geometry import BezierPath, NoLaneWithinRange, bezier_fit, project_to_lane
from .metrics import IDMParams, idm_accel
from .predictor import (
    InsufficientHistory,
    PredictedTrajectory,
    PredictorConfig,
    kinematic_rollout,
    predict_learned,
    predict_replay,
    single_mode,
    REPLAY_SIGMA,
    YAW_RATE_WINDOW,
)
from .scenario import DT, SPEED, X, Y, YAW, AgentState, Segment, TrackHistory

PREDICTORS = ("replay", "kinematic", "learned")
EGO_POLICIES = ("log", "lane-change", "turn", "idm")
HANDBACK_DIST = 3.0  # opponent prediction must pass this close to the goal to refresh its arrival
CORRIDOR_SLACK = 0.5
ROUTE_FOOT_MAX = 5.0
KINEMATIC_ROWS = YAW_RATE_WINDOW + 1


class EgoMissing(ValueError):
    pass


class IterationCapHit(RuntimeError):
    """Raised nowhere; the condition is recorded as a trace event."""


@dataclass(frozen=True)
class SimConfig:
    roi_radius: float = 30.0
    horizon: int = 50
    history: int = 30
    max_iterations: int = 10
    seed: int = 0
    ego: int | None = None
    ego_policy: str = "log"
    predictor: str = "kinematic"
    takeover: bool = True
    inflation: float = 0.0
    blend_ticks: int = 10
    max_takeover_ticks: int = 200

    def __post_init__(self):
        if not self.roi_radius > 0:
            raise ValueError("roi_radius must be positive")
        if self.max_iterations < 1:
            raise ValueError("need at least one resolution iteration")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"unknown predictor {self.predictor!r}")
        if self.ego_policy not in EGO_POLICIES:
            raise ValueError(f"unknown ego policy {self.ego_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


MODE_ABSENT, MODE_L, MODE_C = -1, 0, 1


@dataclass(eq=False)
class SimTrace:
    """Everything that happened in one simulated segment.

    ``states`` is (ticks, agents, 6) with NaN rows where an agent is absent;
    row ``k`` is tick ``start_tick + k``.
    """

    segment: Segment
    ego: int
    agent_ids: tuple
    start_tick: int
    states: np.ndarray
    modes: np.ndarray
    events: list = field(default_factory=list)  # (tick, agent, text)
    conflicts: list = field(default_factory=list)  # ConflictRecord
    audit: list = field(default_factory=list)  # AuditRecord
    ego_divergence: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def ticks(self) -> np.ndarray:
        return self.start_tick + np.arange(self.states.shape[0])

    def column(self, agent) -> int:
        return self.agent_ids.index(agent)

    def state(self, tick: int, agent) -> AgentState | None:
        row = self.states[tick - self.start_tick, self.column(agent)]
        return None if np.isnan(row[X]) else AgentState.from_row(row)

    def positions(self, agent) -> np.ndarray:
        return self.states[:, self.column(agent), :2]

    def taken_over(self) -> set:
        cols = np.flatnonzero((self.modes == MODE_C).any(axis=0))
        return {self.agent_ids[j] for j in cols}

    def takeover_count(self) -> int:
        return sum(1 for r in self.audit if r.transition == "L->C")


# --- ego policies ---------------------------------------------------------------------


class EgoPolicy:
    """Produces the ego's state at each tick; the base class replays the log."""

    def reset(self, seg: Segment, ego: int) -> None:
        self.track = seg.log.tracks[ego]

    def state(self, t: int, scene: Mapping[int, AgentState]) -> AgentState | None:
        return self.track.state(t) if self.track.covers(t) else None


class LaneChangeEgo(EgoPolicy):
    """Logged motion plus a smooth sideways shift of ``offset`` m (left positive)."""

    def __init__(self, start_tick: int = 50, offset: float = -3.6, duration: float = 3.0):
        self.start_tick, self.offset, self.duration = int(start_tick), float(offset), float(duration)

    def shift(self, t: int) -> tuple[float, float]:
        """Lateral offset and its rate per metre of travel factor (d offset / d t)."""
        n = self.duration / DT
        k = min(max(t - self.start_tick, 0), n)
        off = self.offset * 0.5 * (1 - math.cos(math.pi * k / n))
        rate = 0.0 if k <= 0 or k >= n else self.offset * 0.5 * math.pi / self.duration * math.sin(math.pi * k / n)
        return off, rate

    def state(self, t, scene):
        if not self.track.covers(t):
            return None
        s = self.track.state(t)
        off, rate = self.shift(t)
        nx, ny = -math.sin(s.yaw), math.cos(s.yaw)
        yaw = s.yaw + math.atan2(rate, max(s.speed, 1e-6))
        return AgentState(s.x + off * nx, s.y + off * ny, s.width, s.length, yaw, math.hypot(s.speed, rate))


class TurnEgo(EgoPolicy):
    """From ``start_tick`` on, drives a circular arc of ``angle`` rad (left positive) then straight."""

    def __init__(self, start_tick: int = 80, radius: float = 7.8, angle: float = math.pi / 2):
        self.start_tick, self.radius, self.angle = int(start_tick), float(radius), float(angle)

    def reset(self, seg, ego):
        super().reset(seg, ego)
        self.origin = self.track.state(self.start_tick)

    def state(self, t, scene):
        if t <= self.start_tick or not self.track.covers(t):
            return super().state(t, scene)
        o = self.origin
        s = o.speed * DT * (t - self.start_tick)
        arc = self.radius * abs(self.angle)
        side = math.copysign(1.0, self.angle)
        cx, cy = o.x - side * self.radius * math.sin(o.yaw), o.y + side * self.radius * math.cos(o.yaw)
        phi = min(s, arc) / self.radius * side
        yaw = o.yaw + phi
        x = cx + side * self.radius * math.sin(yaw)
        y = cy - side * self.radius * math.cos(yaw)
        if s > arc:
            x += (s - arc) * math.cos(yaw)
            y += (s - arc) * math.sin(yaw)
        return AgentState(x, y, o.width, o.length, yaw, o.speed)


class IDMEgo(EgoPolicy):
    """Follows its logged path with IDM speed control."""

    def __init__(self, params: IDMParams | None = None):
        self.params = params

    def reset(self, seg, ego):
        super().reset(seg, ego)
        self.follower = _PathFollower(self.track, self.params)

    def state(self, t, scene):
        if not self.track.covers(t):
            return None
        others = {k: v for k, v in scene.items() if k != self.track.agent_id}
        return self.follower.step(others)


def make_ego_policy(name: str, params: Mapping | None = None) -> EgoPolicy:
    params = dict(params or {})
    if name == "log":
        return EgoPolicy()
    if name == "lane-change":
        return LaneChangeEgo(**params)
    if name == "turn":
        return TurnEgo(**params)
    if name == "idm":
        return IDMEgo()
    raise ValueError(f"unknown ego policy {name!r}")


# --- IDM path following ---------------------------------------------------------------------


def _leader(me: AgentState, others: Mapping[int, AgentState]) -> tuple[float, float]:
    """Bumper gap and along-heading speed of the nearest agent ahead in my corridor."""
    c, s = math.cos(me.yaw), math.sin(me.yaw)
    best = (math.inf, 0.0)
    for o in others.values():
        dx, dy = o.x - me.x, o.y - me.y
        ahead, lat = c * dx + s * dy, -s * dx + c * dy
        if ahead <= 0 or abs(lat) > (me.width + o.width) / 2 + CORRIDOR_SLACK:
            continue
        gap = ahead - (me.length + o.length) / 2
        if gap < best[0]:
            best = (gap, o.speed * math.cos(o.yaw - me.yaw))
    return best


class _PathFollower:
    """Moves along a logged polyline at IDM speed; past its end it extends straight."""

    def __init__(self, track: TrackHistory, params: IDMParams | None):
        self.track = track
        d = track.data
        self.pts = d[:, [X, Y]]
        step = np.hypot(*np.diff(self.pts, axis=0).T)
        keep = np.concatenate([[True], step > 1e-9])
        self.pts = self.pts[keep]
        self.cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(self.pts, axis=0).T))])
        self.yaw0 = float(d[0, YAW])
        self.params = params or IDMParams(v0=max(float(d[:, SPEED].max()), 1.0))
        self.s = 0.0
        self.v = float(d[0, SPEED])
        self.current = AgentState.from_row(d[0])

    def pose(self, s: float) -> tuple[float, float, float]:
        if len(self.pts) == 1:
            return float(self.pts[0, 0]), float(self.pts[0, 1]), self.yaw0
        i = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.pts) - 2))
        a, b = self.pts[i], self.pts[i + 1]
        seg = self.cum[i + 1] - self.cum[i]
        u = (s - self.cum[i]) / seg
        p = a + u * (b - a)
        return float(p[0]), float(p[1]), math.atan2(b[1] - a[1], b[0] - a[0])

    def step(self, others: Mapping[int, AgentState]) -> AgentState:
        gap, lead_v = _leader(self.current, others)
        a = idm_accel(self.v, gap, lead_v, self.params)
        v_new = max(0.0, self.v + a * DT)
        self.s += 0.5 * (self.v + v_new) * DT
        self.v = v_new
        x, y, yaw = self.pose(self.s)
        self.current = AgentState(x, y, self.current.width, self.current.length, yaw, v_new)
        return self.current


# --- engine --------------------------------------------------------------------------------------


@dataclass
class _Takeover:
    path: BezierPath
    goal_s: float
    opponent: int
    opponent_arrival: int  # absolute tick


@dataclass
class _Agent:
    track: TrackHistory
    state: AgentState | None = None
    prev_speed: float | None = None
    mode: object = REPLAY
    offset: int = 0
    correction: np.ndarray | None = None
    blend_left: int = 0
    takeover: _Takeover | None = None
    history: list = field(default_factory=list)  # (tick, row) of realised states

    @property
    def dims(self) -> tuple[float, float]:
        return (self.track.width, self.track.length)


Controller = Callable[..., ControlAction]


@dataclass
class Models:
    """Optional learned components; the defaults need no training."""

    predictor: object | None = None  # FlatParams for the learned predictor
    controller: Controller = takeover_step


def _log_path_fallback(track: TrackHistory, step: int, goal) -> BezierPath:
    """Path along the agent's own logged future when no lane route exists."""
    rows = track.window(max(step, track.first_step), track.last_step + 1)[:, [X, Y]]
    keep = [rows[0]]
    for r in rows[1:]:
        if math.dist(r, keep[-1]) >= 2.0:
            keep.append(r)
    pts = np.array(keep + [np.asarray(goal, dtype=float)]) if len(keep) < 2 else np.array(keep)
    return bezier_fit(pts)


class _Run:
    def __init__(self, seg: Segment, cfg: SimConfig, models: Models, ego_policy: EgoPolicy, ego_params):
        self.seg, self.cfg, self.models = seg, cfg, models
        log_ = seg.log
        self.map = log_.map
        self.t0 = seg.init_steps
        self.t_end = seg.length
        self.ids = tuple(sorted(log_.tracks))
        self.agents = {aid: _Agent(log_.tracks[aid]) for aid in self.ids}
        present = [aid for aid in self.ids if log_.tracks[aid].covers(self.t0)]
        if cfg.ego is None:
            if not present:
                raise EgoMissing("no agent is present at the start of the simulation")
            rng = np.random.default_rng(cfg.seed)
            self.ego = int(present[rng.integers(len(present))])
        else:
            self.ego = cfg.ego
        if self.ego not in present:
            raise EgoMissing(f"ego {self.ego} is not present at tick {self.t0}")
        self.ego_policy = ego_policy
        self.ego_policy.reset(seg, self.ego)
        self.pred_cfg = None
        if cfg.predictor == "learned":
            if models.predictor is None:
                raise ValueError("learned predictor selected but no parameters given")
            self.pred_cfg = PredictorConfig.from_dict(models.predictor.config)
        n = self.t_end - self.t0
        self.states = np.full((n, len(self.ids), 6), np.nan)
        self.modes = np.full((n, len(self.ids)), MODE_ABSENT, dtype=np.int8)
        self.divergence = np.full(n, np.nan)
        self.events, self.conflicts, self.audit = [], [], []
        self.yielders: dict[tuple, int] = {}
        for aid, ag in self.agents.items():
            tr = ag.track
            for s in range(max(tr.first_step, self.t0 - cfg.history), min(tr.last_step, self.t0) + 1):
                ag.history.append((s, tr.row(s)))
            if tr.covers(self.t0):
                ag.state = tr.state(self.t0)
                if tr.covers(self.t0 - 1):
                    ag.prev_speed = float(tr.row(self.t0 - 1)[SPEED])
        self._record(self.t0)

    # -- bookkeeping

    def _record(self, t: int) -> None:
        k = t - self.t0
        for j, aid in enumerate(self.ids):
            ag = self.agents[aid]
            if ag.state is not None:
                self.states[k, j] = ag.state.as_row()
                self.modes[k, j] = MODE_C if isinstance(ag.mode, ConflictAwareC) else MODE_L

    def event(self, t, aid, text):
        self.events.append((t, aid, text))

    # -- prediction

    def _history_track(self, aid) -> TrackHistory:
        hist = self.agents[aid].history[-self.cfg.history :]
        return TrackHistory(aid, hist[0][0], np.array([r for _, r in hist]))

    def _predict(self, t: int, aid, roi: Mapping[int, AgentState]) -> PredictedTrajectory:
        ag = self.agents[aid]
        T = self.cfg.horizon
        if aid == self.ego:
            return self._predict_ego(t, roi)
        if isinstance(ag.mode, ConflictAwareC):
            return self._rollout(t, aid)
        st = ag.state
        step = t - ag.offset
        if step >= ag.track.last_step:
            return single_mode(aid, np.zeros((0, 2)), REPLAY_SIGMA, (st.x, st.y, st.yaw), truncated=True)
        pred = predict_replay(ag.track, t, T, ag.offset)
        if ag.correction is not None and ag.blend_left > 0:
            n = len(pred)
            fac = np.clip((ag.blend_left - 1 - np.arange(n)) / self.cfg.blend_ticks, 0.0, None)
            pts = pred.means[0] + fac[:, None] * ag.correction
            pred = single_mode(aid, pts, REPLAY_SIGMA, (st.x, st.y, st.yaw), pred.truncated)
        return pred

    def _predict_ego(self, t, roi) -> PredictedTrajectory:
        T = self.cfg.horizon
        kind = self.cfg.predictor
        ag = self.agents[self.ego]
        if kind == "replay" and ag.track.last_step > t:
            return predict_replay(ag.track, t, T)
        if kind == "learned":
            hists = {aid: self._history_track(aid) for aid in roi}
            return predict_learned(self.models.predictor, hists, roi, self.map, self.ego, self.pred_cfg)
        try:
            rows = np.array([r for _, r in ag.history[-min(KINEMATIC_ROWS, self.cfg.history):]])
            return kinematic_rollout(self.ego, rows, T)
        except InsufficientHistory:
            st = ag.state
            return single_mode(self.ego, np.tile(st.position, (T, 1)), REPLAY_SIGMA, (st.x, st.y, st.yaw))

    def _log_speed(self, ag: _Agent, t: int) -> float:
        step = min(max(t - ag.offset, ag.track.first_step), ag.track.last_step)
        return float(ag.track.row(step)[SPEED])

    def _target(self, ag: _Agent, t: int) -> TakeoverTarget:
        tk = ag.takeover
        return TakeoverTarget(tk.goal_s, (tk.opponent_arrival - t) * DT, self._log_speed(ag, t))

    def _act(self, aid, ag: _Agent, state: AgentState, t: int, features) -> tuple[ControlAction, bool]:
        try:
            return self.models.controller(ag.mode, ag.takeover.path, state, features, DT, self._target(ag, t)), True
        except InfeasibleYield as e:
            return e.action, False

    def _rollout(self, t: int, aid) -> PredictedTrajectory:
        """Controller rollout; past the goal the agent holds its heading at the logged speed."""
        ag = self.agents[aid]
        st = ag.state
        pts = np.empty((self.cfg.horizon, 2))
        done = False
        for k in range(self.cfg.horizon):
            if done:
                act = ControlAction(0.0, SPEED_GAIN * (self._log_speed(ag, t + k) - st.speed))
            else:
                act, _ = self._act(aid, ag, st, t + k, None)
            st = integrate(st, act)
            pts[k] = (st.x, st.y)
            done = done or self._goal_reached(ag, st)
        s0 = ag.state
        return single_mode(aid, pts, REPLAY_SIGMA, (s0.x, s0.y, s0.yaw))

    def _goal_reached(self, ag: _Agent, st: AgentState) -> bool:
        goal = ag.mode.goal
        if math.hypot(st.x - goal[0], st.y - goal[1]) <= GOAL_TOLERANCE:
            return True
        return ag.takeover.path.project(st.position)[0] >= ag.takeover.goal_s

    # -- takeover

    def _route_goal(self, ag: _Agent, t: int, goal) -> np.ndarray:
        """Foot of the cross point on the agent's own logged path ahead, so the route stays in lane."""
        rows = ag.track.window(t - ag.offset, ag.track.last_step + 1)[:, [X, Y]]
        g = np.asarray(goal, dtype=float)
        if len(rows) < 2:
            return g
        a, ab = rows[:-1], np.diff(rows, axis=0)
        ll = np.einsum("ij,ij->i", ab, ab)
        u = np.clip(np.einsum("ij,ij->i", g - a, ab) / np.where(ll > 0, ll, 1.0), 0.0, 1.0)
        foot = a + u[:, None] * ab
        d = np.hypot(*(foot - g).T)
        i = int(np.argmin(d))
        return foot[i] if d[i] <= ROUTE_FOOT_MAX else g

    def _start_takeover(self, t: int, aid, preds) -> None:
        ag = self.agents[aid]
        c = ag.mode.conflict
        target = self._route_goal(ag, t, c.cross_point)
        st = ag.state
        try:
            if self.map is None:
                raise NoLaneWithinRange("no map")
            path = plan_route(self.map, project_to_lane(self.map, st.position, st.yaw), target)
        except (NoLaneWithinRange, ValueError) as e:
            self.event(t, aid, f"route-fallback:{type(e).__name__}")
            path = _log_path_fallback(ag.track, t - ag.offset, target)
        goal_s, _ = path.project(target)
        opp = c.other(aid)
        arrival = t + (arrival_step(preds[opp], c.cross_point) if opp in preds else c.first_step)
        ag.takeover = _Takeover(path, goal_s, opp, arrival)
        ag.correction, ag.blend_left = None, 0

    def _refresh_arrival(self, t: int, aid, preds) -> None:
        tk = self.agents[aid].takeover
        p = preds.get(tk.opponent)
        if p is None or len(p) == 0:
            return
        goal = self.agents[aid].mode.goal
        pts = p.point_estimate
        d = np.hypot(pts[:, 0] - goal[0], pts[:, 1] - goal[1])
        if d.min() <= HANDBACK_DIST:
            tk.opponent_arrival = t + int(np.argmin(d)) + 1

    def _handback(self, t_next: int, aid, pos: np.ndarray) -> None:
        """Resume replay at the log index whose travelled distance is closest to ours."""
        ag = self.agents[aid]
        tr = ag.track
        xy = tr.data[:, [X, Y]]
        cum = tr.path_length()
        s = 0.0
        if len(xy) >= 2:
            a, ab = xy[:-1], np.diff(xy, axis=0)
            ll = np.einsum("ij,ij->i", ab, ab)
            u = np.clip(np.einsum("ij,ij->i", pos - a, ab) / np.where(ll > 0, ll, 1.0), 0.0, 1.0)
            i = int(np.argmin(np.hypot(*(a + u[:, None] * ab - pos).T)))
            s = cum[i] + u[i] * math.sqrt(ll[i])
        idx = int(np.argmin(np.abs(cum - s)))
        ag.offset = t_next - (tr.first_step + idx)
        ag.correction = pos - xy[idx]
        ag.blend_left = self.cfg.blend_ticks
        ag.takeover = None

    # -- main loop

    def tick(self, t: int) -> None:
        cfg = self.cfg
        ego_state = self.agents[self.ego].state
        live = {aid: ag.state for aid, ag in self.agents.items() if ag.state is not None}
        if ego_state is None:
            roi = {}
        else:
            roi = {aid: s for aid, s in live.items()
                   if math.hypot(s.x - ego_state.x, s.y - ego_state.y) <= cfg.roi_radius}
        dims = {aid: self.agents[aid].dims for aid in roi}
        conflicts: list[Conflict] = []
        preds = {}
        if self.ego in roi:
            seen = {}  # every pair detected this tick, first detection kept
            for it in range(cfg.max_iterations):
                preds = {aid: self._predict(t, aid, roi) for aid in sorted(roi)}
                conflicts = detect_all(preds, dims, self.ego, cfg.inflation)
                for c in conflicts:
                    seen.setdefault(c.pair, c)
                if not cfg.takeover or not self._assign(t, conflicts, preds, roi):
                    break
            else:
                self.event(t, self.ego, "iteration-cap")
            for c in seen.values():
                trig = "ego" if self.ego in c.pair else (
                    "deviation" if any(isinstance(self.agents[a].mode, ConflictAwareC) or self.agents[a].offset
                                       for a in c.pair) else "background")
                self.conflicts.append(ConflictRecord(t, c, trig))
            for aid, ag in self.agents.items():
                if ag.takeover is not None and ag.takeover.opponent in preds:
                    self._refresh_arrival(t, aid, preds)

        t_next = t + 1
        accels = {aid: (s.speed - self.agents[aid].prev_speed) / DT
                  for aid, s in live.items() if self.agents[aid].prev_speed is not None}
        world = World(self.map, live, accels, cfg.roi_radius)
        new_states = {}
        for aid in self.ids:
            ag = self.agents[aid]
            if aid == self.ego:
                new_states[aid] = self.ego_policy.state(t_next, live)
                continue
            if isinstance(ag.mode, ConflictAwareC):
                new_states[aid] = self._step_takeover(t, aid, world, conflicts)
                continue
            step = t_next - ag.offset
            if not ag.track.covers(step):
                new_states[aid] = None
                continue
            row = ag.track.row(step)
            if ag.correction is not None and ag.blend_left > 0:
                ag.blend_left -= 1
                row = row.copy()
                row[[X, Y]] += ag.correction * (ag.blend_left / cfg.blend_ticks)
                if ag.blend_left == 0:
                    ag.correction = None
                    self.event(t_next, aid, "rejoined")
            new_states[aid] = AgentState.from_row(row)
        if ego_state is not None and self.ego in preds and len(preds[self.ego]) and new_states.get(self.ego) is not None:
            e = new_states[self.ego]
            p = preds[self.ego].point_estimate[0]
            self.divergence[t - self.t0] = math.hypot(p[0] - e.x, p[1] - e.y)
        for aid, st in new_states.items():
            ag = self.agents[aid]
            ag.prev_speed = ag.state.speed if ag.state is not None else None
            ag.state = st
            if st is not None:
                ag.history.append((t_next, st.as_row()))
                if len(ag.history) > cfg.history:
                    del ag.history[0]
            else:
                ag.history.clear()
        self._record(t_next)

    def _assign(self, t: int, conflicts, preds, roi) -> bool:
        """Pick yielders for unassigned pairs and update modes; True if any mode changed."""
        for c in conflicts:
            if c.pair not in self.yielders:
                yields = decide_yield(c, preds, self.ego)
                self.yielders[c.pair] = next(k for k, v in yields.items() if v)
        changed = False
        for aid in sorted(roi):
            if aid == self.ego:
                continue
            ag = self.agents[aid]
            old = ag.mode
            ag.mode = mode_transition(aid, old, t, conflicts, self.yielders, False)
            if ag.mode is old:
                continue
            c = ag.mode.conflict
            label = "L->C" if isinstance(old, ReplayL) else "C->C"
            self.audit.append(AuditRecord(t, aid, label, c.pair, c.cross_point))
            self.event(t, aid, "takeover" if label == "L->C" else "retarget")
            self._start_takeover(t, aid, preds)
            changed = True
        return changed

    def _step_takeover(self, t: int, aid, world: World, conflicts) -> AgentState:
        ag = self.agents[aid]
        try:
            feats = extract_features(world, aid)
        except OffMap:
            feats = None
        act, ok = self._act(aid, ag, ag.state, t, feats)
        if not ok:
            self.event(t, aid, "infeasible-yield")
        nxt = integrate(ag.state, act)
        reached = self._goal_reached(ag, nxt)
        mode = mode_transition(aid, ag.mode, t, conflicts, self.yielders, reached)
        timed_out = (t - ag.mode.takeover_tick >= self.cfg.max_takeover_ticks
                     and not any(c.involves(aid) for c in conflicts))
        if isinstance(mode, ConflictAwareC) and timed_out:
            mode = REPLAY
            self.event(t + 1, aid, "timeout")
        if isinstance(mode, ReplayL):
            self.audit.append(AuditRecord(t + 1, aid, "C->L", ag.mode.conflict.pair, ag.mode.goal))
            self.event(t + 1, aid, "handback")
            for pair in [p for p, y in self.yielders.items() if y == aid]:
                del self.yielders[pair]
            ag.mode = mode
            self._handback(t + 1, aid, nxt.position)
        else:
            ag.mode = mode
        return nxt

    def run(self) -> SimTrace:
        for t in range(self.t0, self.t_end - 1):
            self.tick(t)
        return SimTrace(
            self.seg, self.ego, self.ids, self.t0, self.states, self.modes, self.events,
            self.conflicts, self.audit, self.divergence, self.cfg.to_dict(),
        )


def run_segment(
    seg: Segment,
    cfg: SimConfig = SimConfig(),
    models: Models | None = None,
    ego_params: Mapping | None = None,
) -> SimTrace:
    """Simulate one segment closed loop; see the module docstring for the tick order."""
    models = models or Models()
    policy = make_ego_policy(cfg.ego_policy, ego_params)
    return _Run(seg, cfg, models, policy, ego_params).run()


def run_idm_baseline(seg: Segment, cfg: SimConfig = SimConfig(), ego_params: Mapping | None = None) -> SimTrace:
    """Every background agent follows its logged path under IDM; the ego uses its policy."""
    log_ = seg.log
    t0, t_end = seg.init_steps, seg.length
    ids = tuple(sorted(log_.tracks))
    ego = cfg.ego
    if ego is None:
        present = [a for a in ids if log_.tracks[a].covers(t0)]
        ego = int(present[np.random.default_rng(cfg.seed).integers(len(present))])
    policy = make_ego_policy(cfg.ego_policy, ego_params)
    policy.reset(seg, ego)
    followers: dict[int, _PathFollower] = {}
    n = t_end - t0
    states = np.full((n, len(ids), 6), np.nan)
    modes = np.full((n, len(ids)), MODE_ABSENT, dtype=np.int8)
    current: dict[int, AgentState] = {}
    for aid in ids:
        tr = log_.tracks[aid]
        if tr.covers(t0):
            current[aid] = tr.state(t0)
            if aid != ego:
                f = _PathFollower(tr.slice(t0, tr.last_step + 1), None)
                followers[aid] = f
    for t in range(t0, t_end):
        k = t - t0
        for j, aid in enumerate(ids):
            if aid in current:
                states[k, j] = current[aid].as_row()
                modes[k, j] = MODE_L
        if t == t_end - 1:
            break
        nxt = {}
        for aid in ids:
            tr = log_.tracks[aid]
            if not tr.covers(t + 1):
                continue
            if aid == ego:
                st = policy.state(t + 1, current)
                if st is not None:
                    nxt[aid] = st
            elif aid in followers:
                others = {o: s for o, s in current.items() if o != aid}
                nxt[aid] = followers[aid].step(others)
            else:
                f = _PathFollower(tr.slice(t + 1, tr.last_step + 1), None)
                followers[aid] = f
                nxt[aid] = f.current
        current = nxt
    return SimTrace(seg, ego, ids, t0, states, modes, [], [], [], None, dict(cfg.to_dict(), baseline="idm"))


# --- trace files ----------------------------------------------------------------------------

TRACE_COLUMNS = ("tick", "agent_id", "x", "y", "yaw", "speed", "width", "length", "mode", "event")
_MODE_NAMES = {MODE_L: "L", MODE_C: "C"}


def write_trace(trace: SimTrace, sink: IO[bytes]) -> None:
    """One line per present (tick, agent), ticks ascending then ids ascending."""
    ev: dict[tuple, list] = {}
    for t, a, text in trace.events:
        ev.setdefault((t, a), []).append(text)
    lines = [",".join(TRACE_COLUMNS)]
    for k, t in enumerate(trace.ticks):
        for j, aid in enumerate(trace.agent_ids):
            row = trace.states[k, j]
            if np.isnan(row[X]):
                continue
            vals = [repr(float(v)) for v in row]
            lines.append(",".join([str(int(t)), str(aid), *vals, _MODE_NAMES[int(trace.modes[k, j])],
                                   ";".join(ev.get((int(t), aid), []))]))
    sink.write(("\n".join(lines) + "\n").encode())


def read_trace(source: IO[bytes], seg: Segment) -> SimTrace:
    lines = source.read().decode().splitlines()
    if not lines or lines[0] != ",".join(TRACE_COLUMNS):
        raise ValueError("not a trace file")
    recs = [ln.split(",") for ln in lines[1:] if ln]
    ids = tuple(sorted(seg.log.tracks))
    t0 = seg.init_steps
    n = seg.length - t0
    states = np.full((n, len(ids), 6), np.nan)
    modes = np.full((n, len(ids)), MODE_ABSENT, dtype=np.int8)
    events = []
    col = {a: j for j, a in enumerate(ids)}
    for r in recs:
        t, a = int(r[0]), int(r[1])
        states[t - t0, col[a]] = [float(v) for v in r[2:8]]
        modes[t - t0, col[a]] = MODE_C if r[8] == "C" else MODE_L
        for text in filter(None, r[9].split(";")):
            events.append((t, a, text))
    ego = -1
    return SimTrace(seg, ego, ids, t0, states, modes, events)
