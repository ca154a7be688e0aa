"""Evaluation metrics over simulation traces, and the IDM car-following law."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import IO, TYPE_CHECKING, Iterable, Sequence

import numpy as np
import shapely

from .scenario import LENGTH, TICK_HZ, WIDTH, X, Y, YAW

if TYPE_CHECKING:
    from .engine import SimTrace
    from .scenario import Segment

HORIZONS = (5, 10, 15, 20, 25)
IDM_MIN = -8.0
IDM_MAX = 4.0


class HorizonExceedsTrace(ValueError):
    pass


# --- IDM ------------------------------------------------------------------------------


@dataclass(frozen=True)
class IDMParams:
    v0: float = 15.0
    headway: float = 1.5
    a_max: float = 1.4
    b_comf: float = 2.0
    s0: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"IDM parameter {k} must be positive, got {v}")


def idm_accel(speed: float, gap: float, lead_speed: float, p: IDMParams = IDMParams()) -> float:
    """Intelligent driver model acceleration, clamped to [-8, 4].

    ``gap`` is bumper to bumper; an infinite gap means a free road and a
    non-positive gap brakes at the clamp.
    """
    if gap <= 0:
        return IDM_MIN
    free = (speed / p.v0) ** p.delta
    if math.isinf(gap):
        inter = 0.0
    else:
        s_star = p.s0 + speed * p.headway + speed * (speed - lead_speed) / (2 * math.sqrt(p.a_max * p.b_comf))
        inter = min(max(s_star, 0.0) / gap, 1e6) ** 2  # capped ratio is already far past the brake clamp
    a = p.a_max * (1 - free - inter)
    return min(max(a, IDM_MIN), IDM_MAX)


# --- displacement error ------------------------------------------------------------------


def _log_positions(trace: "SimTrace", seg: "Segment") -> np.ndarray:
    """Logged (x, y) on the trace's tick grid, NaN where an agent is absent."""
    n = trace.states.shape[0]
    out = np.full((n, len(trace.agent_ids), 2), np.nan)
    for j, aid in enumerate(trace.agent_ids):
        tr = seg.log.tracks.get(aid)
        if tr is None:
            continue
        rows = tr.window(trace.start_tick, trace.start_tick + n)
        if len(rows):
            a = max(tr.first_step, trace.start_tick) - trace.start_tick
            out[a : a + len(rows), j] = rows[:, [X, Y]]
    return out


def ade_terms(trace: "SimTrace", seg: "Segment", horizon_s: float) -> tuple[float, int]:
    """Sum of position errors and number of (agent, tick) terms up to the horizon."""
    n = int(round(horizon_s * TICK_HZ))
    if n > trace.states.shape[0]:
        raise HorizonExceedsTrace(f"{horizon_s} s needs {n} ticks, trace has {trace.states.shape[0]}")
    sim = trace.states[:n, :, [X, Y]]
    log_ = _log_positions(trace, seg)[:n]
    err = np.hypot(sim[..., 0] - log_[..., 0], sim[..., 1] - log_[..., 1])
    ok = ~np.isnan(err)
    return float(err[ok].sum()), int(ok.sum())


def ade(trace: "SimTrace", seg: "Segment", horizon_s: float) -> float:
    """Mean L2 error between simulated and logged positions over the first ``horizon_s`` seconds."""
    total, count = ade_terms(trace, seg, horizon_s)
    return total / count if count else 0.0


# --- collisions ----------------------------------------------------------------------------


def _footprints(rows: np.ndarray):
    c, s = np.cos(rows[:, YAW]), np.sin(rows[:, YAW])
    hl, hw = rows[:, LENGTH] / 2, rows[:, WIDTH] / 2
    fx, fy = c * hl, s * hl
    lx, ly = -s * hw, c * hw
    xs = np.stack([fx + lx, -fx + lx, -fx - lx, fx - lx], axis=1) + rows[:, [X]]
    ys = np.stack([fy + ly, -fy + ly, -fy - ly, fy - ly], axis=1) + rows[:, [Y]]
    return shapely.polygons(np.stack([xs, ys], axis=-1))


def colliding_agents(trace: "SimTrace") -> set:
    """Agents whose live footprint touches another agent's at any tick."""
    hit = set()
    ids = np.asarray(trace.agent_ids)
    for t in range(trace.states.shape[0]):
        rows = trace.states[t]
        live = np.flatnonzero(~np.isnan(rows[:, X]))
        if len(live) < 2:
            continue
        r = rows[live]
        rad = np.hypot(r[:, LENGTH], r[:, WIDTH]) / 2
        i, j = np.triu_indices(len(live), 1)
        near = np.hypot(r[i, X] - r[j, X], r[i, Y] - r[j, Y]) <= rad[i] + rad[j]
        if not near.any():
            continue
        i, j = i[near], j[near]
        polys = _footprints(r)
        touch = shapely.intersects(polys[i], polys[j])
        for a, b in zip(i[touch], j[touch]):
            hit.add(int(ids[live[a]]))
            hit.add(int(ids[live[b]]))
    return hit


def collision_and_reactivity(traces: Sequence["SimTrace"]) -> tuple[float, float]:
    """Share of agents ever in a collision, and share of collision-free scenarios."""
    if not traces:
        raise ValueError("no traces")
    agents = sum(len(t.agent_ids) for t in traces)
    hits = [colliding_agents(t) for t in traces]
    return sum(len(h) for h in hits) / agents, sum(1 for h in hits if not h) / len(traces)


def path_lengths(trace: "SimTrace") -> np.ndarray:
    """Travelled distance per agent, summed over consecutive ticks where it is present."""
    xy = trace.states[:, :, [X, Y]]
    step = np.hypot(*(xy[1:] - xy[:-1]).transpose(2, 0, 1))
    return np.nansum(step, axis=0)


def relevant_and_progress(traces: Sequence["SimTrace"]) -> tuple[float, float]:
    """Share of agents ever taken over, and mean travelled distance per agent."""
    if not traces:
        raise ValueError("no traces")
    agents = sum(len(t.agent_ids) for t in traces)
    taken = sum(len(t.taken_over()) for t in traces)
    dist = sum(float(path_lengths(t).sum()) for t in traces)
    return taken / agents, dist / agents


# --- report ---------------------------------------------------------------------------------


@dataclass
class MetricsReport:
    ade_at: dict
    collision_rate: float
    reactivity_rate: float
    relevant_ratio: float
    progress: float
    agents: int
    scenarios: int
    collisions: int
    takeovers: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ade_at"] = {str(k): v for k, v in self.ade_at.items()}
        return d


def evaluate(traces: Sequence["SimTrace"], segments: Sequence["Segment"] | None = None, horizons=HORIZONS) -> MetricsReport:
    """Pooled metrics over a set of traces; ADE terms are pooled over every (agent, tick)."""
    segments = segments or [t.segment for t in traces]
    ade_at = {}
    for h in horizons:
        total, count = 0.0, 0
        for tr, seg in zip(traces, segments):
            s, c = ade_terms(tr, seg, h)
            total, count = total + s, count + c
        ade_at[h] = total / count if count else 0.0
    coll, react = collision_and_reactivity(traces)
    rel, prog = relevant_and_progress(traces)
    agents = sum(len(t.agent_ids) for t in traces)
    return MetricsReport(
        ade_at, coll, react, rel, prog, agents, len(traces),
        sum(len(colliding_agents(t)) for t in traces), sum(len(t.taken_over()) for t in traces),
    )


def scenario_breakdown(traces: Sequence["SimTrace"], names: Sequence[str] | None = None) -> list[dict]:
    rows = []
    for k, t in enumerate(traces):
        hit = colliding_agents(t)
        rows.append({
            "scenario": names[k] if names else str(k),
            "agents": len(t.agent_ids),
            "collisions": len(hit),
            "takeovers": len(t.taken_over()),
            "ade_25s": ade(t, t.segment, min(25.0, t.states.shape[0] / TICK_HZ)),
            "progress": float(path_lengths(t).mean()) if len(t.agent_ids) else 0.0,
        })
    return rows


def write_report(report: MetricsReport, sink: IO[bytes], breakdown: Iterable[dict] = ()) -> None:
    doc = report.to_dict()
    doc["scenarios_detail"] = list(breakdown)
    sink.write(json.dumps(doc, indent=2, sort_keys=True).encode())
