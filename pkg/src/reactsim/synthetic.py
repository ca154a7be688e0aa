"""Synthetic maps and logs: straight multi-lane roads, an intersection,
constant-velocity tracks and the crafted conflict scenarios."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scenario import (
    DT,
    SEGMENT_STEPS,
    HDMap,
    Lane,
    LogScenario,
    Segment,
    TrackHistory,
    segment_from_log,
)

LANE_WIDTH = 3.6
CAR_LENGTH = 4.5
CAR_WIDTH = 2.0


def straight_road(
    n_lanes: int = 2,
    length: float = 800.0,
    piece: float = 100.0,
    lane_width: float = LANE_WIDTH,
    x0: float = -100.0,
    spacing: float = 5.0,
) -> HDMap:
    """Parallel lanes along +x, lane 0 rightmost at y=0, chopped into pieces.

    Lane ids are ``100 * lane_index + piece_index``.
    """
    lanes, adj = [], []
    n_pieces = int(math.ceil(length / piece))
    for li in range(n_lanes):
        y = li * lane_width
        for pi in range(n_pieces):
            a = x0 + pi * piece
            xs = np.arange(a, a + piece + 1e-9, spacing)
            cl = np.column_stack([xs, np.full_like(xs, y)])
            left = cl + [0.0, lane_width / 2]
            right = cl - [0.0, lane_width / 2]
            lid = 100 * li + pi
            lanes.append(Lane(lid, cl, left, right, lane_width))
            if pi + 1 < n_pieces:
                adj.append((lid, lid + 1, "successor"))
            if li + 1 < n_lanes:
                adj.append((lid, lid + 100, "left"))
            if li > 0:
                adj.append((lid, lid - 100, "right"))
    x_end = x0 + n_pieces * piece
    edges = (
        np.array([[x0, -lane_width / 2], [x_end, -lane_width / 2]]),
        np.array([[x0, (n_lanes - 0.5) * lane_width], [x_end, (n_lanes - 0.5) * lane_width]]),
    )
    return HDMap(tuple(lanes), edges, tuple(adj))


def constant_velocity_rows(x, y, yaw, speed, n, length=CAR_LENGTH, width=CAR_WIDTH) -> np.ndarray:
    k = np.arange(n)
    return np.column_stack(
        [
            x + speed * DT * k * math.cos(yaw),
            y + speed * DT * k * math.sin(yaw),
            np.full(n, yaw),
            np.full(n, speed),
            np.full(n, width),
            np.full(n, length),
        ]
    )


def constant_velocity_segments(n: int, seed: int = 0, steps: int = SEGMENT_STEPS, m: HDMap | None = None) -> list[Segment]:
    """Single-agent segments with straight constant-speed tracks in random directions."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        yaw = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(2.0, 20.0)
        rows = constant_velocity_rows(rng.uniform(-50, 50), rng.uniform(-50, 50), yaw, speed, steps)
        log_ = LogScenario(m, {i: TrackHistory(i, 0, rows)}, steps)
        out.append(segment_from_log(log_))
    return out


def offset_lane(lane_id: int, centerline, width: float = LANE_WIDTH) -> Lane:
    """Lane with boundary polylines offset half a width to either side."""
    cl = np.asarray(centerline, dtype=float)
    d = np.gradient(cl, axis=0)
    d /= np.hypot(d[:, 0], d[:, 1])[:, None]
    normal = np.column_stack([-d[:, 1], d[:, 0]])
    return Lane(lane_id, cl, cl + normal * width / 2, cl - normal * width / 2, width)


def _straight(a, b, spacing=5.0) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n = max(int(math.ceil(np.hypot(*(b - a)) / spacing)), 1)
    return a + np.linspace(0.0, 1.0, n + 1)[:, None] * (b - a)


def _arc(center, radius, a0, a1, n=16) -> np.ndarray:
    ang = np.linspace(a0, a1, n + 1)
    return np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])


BOX = 6.0  # half size of the intersection box
TURN_RADIUS = BOX + LANE_WIDTH / 2


def intersection_map(arm: float = 200.0) -> HDMap:
    """Four-arm crossing of two two-way roads, one lane per direction.

    Lane ids: eastbound 1-3, westbound 4-6, northbound 9-11, southbound 12-13
    with exit 8, and the westbound-to-southbound left turn 7.
    """
    h = LANE_WIDTH / 2
    cl = {
        1: _straight((-arm, -h), (-BOX, -h)),
        2: _straight((-BOX, -h), (BOX, -h), 3.0),
        3: _straight((BOX, -h), (arm, -h)),
        4: _straight((arm, h), (BOX, h)),
        5: _straight((BOX, h), (-BOX, h), 3.0),
        6: _straight((-BOX, h), (-arm, h)),
        7: _arc((BOX, -BOX), TURN_RADIUS, math.pi / 2, math.pi),
        8: _straight((-h, -BOX), (-h, -arm)),
        9: _straight((h, -arm), (h, -BOX)),
        10: _straight((h, -BOX), (h, BOX), 3.0),
        11: _straight((h, BOX), (h, arm)),
        12: _straight((-h, arm), (-h, BOX)),
        13: _straight((-h, BOX), (-h, -BOX), 3.0),
    }
    lanes = tuple(offset_lane(k, v) for k, v in sorted(cl.items()))
    adj = ((1, 2, "successor"), (2, 3, "successor"), (4, 5, "successor"), (5, 6, "successor"),
           (4, 7, "successor"), (7, 8, "successor"), (9, 10, "successor"), (10, 11, "successor"),
           (12, 13, "successor"), (13, 8, "successor"))
    w = LANE_WIDTH
    edges = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            edges.append(np.array([[sx * arm, sy * w], [sx * BOX, sy * w]]))
            edges.append(np.array([[sx * w, sy * arm], [sx * w, sy * BOX]]))
    return HDMap(lanes, tuple(edges), adj)


@dataclass(frozen=True)
class Scenario:
    """A segment plus the ego and the scripted behavior it should show."""

    name: str
    segment: Segment
    ego: int
    ego_policy: str = "log"
    ego_params: dict = field(default_factory=dict)


def _track(aid, x, y, yaw, speed, first=0, steps=SEGMENT_STEPS) -> TrackHistory:
    return TrackHistory(aid, first, constant_velocity_rows(x, y, yaw, speed, steps - first))


def cut_in_scenario(
    speed: float = 13.0,
    lead: float = 3.0,
    change_tick: int = 50,
    extra: int = 0,
    seed: int = 0,
) -> Scenario:
    """Ego in the left lane merges right just ahead of a logged follower.

    ``lead`` is how far the ego's center starts ahead of the follower's.
    Extra traffic runs at the same speed in a third lane and far up or down
    the first two, so it never interacts with the merge.
    """
    m = straight_road(n_lanes=3, length=900.0, x0=-150.0)
    tracks = [_track(0, lead, LANE_WIDTH, 0.0, speed), _track(1, 0.0, 0.0, 0.0, speed)]
    tracks += _side_traffic(extra, seed, speed, lanes=(0, 1, 2), keep_clear=(-80.0, 80.0))
    log_ = LogScenario(m, {t.agent_id: t for t in tracks}, SEGMENT_STEPS)
    params = {"start_tick": change_tick, "offset": -LANE_WIDTH, "duration": 3.0}
    return Scenario("cut-in", segment_from_log(log_), 0, "lane-change", params)


def _side_traffic(n, seed, speed, lanes, keep_clear, first_id=10) -> list[TrackHistory]:
    """Same-speed vehicles on a 25 m grid, away from the scripted interaction.

    The last lane in ``lanes`` is filled around the origin; the others only
    outside ``keep_clear``.
    """
    rng = np.random.default_rng(seed)
    slots = []
    for li in lanes:
        for k in range(-6, 7):
            x = 25.0 * k
            if li == lanes[-1] and abs(k) <= 3 or not (keep_clear[0] <= x <= keep_clear[1]):
                slots.append((li, x))
    out = []
    for j, idx in enumerate(sorted(rng.permutation(len(slots))[:n])):
        li, x = slots[idx]
        out.append(_track(first_id + j, x + rng.uniform(-2.0, 2.0), li * LANE_WIDTH, 0.0, speed))
    return out


def left_turn_scenario(
    ego_speed: float = 6.0,
    oncoming_speed: float = 9.0,
    turn_tick: int = 80,
    clash: float = 0.4,
    extra: int = 0,
    seed: int = 0,
) -> Scenario:
    """Westbound ego turns left across a logged eastbound vehicle.

    In the log the ego goes straight through. ``clash`` is how many seconds
    after the ego's center the oncoming vehicle's center would reach the
    crossing; small positive values collide under pure replay while leaving
    room to yield.
    """
    m = intersection_map()
    h = LANE_WIDTH / 2
    ego_x0 = BOX + ego_speed * DT * turn_tick
    # where the turning ego crosses the eastbound lane centre
    cross_x = BOX - math.sqrt(TURN_RADIUS**2 - (BOX - h) ** 2)
    arc = TURN_RADIUS * math.acos((BOX - h) / TURN_RADIUS)
    t_cross = turn_tick + (arc / ego_speed + clash) / DT
    bg_x0 = cross_x - oncoming_speed * DT * t_cross
    tracks = [_track(0, ego_x0, h, math.pi, ego_speed), _track(1, bg_x0, -h, 0.0, oncoming_speed)]
    rng = np.random.default_rng(seed)
    aid = 10
    for k in range(extra):
        # far-ahead eastbound and far-behind westbound traffic, plus exits
        kind = k % 3
        if kind == 0:
            x0 = bg_x0 + 60.0 + 25.0 * (k // 3) + rng.uniform(0, 3)
            tracks.append(_track(aid, x0, -h, 0.0, oncoming_speed))
        elif kind == 1:
            x0 = ego_x0 + 40.0 + 25.0 * (k // 3) + rng.uniform(0, 3)
            tracks.append(_track(aid, x0, h, math.pi, ego_speed))
        else:
            y0 = -40.0 - 25.0 * (k // 3) - rng.uniform(0, 3)
            tracks.append(_track(aid, -h, y0, -math.pi / 2, 8.0))
        aid += 1
    log_ = LogScenario(m, {t.agent_id: t for t in tracks}, SEGMENT_STEPS)
    params = {"start_tick": turn_tick, "radius": TURN_RADIUS, "angle": math.pi / 2}
    return Scenario("left-turn", segment_from_log(log_), 0, "turn", params)


def conflict_corpus(n: int = 20, seed: int = 0, extra: int = 12) -> list[Scenario]:
    """Alternating cut-in and left-turn variants with uninvolved traffic."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        if k % 2 == 0:
            out.append(cut_in_scenario(
                speed=float(rng.uniform(11.0, 15.0)), lead=float(rng.uniform(2.0, 4.0)),
                change_tick=int(rng.integers(40, 80)), extra=extra, seed=int(rng.integers(1 << 30)),
            ))
        else:
            out.append(left_turn_scenario(
                ego_speed=float(rng.uniform(4.5, 6.0)), oncoming_speed=float(rng.uniform(7.0, 9.5)),
                turn_tick=int(rng.integers(70, 100)), clash=float(rng.uniform(0.25, 0.55)),
                extra=extra, seed=int(rng.integers(1 << 30)),
            ))
    return out


def free_flow_segments(n: int, seed: int = 0, agents: int = 6) -> list[Scenario]:
    """Multi-lane traffic at a common speed with wide spacing: nothing ever conflicts."""
    rng = np.random.default_rng(seed)
    m = straight_road(n_lanes=3, length=900.0, x0=-150.0)
    out = []
    for i in range(n):
        speed = float(rng.uniform(8.0, 15.0))
        tracks = []
        for a in range(agents):
            lane, slot = a % 3, a // 3
            x = 30.0 * slot + rng.uniform(-2.0, 2.0)
            first = int(rng.integers(1, 60)) if a == agents - 1 else 0
            tracks.append(_track(a, x + speed * DT * first, lane * LANE_WIDTH, 0.0, speed, first))
        log_ = LogScenario(m, {t.agent_id: t for t in tracks}, SEGMENT_STEPS)
        out.append(Scenario("free-flow", segment_from_log(log_), 0))
    return out
