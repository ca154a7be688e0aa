"""Agents, tracks, maps and logs.

Everything here is immutable once built. Steps are integer tick indices at
10 Hz; wall time only shows up when reading or writing files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

TICK_HZ = 10
DT = 1.0 / TICK_HZ
FEET = 0.3048

INIT_STEPS = 30
SIM_STEPS = 250
SEGMENT_STEPS = INIT_STEPS + SIM_STEPS

# column order of TrackHistory.data
X, Y, YAW, SPEED, WIDTH, LENGTH = range(6)

PLAUSIBILITY_SLACK = 0.5
YAW_HOLD_DISPLACEMENT = 0.05
MAX_SPEED = 70.0

LOG_HEADER = "step,agent_id,x,y,yaw,speed,width,length"
LOG_MAGIC = "# reactsim-log v1"


class ScenarioError(ValueError):
    """Base class for malformed scenario input."""


class MissingColumn(ScenarioError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"missing column(s): {', '.join(self.names)}")


class NonMonotonicFrames(ScenarioError):
    pass


class FrameGap(ScenarioError):
    pass


class UnitRange(ScenarioError):
    pass


class ImplausibleTrack(ScenarioError):
    pass


class TooShort(ScenarioError):
    pass


class SinkFailure(IOError):
    pass


def wrap_angle(a: float) -> float:
    """Map an angle into [-pi, pi). Values already in range are returned untouched."""
    if -math.pi <= a < math.pi:
        return a
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def wrap_angles(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    inside = (a >= -math.pi) & (a < math.pi)
    return np.where(inside, a, np.mod(a + math.pi, 2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    width: float
    length: float
    yaw: float
    speed: float

    def __post_init__(self):
        if not (self.width > 0 and self.length > 0):
            raise ValueError(f"agent extents must be positive, got {self.width}x{self.length}")
        if not self.speed >= 0:
            raise ValueError(f"speed must be non-negative, got {self.speed}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_row(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.speed, self.width, self.length])

    @classmethod
    def from_row(cls, row) -> "AgentState":
        return cls(
            x=float(row[X]),
            y=float(row[Y]),
            width=float(row[WIDTH]),
            length=float(row[LENGTH]),
            yaw=float(row[YAW]),
            speed=float(row[SPEED]),
        )


@dataclass(frozen=True, eq=False)
class TrackHistory:
    """States of one agent on consecutive ticks starting at ``first_step``.

    ``data`` has one row per tick with columns x, y, yaw, speed, width, length.
    """

    agent_id: int
    first_step: int
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim != 2 or data.shape[1] != 6 or len(data) == 0:
            raise ValueError("track data must be a non-empty (n, 6) array")
        if np.any(data[:, WIDTH] <= 0) or np.any(data[:, LENGTH] <= 0):
            raise ValueError(f"agent {self.agent_id}: non-positive extent")
        if np.any(data[:, SPEED] < 0):
            raise ValueError(f"agent {self.agent_id}: negative speed")
        data[:, YAW] = wrap_angles(data[:, YAW])
        step = np.hypot(np.diff(data[:, X]), np.diff(data[:, Y]))
        vmax = np.maximum(data[:-1, SPEED], data[1:, SPEED])
        bad = np.nonzero(step > vmax * DT + PLAUSIBILITY_SLACK)[0]
        if len(bad):
            i = int(bad[0])
            raise ImplausibleTrack(
                f"agent {self.agent_id}: jump of {step[i]:.3f} m at step {self.first_step + i + 1}"
            )
        data.setflags(write=False)
        object.__setattr__(self, "agent_id", int(self.agent_id))
        object.__setattr__(self, "first_step", int(self.first_step))
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return len(self.data)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrackHistory):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.first_step == other.first_step
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    @property
    def last_step(self) -> int:
        return self.first_step + len(self.data) - 1

    @property
    def states(self) -> tuple[AgentState, ...]:
        return tuple(AgentState.from_row(r) for r in self.data)

    @property
    def width(self) -> float:
        return float(self.data[-1, WIDTH])

    @property
    def length(self) -> float:
        return float(self.data[-1, LENGTH])

    def covers(self, step: int) -> bool:
        return self.first_step <= step <= self.last_step

    def row(self, step: int) -> np.ndarray:
        if not self.covers(step):
            raise IndexError(f"agent {self.agent_id} has no state at step {step}")
        return self.data[step - self.first_step]

    def state(self, step: int) -> AgentState:
        return AgentState.from_row(self.row(step))

    def window(self, start: int, stop: int) -> np.ndarray:
        """Rows for steps in [start, stop), clipped to what the track covers."""
        a = max(start, self.first_step) - self.first_step
        b = min(stop, self.last_step + 1) - self.first_step
        if b <= a:
            return self.data[:0]
        return self.data[a:b]

    def slice(self, start: int, stop: int, rebase: int = 0) -> "TrackHistory | None":
        rows = self.window(start, stop)
        if len(rows) == 0:
            return None
        first = max(start, self.first_step) - rebase
        return TrackHistory(self.agent_id, first, rows)

    def path_length(self) -> np.ndarray:
        """Cumulative travelled distance at every row."""
        step = np.hypot(np.diff(self.data[:, X]), np.diff(self.data[:, Y]))
        return np.concatenate([[0.0], np.cumsum(step)])


@dataclass(frozen=True, eq=False)
class Lane:
    id: int
    centerline: np.ndarray
    left: np.ndarray
    right: np.ndarray
    width: float

    def __post_init__(self):
        c = np.array(self.centerline, dtype=float).reshape(-1, 2)
        if len(c) < 2:
            raise ValueError(f"lane {self.id}: centerline needs at least 2 points")
        if np.any(np.hypot(*np.diff(c, axis=0).T) <= 0):
            raise ValueError(f"lane {self.id}: zero-length centerline segment")
        if not self.width > 0:
            raise ValueError(f"lane {self.id}: width must be positive")
        left = np.array(self.left, dtype=float).reshape(-1, 2)
        right = np.array(self.right, dtype=float).reshape(-1, 2)
        for arr in (c, left, right):
            arr.setflags(write=False)
        seg = np.hypot(*np.diff(c, axis=0).T)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        cum.setflags(write=False)
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "centerline", c)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "width", float(self.width))
        object.__setattr__(self, "_cum", cum)

    @property
    def arclength(self) -> np.ndarray:
        return self._cum

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        """Centerline point at arclength ``s`` (clamped to the lane)."""
        s = min(max(s, 0.0), self.length)
        cum = self._cum
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(max(i, 0), len(cum) - 2)
        t = (s - cum[i]) / (cum[i + 1] - cum[i])
        return self.centerline[i] + t * (self.centerline[i + 1] - self.centerline[i])

    def __eq__(self, other):
        if not isinstance(other, Lane):
            return NotImplemented
        return (
            self.id == other.id
            and self.width == other.width
            and all(
                a.shape == b.shape and np.array_equal(a, b)
                for a, b in (
                    (self.centerline, other.centerline),
                    (self.left, other.left),
                    (self.right, other.right),
                )
            )
        )


RELATIONS = ("successor", "left", "right")


@dataclass(frozen=True, eq=False)
class HDMap:
    lanes: tuple[Lane, ...]
    road_edges: tuple[np.ndarray, ...] = ()
    adjacency: tuple[tuple[int, int, str], ...] = ()

    def __post_init__(self):
        lanes = tuple(self.lanes)
        ids = [lane.id for lane in lanes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate lane ids")
        known = set(ids)
        adjacency = []
        for frm, to, rel in self.adjacency:
            if rel not in RELATIONS:
                raise ValueError(f"unknown lane relation {rel!r}")
            if frm not in known or to not in known:
                raise ValueError(f"adjacency edge {frm}->{to} references an unknown lane")
            adjacency.append((int(frm), int(to), str(rel)))
        edges = []
        for e in self.road_edges:
            arr = np.array(e, dtype=float).reshape(-1, 2)
            arr.setflags(write=False)
            edges.append(arr)
        object.__setattr__(self, "lanes", lanes)
        object.__setattr__(self, "road_edges", tuple(edges))
        object.__setattr__(self, "adjacency", tuple(adjacency))
        object.__setattr__(self, "_by_id", {lane.id: lane for lane in lanes})

    def lane(self, lane_id: int) -> Lane:
        return self._by_id[lane_id]

    def neighbors(self, lane_id: int) -> list[tuple[int, str]]:
        return [(to, rel) for frm, to, rel in self.adjacency if frm == lane_id]

    def __eq__(self, other):
        if not isinstance(other, HDMap):
            return NotImplemented
        return (
            self.lanes == other.lanes
            and self.adjacency == other.adjacency
            and len(self.road_edges) == len(other.road_edges)
            and all(
                a.shape == b.shape and np.array_equal(a, b)
                for a, b in zip(self.road_edges, other.road_edges)
            )
        )

    def to_json(self) -> dict:
        return {
            "lanes": [
                {
                    "id": lane.id,
                    "centerline": lane.centerline.tolist(),
                    "left": lane.left.tolist(),
                    "right": lane.right.tolist(),
                    "width": lane.width,
                }
                for lane in self.lanes
            ],
            "edges": [e.tolist() for e in self.road_edges],
            "adjacency": [{"from": f, "to": t, "relation": r} for f, t, r in self.adjacency],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "HDMap":
        lanes = tuple(
            Lane(
                id=d["id"],
                centerline=d["centerline"],
                left=d.get("left", []),
                right=d.get("right", []),
                width=d["width"],
            )
            for d in doc["lanes"]
        )
        return cls(
            lanes=lanes,
            road_edges=tuple(doc.get("edges", [])),
            adjacency=tuple((a["from"], a["to"], a["relation"]) for a in doc.get("adjacency", [])),
        )


@dataclass(frozen=True, eq=False)
class LogScenario:
    map: HDMap | None
    tracks: Mapping[int, TrackHistory]
    duration_steps: int
    tick_hz: int = TICK_HZ

    def __post_init__(self):
        if self.tick_hz != TICK_HZ:
            raise ValueError(f"only {TICK_HZ} Hz logs are supported, got {self.tick_hz}")
        tracks = dict(sorted((int(k), v) for k, v in dict(self.tracks).items()))
        for k, tr in tracks.items():
            if k != tr.agent_id:
                raise ValueError(f"track key {k} does not match agent id {tr.agent_id}")
            if tr.first_step < 0 or tr.last_step >= self.duration_steps:
                raise ValueError(f"track {k} lies outside the log duration")
        object.__setattr__(self, "tracks", tracks)

    @property
    def agent_ids(self) -> list[int]:
        return list(self.tracks)

    def present(self, step: int) -> list[int]:
        return [k for k, tr in self.tracks.items() if tr.covers(step)]

    def __eq__(self, other):
        if not isinstance(other, LogScenario):
            return NotImplemented
        return (
            self.duration_steps == other.duration_steps
            and self.tick_hz == other.tick_hz
            and self.map == other.map
            and list(self.tracks) == list(other.tracks)
            and all(self.tracks[k] == other.tracks[k] for k in self.tracks)
        )


@dataclass(frozen=True, eq=False)
class Segment:
    """A 28 s slice of a log, re-indexed so that its first tick is step 0."""

    source: LogScenario
    offset: int = 0
    init_steps: int = INIT_STEPS
    sim_steps: int = SIM_STEPS
    late_entrants: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.init_steps + self.sim_steps != self.source.duration_steps:
            raise ValueError("segment length does not match its source")
        object.__setattr__(self, "late_entrants", frozenset(self.late_entrants))

    @property
    def log(self) -> LogScenario:
        return self.source

    @property
    def length(self) -> int:
        return self.init_steps + self.sim_steps

    @property
    def start_tick(self) -> int:
        return self.init_steps


def segment_from_log(log: LogScenario, offset: int = 0, init_steps: int = INIT_STEPS) -> Segment:
    """Wrap a log that is already exactly one segment long."""
    late = frozenset(k for k, tr in log.tracks.items() if tr.first_step > 0)
    return Segment(log, offset, init_steps, log.duration_steps - init_steps, late)


def segment_log(log: LogScenario, length: int = SEGMENT_STEPS) -> list[Segment]:
    """Cut a log into consecutive, non-overlapping segments; the remainder is dropped."""
    if log.duration_steps < length:
        raise TooShort(f"log has {log.duration_steps} steps, a segment needs {length}")
    out = []
    for k in range(log.duration_steps // length):
        start = k * length
        tracks = {}
        for aid, tr in log.tracks.items():
            sl = tr.slice(start, start + length, rebase=start)
            if sl is not None:
                tracks[aid] = sl
        sub = LogScenario(log.map, tracks, length)
        out.append(segment_from_log(sub, offset=start, init_steps=INIT_STEPS))
    return out


# --- NGSIM import -------------------------------------------------------------

DEFAULT_COLUMNS = {
    "vehicle_id": "Vehicle_ID",
    "frame": "Frame_ID",
    "local_x": "Local_X",
    "local_y": "Local_Y",
    "length": "v_Length",
    "width": "v_Width",
    "velocity": "v_Vel",
    "lane_id": "Lane_ID",
}


def derive_yaw(xy: np.ndarray, initial: float = 0.0) -> np.ndarray:
    """Heading from a smoothed three-tick displacement.

    The displacement around row i spans rows i-1 .. i+2 (clipped at the ends).
    When it is shorter than 5 cm the previous heading is held; leading rows with
    no usable displacement take the first valid heading.
    """
    n = len(xy)
    yaw = np.full(n, np.nan)
    for i in range(n):
        a = max(i - 1, 0)
        b = min(i + 2, n - 1)
        d = xy[b] - xy[a]
        if math.hypot(d[0], d[1]) >= YAW_HOLD_DISPLACEMENT:
            yaw[i] = math.atan2(d[1], d[0])
        elif i > 0:
            yaw[i] = yaw[i - 1]
    valid = np.nonzero(~np.isnan(yaw))[0]
    if len(valid) == 0:
        return np.full(n, initial)
    yaw[: valid[0]] = yaw[valid[0]]
    return yaw


def parse_ngsim_csv(
    text: IO[str] | str,
    column_map: Mapping[str, str | int] | None = None,
    units: str = "feet",
    map: HDMap | None = None,
) -> LogScenario:
    """Read an NGSIM-style trajectory table into a :class:`LogScenario`.

    ``column_map`` maps each required field (see ``DEFAULT_COLUMNS``) to a header
    name or a column index. Lengths and speeds are converted from feet unless
    ``units="meters"``. Errors carry the offending line number.
    """
    if isinstance(text, str):
        text = io.StringIO(text)
    cmap = dict(DEFAULT_COLUMNS)
    if column_map:
        cmap.update(column_map)
    scale = FEET if units == "feet" else 1.0
    reader = csv.reader(text)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise MissingColumn(list(cmap.values())) from None
    index = {}
    missing = []
    for key, col in cmap.items():
        if isinstance(col, int):
            if col >= len(header):
                missing.append(str(col))
            index[key] = col
        elif col in header:
            index[key] = header.index(col)
        else:
            missing.append(col)
    if missing:
        raise MissingColumn(missing)

    rows: dict[int, list[tuple[int, float, float, float, float, float]]] = {}
    lines: dict[int, int] = {}
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        try:
            vid = int(float(rec[index["vehicle_id"]]))
            frame = int(float(rec[index["frame"]]))
            vals = [float(rec[index[k]]) for k in ("local_x", "local_y", "length", "width", "velocity")]
        except (ValueError, IndexError) as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
        per = rows.setdefault(vid, [])
        if per and frame <= per[-1][0]:
            raise NonMonotonicFrames(
                f"line {lineno}: frame {frame} does not increase for vehicle {vid}"
            )
        if per and frame != per[-1][0] + 1:
            raise FrameGap(f"line {lineno}: vehicle {vid} skips from frame {per[-1][0]} to {frame}")
        speed = vals[4] * scale
        if speed > MAX_SPEED:
            raise UnitRange(
                f"line {lineno}: speed {speed:.1f} m/s is implausible; "
                f"check that the units ({units}) are right"
            )
        per.append((frame, vals[0] * scale, vals[1] * scale, vals[2] * scale, vals[3] * scale, speed))
        lines.setdefault(vid, lineno)

    if not rows:
        return LogScenario(map, {}, 0)
    first_frame = min(r[0][0] for r in rows.values())
    last_frame = max(r[-1][0] for r in rows.values())
    tracks = {}
    for vid, per in rows.items():
        arr = np.array([r[1:] for r in per])
        xy = arr[:, 0:2]
        data = np.column_stack([xy[:, 0], xy[:, 1], derive_yaw(xy), arr[:, 4], arr[:, 3], arr[:, 2]])
        try:
            tracks[vid] = TrackHistory(vid, per[0][0] - first_frame, data)
        except ImplausibleTrack as exc:
            raise ImplausibleTrack(f"line {lines[vid]}: {exc}") from None
    return LogScenario(map, tracks, last_frame - first_frame + 1)


# --- canonical text format ----------------------------------------------------


def write_canonical_log(log: LogScenario, sink: IO[bytes]) -> None:
    """One text record per (step, agent). ``repr`` keeps every float bit-exact."""
    out = [f"{LOG_MAGIC} tick_hz={log.tick_hz} duration={log.duration_steps}", LOG_HEADER]
    records = []
    for aid, tr in log.tracks.items():
        for i, r in enumerate(tr.data):
            records.append((tr.first_step + i, aid, r))
    records.sort(key=lambda rec: (rec[0], rec[1]))
    for step, aid, r in records:
        out.append(
            f"{step},{aid},{float(r[X])!r},{float(r[Y])!r},{float(r[YAW])!r},"
            f"{float(r[SPEED])!r},{float(r[WIDTH])!r},{float(r[LENGTH])!r}"
        )
    payload = ("\n".join(out) + "\n").encode()
    try:
        sink.write(payload)
    except (OSError, ValueError) as exc:
        raise SinkFailure(str(exc)) from exc


def read_canonical_log(source: IO[bytes], map: HDMap | None = None) -> LogScenario:
    text = source.read()
    if isinstance(text, bytes):
        text = text.decode()
    lines = text.splitlines()
    if not lines or not lines[0].startswith(LOG_MAGIC):
        raise ScenarioError("not a canonical log (bad magic line)")
    try:
        meta = dict(tok.split("=", 1) for tok in lines[0][len(LOG_MAGIC):].split())
        duration, tick_hz = int(meta["duration"]), int(meta["tick_hz"])
    except (ValueError, KeyError):
        raise ScenarioError("canonical log magic line lacks duration/tick_hz") from None
    if len(lines) < 2 or lines[1] != LOG_HEADER:
        raise ScenarioError("canonical log header row missing")
    per: dict[int, list] = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise ScenarioError(f"line {lineno}: expected 8 fields")
        try:
            step, aid = int(parts[0]), int(parts[1])
            vals = [float(p) for p in parts[2:]]
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
        rec = per.setdefault(aid, [])
        if rec and step != rec[-1][0] + 1:
            raise ScenarioError(f"line {lineno}: agent {aid} steps are not consecutive")
        rec.append((step, vals))
    tracks = {}
    for aid, rec in per.items():
        data = np.array([v for _, v in rec])
        tracks[aid] = TrackHistory(aid, rec[0][0], data)
    return LogScenario(map, tracks, duration, tick_hz)


def write_map(m: HDMap, sink: IO[bytes]) -> None:
    try:
        sink.write(json.dumps(m.to_json(), sort_keys=True).encode())
    except (OSError, ValueError) as exc:
        raise SinkFailure(str(exc)) from exc


def read_map(source: IO[bytes]) -> HDMap:
    return HDMap.from_json(json.loads(source.read()))


def build_log(map: HDMap | None, tracks: Iterable[TrackHistory], duration: int | None = None) -> LogScenario:
    tracks = list(tracks)
    if duration is None:
        duration = max((t.last_step + 1 for t in tracks), default=0)
    return LogScenario(map, {t.agent_id: t for t in tracks}, duration)


def tracks_from_states(agent_id: int, first_step: int, states: Sequence[AgentState]) -> TrackHistory:
    return TrackHistory(agent_id, first_step, np.array([s.as_row() for s in states]))
