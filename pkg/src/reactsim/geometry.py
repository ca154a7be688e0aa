"""Box overlap, Bezier paths and lane-relative coordinates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scenario import HDMap, Lane, wrap_angle

CURVATURE_SPACING = 2.0
CURVATURE_FLOOR = 1e-4
MAX_LANE_DISTANCE = 20.0
LANE_SLACK = 5.0
FIT_TOLERANCE = 0.5
_FIT_SAMPLES = 64
_TABLE_SAMPLES = 32


class DegenerateInput(ValueError):
    pass


class NoLaneWithinRange(ValueError):
    pass


# --- oriented boxes -----------------------------------------------------------


@dataclass(frozen=True)
class OrientedBox:
    center: tuple[float, float]
    half_extents: tuple[float, float]  # (half length along heading, half width)
    yaw: float

    def __post_init__(self):
        if not (self.half_extents[0] > 0 and self.half_extents[1] > 0):
            raise ValueError("half extents must be strictly positive")

    @classmethod
    def from_agent(cls, x, y, yaw, length, width, inflation: float = 0.0) -> "OrientedBox":
        return cls((x, y), (length / 2 + inflation, width / 2 + inflation), yaw)

    def axes(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, s], [-s, c]])

    def corners(self) -> np.ndarray:
        ax = self.axes()
        hl, hw = self.half_extents
        ctr = np.asarray(self.center, dtype=float)
        return np.array(
            [
                ctr + hl * ax[0] + hw * ax[1],
                ctr - hl * ax[0] + hw * ax[1],
                ctr - hl * ax[0] - hw * ax[1],
                ctr + hl * ax[0] - hw * ax[1],
            ]
        )


def obb_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Closed-set separating-axis test: touching boxes count as overlapping."""
    res = obb_overlap_arrays(
        np.array([a.center[0]]), np.array([a.center[1]]), np.array([a.yaw]),
        np.array([a.half_extents[0]]), np.array([a.half_extents[1]]),
        np.array([b.center[0]]), np.array([b.center[1]]), np.array([b.yaw]),
        np.array([b.half_extents[0]]), np.array([b.half_extents[1]]),
    )
    return bool(res[0][0])


def obb_overlap_arrays(ax, ay, ayaw, ahl, ahw, bx, by, byaw, bhl, bhw):
    """Vectorised separating-axis test.

    Returns ``(overlap, penetration)`` where penetration is the smallest
    projected overlap over the four candidate axes (negative when separated).
    """
    ca, sa = np.cos(ayaw), np.sin(ayaw)
    cb, sb = np.cos(byaw), np.sin(byaw)
    dx, dy = bx - ax, by - ay
    # |cos| and |sin| of the relative heading give every cross projection
    c = np.abs(ca * cb + sa * sb)
    s = np.abs(sa * cb - ca * sb)
    pen = ahl + bhl * c + bhw * s - np.abs(dx * ca + dy * sa)
    pen = np.minimum(pen, ahw + bhl * s + bhw * c - np.abs(dy * ca - dx * sa))
    pen = np.minimum(pen, bhl + ahl * c + ahw * s - np.abs(dx * cb + dy * sb))
    pen = np.minimum(pen, bhw + ahl * s + ahw * c - np.abs(dy * cb - dx * sb))
    return pen >= 0.0, pen


# --- Bezier paths -------------------------------------------------------------


def de_casteljau(ctrl: np.ndarray, u: float) -> np.ndarray:
    pts = np.array(ctrl, dtype=float)
    while len(pts) > 1:
        pts = (1.0 - u) * pts[:-1] + u * pts[1:]
    return pts[0]


def _cubic_eval(ctrl: np.ndarray, u: np.ndarray) -> np.ndarray:
    u = u[:, None]
    v = 1.0 - u
    return (
        v**3 * ctrl[0] + 3 * v**2 * u * ctrl[1] + 3 * v * u**2 * ctrl[2] + u**3 * ctrl[3]
    )


@dataclass(frozen=True, eq=False)
class BezierPath:
    """A chain of Bezier segments sharing a global parameter in [0, 1].

    Segment ``i`` of ``n`` covers ``[i/n, (i+1)/n]``. A single segment of any
    degree is allowed; fitted paths are cubic.
    """

    segments: tuple[np.ndarray, ...]

    def __post_init__(self):
        segs = tuple(np.array(s, dtype=float).reshape(-1, 2) for s in self.segments)
        if not segs or any(len(s) < 2 for s in segs):
            raise ValueError("a Bezier path needs at least 2 control points per segment")
        for s in segs:
            s.setflags(write=False)
        object.__setattr__(self, "segments", segs)
        u, pts = self._dense(_TABLE_SAMPLES)
        seg = np.hypot(*np.diff(pts, axis=0).T)
        keep = np.concatenate([[True], seg > 0])
        u, pts = u[keep], pts[keep]
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
        object.__setattr__(self, "_u", u)
        object.__setattr__(self, "_pts", pts)
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def from_control_points(cls, pts) -> "BezierPath":
        return cls((np.asarray(pts, dtype=float),))

    @property
    def control_points(self) -> np.ndarray:
        out = [self.segments[0]]
        for s in self.segments[1:]:
            out.append(s[1:])
        return np.concatenate(out)

    @property
    def degree(self) -> int:
        return len(self.segments[0]) - 1

    def _locate(self, u: float) -> tuple[int, float]:
        n = len(self.segments)
        if u >= 1.0:
            return n - 1, 1.0
        if u <= 0.0:
            return 0, 0.0
        i = min(int(u * n), n - 1)
        return i, u * n - i

    def evaluate(self, u: float) -> np.ndarray:
        if u <= 0.0:
            return self.segments[0][0].copy()
        if u >= 1.0:
            return self.segments[-1][-1].copy()
        i, local = self._locate(u)
        return de_casteljau(self.segments[i], local)

    def _dense(self, per_segment: int) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.segments)
        us, pts = [], []
        for i, seg in enumerate(self.segments):
            loc = np.linspace(0.0, 1.0, per_segment + 1)
            if i > 0:
                loc = loc[1:]
            if len(seg) == 4:
                p = _cubic_eval(seg, loc)
            else:
                p = np.array([de_casteljau(seg, v) for v in loc])
            us.append((i + loc) / n)
            pts.append(p)
        pts = np.concatenate(pts)
        pts[0] = self.segments[0][0]
        pts[-1] = self.segments[-1][-1]
        return np.concatenate(us), pts

    @property
    def arclength_table(self) -> np.ndarray:
        """Rows of (parameter, cumulative length)."""
        return np.column_stack([self._u, self._cum])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    @property
    def polyline(self) -> np.ndarray:
        return self._pts

    def point_at_length(self, s: float) -> np.ndarray:
        """Point at arclength ``s``; beyond the end the final tangent is extended."""
        cum, pts = self._cum, self._pts
        if len(pts) == 1:
            return pts[0].copy()
        if s >= cum[-1]:
            d = pts[-1] - pts[-2]
            d = d / np.hypot(*d)
            return pts[-1] + (s - cum[-1]) * d
        if s <= 0:
            return pts[0].copy()
        i = int(np.searchsorted(cum, s, side="right") - 1)
        t = (s - cum[i]) / (cum[i + 1] - cum[i])
        return pts[i] + t * (pts[i + 1] - pts[i])

    def heading_at_length(self, s: float) -> float:
        cum, pts = self._cum, self._pts
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(pts) - 2))
        d = pts[i + 1] - pts[i]
        return math.atan2(d[1], d[0])

    def project(self, p) -> tuple[float, float]:
        """Closest arclength on the path and the distance to it."""
        p = np.asarray(p, dtype=float)
        a, b = self._pts[:-1], self._pts[1:]
        if len(a) == 0:
            return 0.0, float(np.hypot(*(p - self._pts[0])))
        ab = b - a
        ll = np.einsum("ij,ij->i", ab, ab)
        t = np.clip(np.einsum("ij,ij->i", p - a, ab) / ll, 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.hypot(*(proj - p).T)
        i = int(np.argmin(d))
        return float(self._cum[i] + t[i] * math.sqrt(ll[i])), float(d[i])


def point_polyline_distance(p: np.ndarray, line: np.ndarray) -> np.ndarray:
    """Distance from each point in ``p`` (m, 2) to the polyline ``line`` (n, 2)."""
    p = np.atleast_2d(p)
    a, b = line[:-1], line[1:]
    ab = b - a
    ll = np.einsum("ij,ij->i", ab, ab)
    ll = np.where(ll > 0, ll, 1.0)
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("mij,ij->mi", ap, ab) / ll, 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.min(np.hypot(*(p[:, None, :] - proj).transpose(2, 0, 1)), axis=1)


def _dedup(pts: np.ndarray) -> np.ndarray:
    keep = [0]
    for i in range(1, len(pts)):
        if np.hypot(*(pts[i] - pts[keep[-1]])) > 1e-9:
            keep.append(i)
    return pts[keep]


def _fit_once(pts: np.ndarray) -> list[np.ndarray]:
    n = len(pts)
    chords = np.hypot(*np.diff(pts, axis=0).T)
    tangents = np.zeros_like(pts)
    for i in range(n):
        if i == 0:
            d = pts[1] - pts[0]
            mag = chords[0]
        elif i == n - 1:
            d = pts[-1] - pts[-2]
            mag = chords[-1]
        else:
            d = pts[i + 1] - pts[i - 1]
            mag = min(chords[i - 1], chords[i])
        norm = np.hypot(*d)
        tangents[i] = d / norm * mag if norm > 0 else 0.0
    segs = []
    for i in range(n - 1):
        segs.append(
            np.array([pts[i], pts[i] + tangents[i] / 3.0, pts[i + 1] - tangents[i + 1] / 3.0, pts[i + 1]])
        )
    return segs


def bezier_fit(waypoints: Sequence, tolerance: float = FIT_TOLERANCE, max_rounds: int = 12) -> BezierPath:
    """Piecewise cubic through every waypoint, C1 at the joins.

    Tangents are symmetric about each join, so with the uniform global
    parameter the first derivative is continuous. Spans that stray further than
    ``tolerance`` from the waypoint polyline are split at their midpoint and the
    fit is redone.
    """
    pts = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise DegenerateInput("need at least 2 waypoints")
    pts = _dedup(pts)
    if len(pts) < 2:
        raise DegenerateInput("all waypoints coincide")
    loc = np.linspace(0.0, 1.0, _FIT_SAMPLES + 1)
    for _ in range(max_rounds):
        segs = _fit_once(pts)
        worst = np.array([
            point_polyline_distance(_cubic_eval(s, loc), pts[i : i + 2]).max() for i, s in enumerate(segs)
        ])
        bad = np.nonzero(worst > tolerance)[0]
        if len(bad) == 0:
            return BezierPath(tuple(segs))
        mids = {int(i): 0.5 * (pts[i] + pts[i + 1]) for i in bad}
        new = []
        for i in range(len(pts)):
            new.append(pts[i])
            if i in mids:
                new.append(mids[i])
        pts = np.array(new)
    # fall back to straight segments, which have zero deviation
    return BezierPath(tuple(np.array([a, a + (b - a) / 3, a + 2 * (b - a) / 3, b]) for a, b in zip(pts[:-1], pts[1:])))


# --- lane frame ---------------------------------------------------------------


@dataclass(frozen=True)
class LaneFrame:
    lane_id: int
    s: float
    d: float
    heading_err: float
    curvature: float
    point: tuple[float, float]
    marker_dist_left: float
    marker_dist_right: float
    road_dist_left: float
    road_dist_right: float
    distance: float


def circumradius_curvature(p0, p1, p2) -> float:
    """Signed curvature of the circle through three points (left turn positive)."""
    a = math.dist(p0, p1)
    b = math.dist(p1, p2)
    c = math.dist(p0, p2)
    cross = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
    if a * b * c == 0:
        return 0.0
    k = 2.0 * cross / (a * b * c)
    return 0.0 if abs(k) < CURVATURE_FLOOR else k


def lane_curvature(lane: Lane, s: float, spacing: float = CURVATURE_SPACING) -> float:
    total = lane.length
    if total < 2 * spacing:
        spacing = total / 2
    mid = min(max(s, spacing), total - spacing)
    return circumradius_curvature(lane.point_at(mid - spacing), lane.point_at(mid), lane.point_at(mid + spacing))


def _project_polyline(line: np.ndarray, cum: np.ndarray, p: np.ndarray):
    a, b = line[:-1], line[1:]
    ab = b - a
    ll = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / ll, 0.0, 1.0)
    proj = a + t[:, None] * ab
    dist = np.hypot(*(proj - p).T)
    i = int(np.argmin(dist))
    return i, float(t[i]), proj[i], float(dist[i])


def lane_station(lane: Lane, p) -> tuple[float, float]:
    """Arclength of the closest centerline point to ``p`` and the distance to it."""
    i, t, _, dist = _project_polyline(lane.centerline, lane.arclength, np.asarray(p, dtype=float))
    return float(lane.arclength[i] + t * (lane.arclength[i + 1] - lane.arclength[i])), dist


def _signed_side(line: np.ndarray, p: np.ndarray, heading: float) -> float:
    """Distance from p to the polyline, positive if the polyline lies to the left."""
    if len(line) < 2:
        return math.nan
    a, b = line[:-1], line[1:]
    ab = b - a
    ll = np.einsum("ij,ij->i", ab, ab)
    ll = np.where(ll > 0, ll, 1.0)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / ll, 0.0, 1.0)
    proj = a + t[:, None] * ab
    dist = np.hypot(*(proj - p).T)
    i = int(np.argmin(dist))
    v = proj[i] - p
    side = -math.sin(heading) * v[0] + math.cos(heading) * v[1]
    return dist[i] if side >= 0 else -dist[i]


def project_to_lane(m: HDMap, p, yaw: float) -> LaneFrame:
    """Lane-relative coordinates of a pose on the nearest lane.

    Ties in distance go to the lane whose direction best matches ``yaw``.
    """
    if not m.lanes:
        raise NoLaneWithinRange("map has no lanes")
    p = np.asarray(p, dtype=float)
    best = None
    for lane in m.lanes:
        i, t, proj, dist = _project_polyline(lane.centerline, lane.arclength, p)
        seg = lane.centerline[i + 1] - lane.centerline[i]
        heading = math.atan2(seg[1], seg[0])
        herr = wrap_angle(yaw - heading)
        key = (round(dist, 9), abs(herr), lane.id)
        if best is None or key < best[0]:
            best = (key, lane, i, t, proj, dist, heading, herr)
    _, lane, i, t, proj, dist, heading, herr = best
    if dist > MAX_LANE_DISTANCE or dist > lane.width + LANE_SLACK:
        raise NoLaneWithinRange(f"point {p.tolist()} is {dist:.2f} m from the nearest lane")
    s = float(lane.arclength[i] + t * (lane.arclength[i + 1] - lane.arclength[i]))
    rel = p - proj
    d = -math.sin(heading) * rel[0] + math.cos(heading) * rel[1]

    if len(lane.left) >= 2:
        ml = abs(_signed_side(lane.left, p, heading))
    else:
        ml = max(lane.width / 2 - d, 0.0)
    if len(lane.right) >= 2:
        mr = abs(_signed_side(lane.right, p, heading))
    else:
        mr = max(lane.width / 2 + d, 0.0)
    rl, rr = math.inf, math.inf
    for edge in m.road_edges:
        sd = _signed_side(edge, p, heading)
        if math.isnan(sd):
            continue
        if sd >= 0:
            rl = min(rl, sd)
        else:
            rr = min(rr, -sd)
    return LaneFrame(
        lane_id=lane.id,
        s=s,
        d=float(d),
        heading_err=herr,
        curvature=lane_curvature(lane, s),
        point=(float(p[0]), float(p[1])),
        marker_dist_left=float(ml),
        marker_dist_right=float(mr),
        road_dist_left=float(rl),
        road_dist_right=float(rr),
        distance=dist,
    )
