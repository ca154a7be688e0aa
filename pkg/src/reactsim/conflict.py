"""Pairwise conflict detection on predicted futures."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import IO, Iterable, Mapping

import numpy as np

from .geometry import obb_overlap_arrays
from .predictor import PredictedTrajectory


@dataclass(frozen=True)
class Conflict:
    """Predicted box overlap between two agents.

    ``first_step`` counts ticks ahead of the prediction origin (1 = next tick).
    ``cross_point`` is the midpoint of the two box centers at that step and
    ``penetration`` the smallest projected overlap over the separating axes.
    """

    pair: tuple[int, int]
    first_step: int
    cross_point: tuple[float, float]
    penetration: float

    def __post_init__(self):
        a, b = self.pair
        if not a < b:
            raise ValueError(f"conflict pair must be ordered, got {self.pair}")
        if self.first_step < 1:
            raise ValueError("first_step starts at 1")

    def involves(self, agent_id) -> bool:
        return agent_id in self.pair

    def other(self, agent_id):
        a, b = self.pair
        return b if agent_id == a else a


def _track(pred: PredictedTrajectory, mode: int | None):
    pts = pred.point_estimate if mode is None else pred.means[mode]
    return pts, pred.headings(mode)


def _first_overlap(pa, ha, dims_a, pb, hb, dims_b, inflation):
    n = min(len(pa), len(pb))
    if n == 0:
        return None
    wa, la = dims_a
    wb, lb = dims_b
    hit, pen = obb_overlap_arrays(
        pa[:n, 0], pa[:n, 1], ha[:n], la / 2 + inflation, wa / 2 + inflation,
        pb[:n, 0], pb[:n, 1], hb[:n], lb / 2 + inflation, wb / 2 + inflation,
    )
    idx = np.flatnonzero(hit)
    if len(idx) == 0:
        return None
    k = int(idx[0])
    mid = (pa[k] + pb[k]) / 2
    return k + 1, (float(mid[0]), float(mid[1])), float(pen[k])


def detect_pair(
    a: PredictedTrajectory,
    b: PredictedTrajectory,
    dims_a: tuple[float, float],
    dims_b: tuple[float, float],
    inflation: float = 0.0,
    all_modes: bool = False,
) -> Conflict | None:
    """Earliest future step at which the two predicted boxes overlap.

    ``dims`` are (width, length). By default only the most likely mode of each
    prediction is checked; ``all_modes`` takes the earliest over every mode pair.
    Unequal horizons are compared over their common prefix.
    """
    if a.agent_id == b.agent_id:
        raise ValueError("cannot check an agent against itself")
    if a.agent_id > b.agent_id:
        a, b, dims_a, dims_b = b, a, dims_b, dims_a
    modes_a = range(len(a.mode_probs)) if all_modes else [None]
    modes_b = range(len(b.mode_probs)) if all_modes else [None]
    best = None
    for ma in modes_a:
        pa, ha = _track(a, ma)
        for mb in modes_b:
            pb, hb = _track(b, mb)
            hit = _first_overlap(pa, ha, dims_a, pb, hb, dims_b, inflation)
            if hit is not None and (best is None or hit[0] < best[0]):
                best = hit
    if best is None:
        return None
    return Conflict((a.agent_id, b.agent_id), best[0], best[1], best[2])


def _may_touch(pa, pb, ra, rb) -> bool:
    """Coarse phase: bounding circles of the two boxes meet at some common step."""
    n = min(len(pa), len(pb))
    if n == 0:
        return False
    d = np.hypot(pa[:n, 0] - pb[:n, 0], pa[:n, 1] - pb[:n, 1])
    return bool(np.any(d <= ra + rb))


@lru_cache(maxsize=64)
def _pairs(n: int):
    return np.triu_indices(n, 1)


def detect_all(
    preds: Mapping[int, PredictedTrajectory],
    dims: Mapping[int, tuple[float, float]],
    ego=None,
    inflation: float = 0.0,
    prune: bool = True,
) -> list[Conflict]:
    """All pairwise conflicts, sorted by (first_step, pair).

    Ego-vs-background and background-vs-background pairs are treated alike;
    ``ego`` only has to be among the predictions when given. All pairs are
    tested in one batch over the padded horizon; steps beyond either
    prediction's length never count.
    """
    if ego is not None and ego not in preds:
        raise KeyError(f"ego {ego} has no prediction")
    ids = sorted(preds)
    if len(ids) < 2:
        return []
    est = [preds[i].point_estimate for i in ids]
    T = max(len(p) for p in est)
    if T == 0:
        return []
    pts = np.full((len(ids), T, 2), np.nan)
    for n, p in enumerate(est):
        pts[n, : len(p)] = p
    wid = np.array([dims[i][0] for i in ids], dtype=float)
    lng = np.array([dims[i][1] for i in ids], dtype=float)
    ia, ib = _pairs(len(ids))
    pa, pb = pts[ia], pts[ib]
    if prune:
        radius = np.hypot(wid, lng) / 2 + inflation * math.sqrt(2)
        diff = pa - pb
        d = np.hypot(diff[..., 0], diff[..., 1])
        near = (d <= (radius[ia] + radius[ib])[:, None]).any(axis=1)
        ia, ib, pa, pb = ia[near], ib[near], pa[near], pb[near]
    if len(ia) == 0:
        return []
    hdg = np.zeros((len(ids), T))
    for n in set(ia.tolist()) | set(ib.tolist()):
        h = preds[ids[n]].headings()
        hdg[n, : len(h)] = h
    hit, pen = obb_overlap_arrays(
        pa[..., 0], pa[..., 1], hdg[ia], (lng[ia] / 2 + inflation)[:, None], (wid[ia] / 2 + inflation)[:, None],
        pb[..., 0], pb[..., 1], hdg[ib], (lng[ib] / 2 + inflation)[:, None], (wid[ib] / 2 + inflation)[:, None],
    )
    # padded steps are NaN and compare False
    out = []
    for r in np.flatnonzero(hit.any(axis=1)):
        k = int(np.argmax(hit[r]))
        mid = (pa[r, k] + pb[r, k]) / 2
        out.append(Conflict((ids[ia[r]], ids[ib[r]]), k + 1, (float(mid[0]), float(mid[1])), float(pen[r, k])))
    out.sort(key=lambda c: (c.first_step, c.pair))
    return out


CONFLICT_COLUMNS = ("tick", "agent_a", "agent_b", "first_step", "cross_x", "cross_y", "penetration", "trigger")


@dataclass(frozen=True)
class ConflictRecord:
    tick: int
    conflict: Conflict
    trigger: str = "background"

    def row(self) -> tuple:
        c = self.conflict
        return (self.tick, c.pair[0], c.pair[1], c.first_step, c.cross_point[0], c.cross_point[1], c.penetration, self.trigger)


def write_conflict_trace(records: Iterable[ConflictRecord], sink: IO[bytes]) -> None:
    lines = [",".join(CONFLICT_COLUMNS)]
    for r in records:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in r.row()))
    sink.write(("\n".join(lines) + "\n").encode())


def read_conflict_trace(source: IO[bytes]) -> list[ConflictRecord]:
    lines = source.read().decode().splitlines()
    if not lines or lines[0] != ",".join(CONFLICT_COLUMNS):
        raise ValueError("not a conflict trace")
    out = []
    for line in lines[1:]:
        t, a, b, s, cx, cy, pen, trig = line.split(",")
        out.append(ConflictRecord(int(t), Conflict((int(a), int(b)), int(s), (float(cx), float(cy)), float(pen)), trig))
    return out
