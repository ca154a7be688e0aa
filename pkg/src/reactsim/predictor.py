"""Future-motion prediction for agents inside the region of interest.

Three predictors share one output type:

* replay lookahead, exact for agents that follow their log;
* a constant-turn-rate-and-velocity rollout used as a fallback;
* a small learned network (history GRU, lane-feature encoder, single-tick
  interaction attention, maneuver-mode head and a GRU decoder per mode)
  trained with a Gaussian-mixture negative log-likelihood.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import NoLaneWithinRange, lane_curvature, project_to_lane
from .nn import DTYPE, FlatParams, Layout, check_layout
from .scenario import (
    DT,
    SPEED,
    X,
    Y,
    YAW,
    AgentState,
    HDMap,
    Segment,
    TrackHistory,
    wrap_angle,
)

log = logging.getLogger(__name__)

REPLAY_SIGMA = 0.1
KINEMATIC_SIGMA_RATE = 0.2  # m of std-dev per second of horizon
YAW_RATE_WINDOW = 5
HEADING_HOLD = 0.05
SIGMA_FLOOR = 0.01
STATE_FEATURES = 7


class PastEnd(ValueError):
    pass


class InsufficientHistory(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class PredictorConfig:
    history_steps: int = 30
    horizon_steps: int = 50
    dt: float = DT
    modes: int = 3
    hidden: int = 64
    embed: int = 32
    heads: int = 1
    lane_samples: int = 6
    lane_spacing: float = 10.0
    max_neighbors: int = 8
    neighbor_radius: float = 50.0
    lr: float = 1e-3
    lr_decay_every: int = 10
    lr_decay: float = 0.1
    epochs: int = 20
    batch_size: int = 16
    teacher_forcing: bool = True
    anchor_stride: int = 25
    grad_clip: float = 0.0

    def __post_init__(self):
        if min(self.history_steps, self.horizon_steps, self.modes) < 1:
            raise ValueError("history, horizon and mode counts must be at least 1")
        if abs(self.dt - DT) > 1e-12:
            raise ValueError("the predictor runs at 10 Hz only")
        if self.embed % self.heads:
            raise ValueError("embedding width must divide evenly between heads")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PredictorConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(eq=False)
class PredictedTrajectory:
    """Per-mode future means and isotropic std-devs for one agent.

    ``means`` is (K, T, 2) in world coordinates, ``sigmas`` is (K, T).
    ``origin`` is the (x, y, yaw) the prediction starts from.
    """

    agent_id: int
    means: np.ndarray
    sigmas: np.ndarray
    mode_probs: np.ndarray
    origin: tuple[float, float, float]
    truncated: bool = False

    def __post_init__(self):
        self.mode_probs = np.asarray(self.mode_probs, dtype=float)
        self.means = np.asarray(self.means, dtype=float).reshape(len(self.mode_probs), -1, 2)
        self.sigmas = np.asarray(self.sigmas, dtype=float).reshape(self.means.shape[:2])
        if not (self.sigmas > 0).all():
            raise ValueError("sigma must be positive")
        if len(self.mode_probs) > 1 and abs(self.mode_probs.sum() - 1.0) > 1e-6 or len(self.mode_probs) == 1 and self.mode_probs[0] != 1.0:
            raise ValueError("mode probabilities must sum to 1")

    def __len__(self) -> int:
        return self.means.shape[1]

    @property
    def best_mode(self) -> int:
        return 0 if len(self.mode_probs) == 1 else int(np.argmax(self.mode_probs))

    @property
    def point_estimate(self) -> np.ndarray:
        return self.means[self.best_mode]

    @property
    def sigma(self) -> np.ndarray:
        return self.sigmas[self.best_mode]

    def headings(self, mode: int | None = None) -> np.ndarray:
        pts = self.point_estimate if mode is None else self.means[mode]
        return heading_sequence(self.origin, pts)


def heading_sequence(origin, pts: np.ndarray) -> np.ndarray:
    """Heading at each future step from consecutive positions.

    The previous heading is held while a step moves less than 5 cm.
    """
    px, py, yaw = origin
    d = np.empty((len(pts), 2))
    if len(pts):
        d[0] = pts[0, 0] - px, pts[0, 1] - py
        d[1:] = pts[1:] - pts[:-1]
    if (np.hypot(d[:, 0], d[:, 1]) >= HEADING_HOLD).all():
        return np.arctan2(d[:, 1], d[:, 0])
    out = np.empty(len(pts))
    for k in range(len(pts)):
        dx, dy = pts[k, 0] - px, pts[k, 1] - py
        if math.hypot(dx, dy) >= HEADING_HOLD:
            yaw = math.atan2(dy, dx)
            px, py = pts[k, 0], pts[k, 1]
        out[k] = yaw
    return out


def single_mode(agent_id, pts, sigma, origin, truncated=False) -> PredictedTrajectory:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    sig = np.full(len(pts), sigma, dtype=float) if np.ndim(sigma) == 0 else np.array(sigma, dtype=float)
    return PredictedTrajectory(agent_id, pts[None], sig[None], np.array([1.0]), origin, truncated)


# --- replay and kinematic -------------------------------------------------------


def predict_replay(track: TrackHistory, t: int, T: int, index_offset: int = 0) -> PredictedTrajectory:
    """Future straight from the log.

    ``index_offset`` shifts tick ``t`` to log step ``t - index_offset`` for
    agents that resumed replay after a takeover.
    """
    step = t - index_offset
    if step > track.last_step:
        raise PastEnd(f"agent {track.agent_id} log ends at {track.last_step}, asked for {step}")
    rows = track.window(step + 1, step + 1 + T)
    cur = track.row(step) if track.covers(step) else rows[0]
    origin = (float(cur[X]), float(cur[Y]), float(cur[YAW]))
    pts = np.ascontiguousarray(rows[:, X : Y + 1])
    return single_mode(track.agent_id, pts, REPLAY_SIGMA, origin, truncated=len(rows) < T)


def predict_kinematic(history: TrackHistory, T: int, dt: float = DT) -> PredictedTrajectory:
    """Constant turn rate and velocity from the last state.

    The turn rate is the mean of the last five per-tick heading changes.
    Each step is integrated along its exact circular arc.
    """
    return kinematic_rollout(history.agent_id, history.data, T, dt)


def kinematic_rollout(agent_id, data: np.ndarray, T: int, dt: float = DT) -> PredictedTrajectory:
    """:func:`predict_kinematic` on raw state rows, oldest first."""
    if len(data) < 2:
        raise InsufficientHistory(f"agent {agent_id} has {len(data)} state(s)")
    yaws = data[-(YAW_RATE_WINDOW + 1):, YAW]
    deltas = [wrap_angle(float(b - a)) for a, b in zip(yaws[:-1], yaws[1:])]
    omega = sum(deltas) / len(deltas) / dt
    x, y, yaw, v = (float(data[-1, c]) for c in (X, Y, YAW, SPEED))
    if abs(omega) < 1e-9:
        k = np.arange(1, T + 1)
        pts = np.stack([x + v * dt * k * math.cos(yaw), y + v * dt * k * math.sin(yaw)], axis=1)
    else:
        yaws = yaw + omega * dt * np.arange(T + 1)
        r = v / omega
        steps = np.stack([r * np.diff(np.sin(yaws)), -r * np.diff(np.cos(yaws))], axis=1)
        pts = np.cumsum(steps, axis=0) + (x, y)
    sigma = KINEMATIC_SIGMA_RATE * dt * np.arange(1, T + 1)
    return single_mode(agent_id, pts, sigma, (x, y, yaw))


# --- learned predictor ----------------------------------------------------------


def predictor_layout(cfg: PredictorConfig) -> Layout:
    H, E, K = cfg.hidden, cfg.embed, cfg.modes
    ctx = H + 2 * E
    L = 2 * cfg.lane_samples
    return Layout(
        [
            ("hist.w_ih", (3 * H, 2)),
            ("hist.w_hh", (3 * H, H)),
            ("hist.b_ih", (3 * H,)),
            ("hist.b_hh", (3 * H,)),
            ("lane.w", (E, L)),
            ("lane.b", (E,)),
            ("inter.w_emb", (E, STATE_FEATURES)),
            ("inter.b_emb", (E,)),
            ("inter.w_q", (E, E)),
            ("inter.w_k", (E, E)),
            ("inter.w_v", (E, E)),
            ("mode.w", (K, ctx)),
            ("mode.b", (K,)),
            ("dec.w_init", (H, ctx + K)),
            ("dec.b_init", (H,)),
            ("dec.w_ih", (3 * H, 2)),
            ("dec.w_hh", (3 * H, H)),
            ("dec.b_ih", (3 * H,)),
            ("dec.b_hh", (3 * H,)),
            ("out.w", (3, H)),
            ("out.b", (3,)),
        ]
    )


def init_params(cfg: PredictorConfig, seed: int = 0) -> FlatParams:
    layout = predictor_layout(cfg)
    vec = layout.init(np.random.default_rng(seed))
    return FlatParams(layout, vec, asdict(cfg), seed, "predictor")


def zero_params(cfg: PredictorConfig) -> FlatParams:
    layout = predictor_layout(cfg)
    return FlatParams(layout, np.zeros(layout.size), asdict(cfg), None, "predictor")


def _gru(x, h, w_ih, w_hh, b_ih, b_hh):
    gi = x @ w_ih.T + b_ih
    gh = h @ w_hh.T + b_hh
    ir, iz, inn = gi.chunk(3, dim=-1)
    hr, hz, hn = gh.chunk(3, dim=-1)
    r = torch.sigmoid(ir + hr)
    z = torch.sigmoid(iz + hz)
    n = torch.tanh(inn + r * hn)
    return (1 - z) * n + z * h


@dataclass
class Batch:
    """Agent-frame tensors for a batch of prediction queries."""

    hist: torch.Tensor  # (B, tau, 2) per-tick displacements
    hist_mask: torch.Tensor  # (B, tau) bool
    lane: torch.Tensor  # (B, 2 * lane_samples)
    states: torch.Tensor  # (B, N, 7); slot 0 is the target itself
    state_mask: torch.Tensor  # (B, N) bool
    last_disp: torch.Tensor  # (B, 2)
    truth: torch.Tensor | None = None  # (B, T, 2) future positions, agent frame
    origin: np.ndarray | None = None  # (B, 3) world x, y, yaw
    agent_ids: list = field(default_factory=list)

    def __len__(self):
        return self.hist.shape[0]

    def subset(self, idx) -> "Batch":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        ii = idx.numpy()
        return Batch(
            self.hist[idx], self.hist_mask[idx], self.lane[idx], self.states[idx], self.state_mask[idx],
            self.last_disp[idx], None if self.truth is None else self.truth[idx],
            None if self.origin is None else self.origin[ii], [self.agent_ids[i] for i in ii],
        )


def forward(p: dict[str, torch.Tensor], batch: Batch, cfg: PredictorConfig, teacher_forcing: bool = False):
    """Run the network. Returns agent-frame means (B, K, T, 2), sigmas (B, K, T) and mode logits (B, K)."""
    B = len(batch)
    H, K, T = cfg.hidden, cfg.modes, cfg.horizon_steps

    # history encoder; padded ticks leave the hidden state untouched
    h = torch.zeros(B, H, dtype=DTYPE)
    for k in range(batch.hist.shape[1]):
        h_new = _gru(batch.hist[:, k], h, p["hist.w_ih"], p["hist.w_hh"], p["hist.b_ih"], p["hist.b_hh"])
        h = torch.where(batch.hist_mask[:, k : k + 1], h_new, h)

    lane = torch.relu(batch.lane @ p["lane.w"].T + p["lane.b"])

    # interaction: the target attends over the current states of everyone in view
    emb = torch.relu(batch.states @ p["inter.w_emb"].T + p["inter.b_emb"])  # (B, N, E)
    q = emb[:, 0] @ p["inter.w_q"].T  # (B, E)
    k_ = emb @ p["inter.w_k"].T
    v = emb @ p["inter.w_v"].T
    nh = cfg.heads
    dh = cfg.embed // nh
    qh = q.view(B, nh, dh)
    kh = k_.view(B, -1, nh, dh)
    vh = v.view(B, -1, nh, dh)
    scores = torch.einsum("bhd,bnhd->bhn", qh, kh) / math.sqrt(dh)
    scores = scores.masked_fill(~batch.state_mask[:, None, :], float("-inf"))
    att = torch.softmax(scores, dim=-1)
    inter = torch.einsum("bhn,bnhd->bhd", att, vh).reshape(B, cfg.embed)

    ctx = torch.cat([h, inter, lane], dim=-1)
    logits = ctx @ p["mode.w"].T + p["mode.b"]

    # decoder, one rollout per mode folded into the batch
    onehot = torch.eye(K, dtype=DTYPE).repeat(B, 1)
    ctx_k = ctx.repeat_interleave(K, dim=0)
    hd = torch.tanh(torch.cat([ctx_k, onehot], dim=-1) @ p["dec.w_init"].T + p["dec.b_init"])
    inp = batch.last_disp.repeat_interleave(K, dim=0)
    pos = torch.zeros(B * K, 2, dtype=DTYPE)
    if teacher_forcing:
        truth = batch.truth.repeat_interleave(K, dim=0)
        prev_truth = torch.cat([torch.zeros(B * K, 1, 2, dtype=DTYPE), truth], dim=1)
        gt_disp = prev_truth[:, 1:] - prev_truth[:, :-1]
    means, sigmas = [], []
    for t in range(T):
        hd = _gru(inp, hd, p["dec.w_ih"], p["dec.w_hh"], p["dec.b_ih"], p["dec.b_hh"])
        out = hd @ p["out.w"].T + p["out.b"]
        # the head predicts a change to the previous step's displacement
        disp = inp + out[:, :2]
        pos = pos + disp
        means.append(pos)
        sigmas.append(F.softplus(out[:, 2]) + SIGMA_FLOOR)
        inp = gt_disp[:, t] if teacher_forcing else disp
    means = torch.stack(means, dim=1).view(B, K, T, 2)
    sigmas = torch.stack(sigmas, dim=1).view(B, K, T)
    return means, sigmas, logits


def mixture_nll(means, sigmas, logits, truth) -> torch.Tensor:
    """Per-sample mixture NLL summed over time, evaluated in log space.

    means (B, K, T, 2), sigmas (B, K, T), logits (B, K), truth (B, T, 2).
    """
    sq = ((truth[:, None] - means) ** 2).sum(-1)
    log_n = -torch.log(2 * math.pi * sigmas**2) - sq / (2 * sigmas**2)
    log_mix = torch.log_softmax(logits, dim=-1) + log_n.sum(-1)
    return -torch.logsumexp(log_mix, dim=-1)


def nll_loss(pred: PredictedTrajectory, truth) -> float:
    """Mixture negative log-likelihood of a future under a prediction (summed over steps)."""
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    if len(truth) != len(pred):
        raise LengthMismatch(f"prediction has {len(pred)} steps, truth has {len(truth)}")
    logits = torch.log(torch.as_tensor(pred.mode_probs, dtype=DTYPE))
    out = mixture_nll(
        torch.as_tensor(pred.means, dtype=DTYPE)[None],
        torch.as_tensor(pred.sigmas, dtype=DTYPE)[None],
        logits[None],
        torch.as_tensor(truth, dtype=DTYPE)[None],
    )
    return float(out[0])


# --- feature construction ---------------------------------------------------------


def _rot(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, s], [-s, c]])  # world -> agent frame


def lane_features(m: HDMap | None, x: float, y: float, yaw: float, cfg: PredictorConfig) -> np.ndarray:
    """Lateral offsets and curvatures of the centerline ahead, in the agent frame."""
    out = np.zeros(2 * cfg.lane_samples)
    if m is None or not m.lanes:
        return out
    try:
        frame = project_to_lane(m, (x, y), yaw)
    except NoLaneWithinRange:
        return out
    R = _rot(yaw)
    lane = m.lane(frame.lane_id)
    s = frame.s
    for j in range(cfg.lane_samples):
        s += cfg.lane_spacing
        while s > lane.length:
            succ = [to for to, rel in m.neighbors(lane.id) if rel == "successor"]
            if not succ:
                break
            s -= lane.length
            lane = m.lane(min(succ))
        p = lane.point_at(s)
        if s > lane.length:
            # extend straight past a dead end
            d = lane.centerline[-1] - lane.centerline[-2]
            p = lane.centerline[-1] + (s - lane.length) * d / np.hypot(*d)
        local = R @ (p - np.array([x, y]))
        out[2 * j] = local[1] / 10.0
        out[2 * j + 1] = lane_curvature(lane, min(s, lane.length)) * 10.0
    return out


def _state_feature(R, origin_xy, yaw0, row) -> np.ndarray:
    rel = R @ (np.array([row[0], row[1]]) - origin_xy)
    dyaw = row[2] - yaw0
    return np.array(
        [rel[0] / 20.0, rel[1] / 20.0, math.cos(dyaw), math.sin(dyaw), row[3] / 20.0, row[5] / 5.0, row[4] / 5.0]
    )


def build_query(
    target: int,
    history_rows: np.ndarray,
    history_valid: np.ndarray,
    current: Mapping[int, np.ndarray],
    m: HDMap | None,
    cfg: PredictorConfig,
    truth_world: np.ndarray | None = None,
):
    """Agent-frame arrays for one prediction query.

    ``history_rows`` holds tau+1 state rows ending at the current tick, with
    ``history_valid`` marking real (unpadded) rows. ``current`` maps agent id to
    its current state row; neighbours are ordered by distance then id.
    """
    tau = cfg.history_steps
    cur = current[target]
    x0, y0, yaw0 = float(cur[X]), float(cur[Y]), float(cur[YAW])
    R = _rot(yaw0)
    o = np.array([x0, y0])
    pts = history_rows[:, [X, Y]]
    disp = np.diff(pts, axis=0) @ R.T
    mask = history_valid[1:] & history_valid[:-1]
    disp = np.where(mask[:, None], disp, 0.0)
    if mask[-1]:
        last = disp[-1].copy()
    else:
        last = np.array([cur[SPEED] * cfg.dt, 0.0])

    others = []
    for aid, row in current.items():
        if aid == target:
            continue
        d = math.hypot(row[X] - x0, row[Y] - y0)
        if d <= cfg.neighbor_radius:
            others.append((d, aid, row))
    others.sort(key=lambda r: (r[0], r[1]))
    others = others[: cfg.max_neighbors]
    feats = np.zeros((cfg.max_neighbors + 1, STATE_FEATURES))
    smask = np.zeros(cfg.max_neighbors + 1, dtype=bool)
    feats[0] = _state_feature(R, o, yaw0, [x0, y0, yaw0, cur[SPEED], cur[4], cur[5]])
    smask[0] = True
    for j, (_, _, row) in enumerate(others, start=1):
        feats[j] = _state_feature(R, o, yaw0, [row[X], row[Y], row[YAW], row[SPEED], row[4], row[5]])
        smask[j] = True
    truth = None
    if truth_world is not None:
        truth = (truth_world - o) @ R.T
    return disp[-tau:], mask[-tau:], lane_features(m, x0, y0, yaw0, cfg), feats, smask, last, truth, (x0, y0, yaw0)


def collate(queries, agent_ids) -> Batch:
    hist, hmask, lane, st, smask, last, truth, origin = zip(*queries)
    has_truth = all(t is not None for t in truth)
    return Batch(
        torch.as_tensor(np.stack(hist), dtype=DTYPE),
        torch.as_tensor(np.stack(hmask)),
        torch.as_tensor(np.stack(lane), dtype=DTYPE),
        torch.as_tensor(np.stack(st), dtype=DTYPE),
        torch.as_tensor(np.stack(smask)),
        torch.as_tensor(np.stack(last), dtype=DTYPE),
        torch.as_tensor(np.stack(truth), dtype=DTYPE) if has_truth else None,
        np.array(origin),
        list(agent_ids),
    )


def _history_window(track: TrackHistory, t: int, tau: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.zeros((tau + 1, 6))
    valid = np.zeros(tau + 1, dtype=bool)
    for j, step in enumerate(range(t - tau, t + 1)):
        if track.covers(step):
            rows[j] = track.row(step)
            valid[j] = True
    return rows, valid


def to_world(means, sigmas, logits, batch: Batch) -> list[PredictedTrajectory]:
    out = []
    m = means.detach().numpy()
    s = sigmas.detach().numpy()
    probs = torch.softmax(logits, dim=-1).detach().numpy()
    for b in range(len(batch)):
        x0, y0, yaw0 = batch.origin[b]
        R = _rot(yaw0)
        world = m[b] @ R + np.array([x0, y0])
        pr = probs[b] / probs[b].sum()
        out.append(PredictedTrajectory(batch.agent_ids[b], world, s[b], pr, (x0, y0, yaw0)))
    return out


def predict_learned(
    params: FlatParams,
    histories: Mapping[int, TrackHistory],
    current: Mapping[int, AgentState],
    m: HDMap | None,
    target: int,
    cfg: PredictorConfig | None = None,
) -> PredictedTrajectory:
    """Predict the target's future from its history, the current scene and the map.

    Histories end at the current tick; missing early ticks are padded and
    masked, so an agent that just appeared is handled like any other.
    """
    cfg = cfg or PredictorConfig.from_dict(params.config)
    layout = predictor_layout(cfg)
    check_layout(params, layout)
    if target not in current:
        raise KeyError(f"target {target} is not in the current scene")
    track = histories[target]
    t = track.last_step
    rows, valid = _history_window(track, t, cfg.history_steps)
    cur_rows = {aid: s.as_row() for aid, s in current.items()}
    q = build_query(target, rows, valid, cur_rows, m, cfg)
    batch = collate([q], [target])
    with torch.no_grad():
        p = layout.unflatten(params.tensor())
        means, sigmas, logits = forward(p, batch, cfg)
    return to_world(means, sigmas, logits, batch)[0]


# --- training --------------------------------------------------------------------


def extract_samples(segments: Sequence[Segment], cfg: PredictorConfig) -> Batch:
    """Training queries at regularly spaced anchor ticks of every segment."""
    tau, T = cfg.history_steps, cfg.horizon_steps
    queries, ids = [], []
    for seg in segments:
        log_ = seg.log
        for t in range(tau, log_.duration_steps - T, cfg.anchor_stride):
            present = {aid: tr.row(t) for aid, tr in log_.tracks.items() if tr.covers(t)}
            for aid, tr in log_.tracks.items():
                if not (tr.covers(t) and tr.covers(t + T)):
                    continue
                rows, valid = _history_window(tr, t, tau)
                truth = tr.window(t + 1, t + 1 + T)[:, [X, Y]]
                queries.append(build_query(aid, rows, valid, present, log_.map, cfg, truth))
                ids.append(aid)
    if not queries:
        raise ValueError("no training samples: segments are too short or empty")
    return collate(queries, ids)


def batch_loss(vec: torch.Tensor, batch: Batch, cfg: PredictorConfig, teacher_forcing: bool | None = None):
    layout = predictor_layout(cfg)
    p = layout.unflatten(vec)
    tf = cfg.teacher_forcing if teacher_forcing is None else teacher_forcing
    means, sigmas, logits = forward(p, batch, cfg, teacher_forcing=tf)
    return mixture_nll(means, sigmas, logits, batch.truth).mean() / cfg.horizon_steps


def train_predictor(
    data: Sequence[Segment] | Batch,
    cfg: PredictorConfig | None = None,
    seed: int = 0,
    init: FlatParams | None = None,
) -> FlatParams:
    """Adam on the mean per-step mixture NLL, learning rate cut tenfold every few epochs.

    Returns the trained parameters with ``curve`` holding (epoch, loss) rows.
    """
    cfg = cfg or PredictorConfig()
    batch = data if isinstance(data, Batch) else extract_samples(data, cfg)
    if len(batch) == 0:
        raise ValueError("no training data")
    params = init.copy() if init is not None else init_params(cfg, seed)
    check_layout(params, predictor_layout(cfg))
    rng = np.random.default_rng(seed)
    vec = params.tensor(requires_grad=True)
    opt = torch.optim.Adam([vec], lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(len(batch))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            sub = batch.subset(idx)
            opt.zero_grad()
            loss = batch_loss(vec, sub, cfg)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, batch starting at {start}: loss {float(loss)}")
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_([vec], cfg.grad_clip)
            opt.step()
            if not torch.all(torch.isfinite(vec)):
                raise NonFiniteLoss(f"epoch {epoch}: parameters became non-finite")
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        curve.append({"epoch": epoch, "loss": total / count})
        log.debug("epoch %d lr %.1e loss %.5f", epoch, lr, total / count)
    out = FlatParams(params.layout, vec.detach().numpy().copy(), asdict(cfg), seed, "predictor", curve)
    return out


def evaluate_ade(params: FlatParams, batch: Batch, cfg: PredictorConfig | None = None) -> float:
    """Mean displacement of the most likely mode over the horizon (agent frame)."""
    cfg = cfg or PredictorConfig.from_dict(params.config)
    layout = predictor_layout(cfg)
    with torch.no_grad():
        means, _, logits = forward(layout.unflatten(params.tensor()), batch, cfg)
        best = logits.argmax(-1)
        pts = means[torch.arange(len(batch)), best]
        return float(torch.linalg.norm(pts - batch.truth, dim=-1).mean())
