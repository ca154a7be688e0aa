"""Learned takeover policy: a Gaussian MLP trained with clipped-surrogate
policy gradients on a mix of imitation and hand-set rewards.

Everything runs on a synthetic two-lane straight road whose features are
computed in closed form, so rollouts stay cheap. The features follow the same
layout and conventions as :func:`reactsim.control.extract_features`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .control import (
    ACTION_HIGH,
    ACTION_LOW,
    DEFAULT_ROI,
    N_NEIGHBORS,
    NEIGHBOR_SENTINEL,
    ROAD_SENTINEL,
    ControlAction,
    PolicyFeatures,
    takeover_step,
)
from .geometry import obb_overlap_arrays
from .metrics import IDMParams, idm_accel
from .nn import FlatParams, Layout, check_layout
from .scenario import DT, wrap_angles
from .synthetic import CAR_LENGTH, CAR_WIDTH, LANE_WIDTH

log = logging.getLogger(__name__)

HIDDEN = 128
N_FEATURES = PolicyFeatures.SIZE
N_ACTIONS = 3
LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
MAX_EPISODE = 300

# the network sees actions divided by these, so every output is O(1)
ACTION_SCALE = np.array([0.5, 4.0, 4.0])

# rough magnitudes of each feature, for input normalisation
FEATURE_SCALE = np.concatenate(
    [
        [5.0, 2.0, 10.0, 4.0],
        np.tile([NEIGHBOR_SENTINEL, 10.0, math.pi, math.pi], N_NEIGHBORS),
        [2.0, 2.0, 5.0, 5.0, 2.0, 0.1, 0.5],
    ]
)


class NonFiniteGradient(FloatingPointError):
    pass


# --- parameters --------------------------------------------------------------------------


def policy_layout(hidden: int = HIDDEN) -> Layout:
    return Layout(
        [
            ("pi_w1", (hidden, N_FEATURES)),
            ("pi_b1", (hidden,)),
            ("pi_w2", (N_ACTIONS, hidden)),
            ("pi_b2", (N_ACTIONS,)),
            ("pi_log_std", (N_ACTIONS,)),
            ("v_w1", (hidden, N_FEATURES)),
            ("v_b1", (hidden,)),
            ("v_w2", (1, hidden)),
            ("v_b2", (1,)),
            ("d_w1", (hidden, N_FEATURES + N_ACTIONS)),
            ("d_b1", (hidden,)),
            ("d_w2", (1, hidden)),
            ("d_b2", (1,)),
        ]
    )


def init_policy(seed: int = 0, hidden: int = HIDDEN, log_std: float = -0.5) -> FlatParams:
    layout = policy_layout(hidden)
    rng = np.random.default_rng(seed)
    vec = layout.init(rng)
    a, b, _ = layout.offsets["pi_w2"]
    vec[a:b] *= 0.01  # start near the zero action
    a, b, _ = layout.offsets["pi_log_std"]
    vec[a:b] = log_std
    return FlatParams(layout, vec, {"hidden": hidden}, seed, "policy")


def _norm_features(f: torch.Tensor) -> torch.Tensor:
    return f / torch.as_tensor(FEATURE_SCALE, dtype=f.dtype)


def policy_forward(p: dict, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Action mean (normalised units) and clamped log-std."""
    h = torch.tanh(_norm_features(f) @ p["pi_w1"].T + p["pi_b1"])
    mean = h @ p["pi_w2"].T + p["pi_b2"]
    return mean, torch.clamp(p["pi_log_std"], LOG_STD_MIN, LOG_STD_MAX)


def value_forward(p: dict, f: torch.Tensor) -> torch.Tensor:
    h = torch.tanh(_norm_features(f) @ p["v_w1"].T + p["v_b1"])
    return (h @ p["v_w2"].T + p["v_b2"])[..., 0]


def discriminator_logit(p: dict, f: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Logit of the pair (features, normalised action) coming from the expert."""
    h = torch.tanh(torch.cat([_norm_features(f), u], dim=-1) @ p["d_w1"].T + p["d_b1"])
    return (h @ p["d_w2"].T + p["d_b2"])[..., 0]


def gaussian_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    z = (u - mean) / torch.exp(log_std)
    return (-0.5 * z**2 - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)


def to_action(u: np.ndarray) -> np.ndarray:
    """Normalised network output to clamped physical (yaw_rate, accel_long, accel_lat)."""
    return np.clip(np.asarray(u) * ACTION_SCALE, ACTION_LOW, ACTION_HIGH)


# --- rewards -------------------------------------------------------------------------------


def discriminator_reward(params: FlatParams, features, action: ControlAction | np.ndarray) -> float | np.ndarray:
    """Imitation reward -log(1 - sigmoid(logit)), evaluated as softplus(logit).

    ``features`` may be a PolicyFeatures or raw vectors; ``action`` a
    ControlAction or physical action rows.
    """
    f = features.as_vector() if isinstance(features, PolicyFeatures) else np.asarray(features, dtype=float)
    a = action.as_array() if isinstance(action, ControlAction) else np.asarray(action, dtype=float)
    p = params.layout.unflatten(params.tensor())
    with torch.no_grad():
        logit = discriminator_logit(p, torch.as_tensor(f), torch.as_tensor(a / ACTION_SCALE))
    out = reward_from_logit(logit.numpy())
    return float(out) if np.ndim(out) == 0 else out


def reward_from_logit(logit):
    """softplus(x) = -log(1 - sigmoid(x)), without overflow for large |x|."""
    x = np.asarray(logit, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass(frozen=True)
class RewardConfig:
    imitation_weight: float = 1.0
    collision: float = -10.0
    proximity: float = -0.1
    proximity_range: float = 2.0
    off_road: float = -1.0
    progress: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v):
                raise ValueError(f"reward weight {k} must be finite")
        if not self.collision < 0:
            raise ValueError("collision penalty must be negative")
        if not self.proximity_range > 0:
            raise ValueError("proximity range must be positive")


@dataclass
class StepEvents:
    """What happened to one agent on one tick; fields may also be arrays over copies."""

    collision: bool | np.ndarray = False
    gap: float | np.ndarray = NEIGHBOR_SENTINEL
    off_road: bool | np.ndarray = False
    progress: float | np.ndarray = 0.0


def external_reward(cfg: RewardConfig, ev: StepEvents):
    prox = cfg.proximity * np.maximum(0.0, 1.0 - np.asarray(ev.gap, dtype=float) / cfg.proximity_range)
    r = (
        cfg.collision * np.asarray(ev.collision, dtype=float)
        + prox
        + cfg.off_road * np.asarray(ev.off_road, dtype=float)
        + cfg.progress * np.asarray(ev.progress, dtype=float)
    )
    return float(r) if np.ndim(r) == 0 else r


def augmented_reward(cfg: RewardConfig, imitation, ev: StepEvents):
    r = cfg.imitation_weight * np.asarray(imitation, dtype=float) + external_reward(cfg, ev)
    return float(r) if np.ndim(r) == 0 else r


def ends_episode(ev: StepEvents):
    return np.asarray(ev.collision, dtype=bool)


# --- synthetic two-lane environment -----------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    copies: int = 16
    max_steps: int = 100
    lead_prob: float = 1.0
    side_prob: float = 1.0
    speed: tuple[float, float] = (6.0, 14.0)
    lead_speed: tuple[float, float] = (5.0, 12.0)
    lead_gap: tuple[float, float] = (15.0, 50.0)
    lateral: float = 0.5
    heading: float = 0.05

    def __post_init__(self):
        if not 1 <= self.max_steps <= MAX_EPISODE:
            raise ValueError(f"episodes are 1..{MAX_EPISODE} steps")
        if self.copies < 1:
            raise ValueError("need at least one environment copy")


class TwoLaneEnv:
    """Vectorised straight two-lane road: one controlled car plus a lead and a side car.

    Lane 0 is centered on y = 0, lane 1 on y = 3.6, road edges at -1.8 and 5.4.
    The other cars hold constant speed on their lane centers. Absent cars sit
    at x = +inf and never show up in the features.
    """

    LANES = (0.0, LANE_WIDTH)
    EDGES = (-LANE_WIDTH / 2, 1.5 * LANE_WIDTH)

    def __init__(self, cfg: EnvConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        n = cfg.copies
        self.ego = np.zeros((n, 4))  # x, y, yaw, v
        self.prev_speed = np.zeros(n)
        self.others = np.zeros((n, 2, 3))  # x, y, v of lead and side car
        self.steps = np.zeros(n, dtype=int)
        for i in range(n):
            self._reset(i)

    def _reset(self, i: int) -> None:
        c, r = self.cfg, self.rng
        v = r.uniform(*c.speed)
        self.ego[i] = (0.0, r.uniform(-c.lateral, c.lateral), r.uniform(-c.heading, c.heading), v)
        self.prev_speed[i] = v
        lead = r.random() < c.lead_prob
        side = r.random() < c.side_prob
        gap = r.uniform(*c.lead_gap)
        self.others[i, 0] = (gap + CAR_LENGTH if lead else np.inf, self.LANES[0], r.uniform(*c.lead_speed))
        self.others[i, 1] = (r.uniform(-30.0, 30.0) if side else np.inf, self.LANES[1], r.uniform(*c.speed))
        self.steps[i] = 0

    def features(self) -> np.ndarray:
        """(copies, 35) feature rows, same conventions as extract_features on a straight map."""
        n = self.cfg.copies
        x, y, yaw, v = self.ego.T
        out = np.zeros((n, N_FEATURES))
        out[:, 0] = CAR_LENGTH
        out[:, 1] = CAR_WIDTH
        out[:, 2] = v
        out[:, 3] = (v - self.prev_speed) / DT
        nb = np.zeros((n, N_NEIGHBORS, 4))
        nb[:, :, 0] = NEIGHBOR_SENTINEL
        dx = self.others[:, :, 0] - x[:, None]
        dy = self.others[:, :, 1] - y[:, None]
        with np.errstate(invalid="ignore"):
            d = np.hypot(dx, dy)
        d = np.where(np.isfinite(d), d, np.inf)
        order = np.argsort(d, axis=1, kind="stable")
        for k in range(2):
            j = order[:, k]
            dk = d[np.arange(n), j]
            ok = dk <= DEFAULT_ROI
            rows = np.arange(n)[ok]
            jj = j[ok]
            nb[rows, k, 0] = np.maximum(0.0, dk[ok] - CAR_LENGTH)
            nb[rows, k, 1] = self.others[rows, jj, 2] - v[ok]
            bearing = np.arctan2(dy[rows, jj], dx[rows, jj]) - yaw[ok]
            nb[rows, k, 2] = np.where(dk[ok] > 0, wrap_angles(bearing), 0.0)
            nb[rows, k, 3] = wrap_angles(-yaw[ok])
        out[:, 4 : 4 + 4 * N_NEIGHBORS] = nb.reshape(n, -1)
        lane_y = np.where(y - self.LANES[0] <= self.LANES[1] - y, self.LANES[0], self.LANES[1])
        base = 4 + 4 * N_NEIGHBORS
        out[:, base] = np.abs(lane_y + LANE_WIDTH / 2 - y)
        out[:, base + 1] = np.abs(y - lane_y + LANE_WIDTH / 2)
        lo, hi = self.EDGES
        left = np.where(hi - y >= 0, hi - y, np.inf)
        left = np.minimum(left, np.where(lo - y >= 0, lo - y, np.inf))
        right = np.where(lo - y < 0, y - lo, np.inf)
        right = np.minimum(right, np.where(hi - y < 0, y - hi, np.inf))
        out[:, base + 2] = np.minimum(left, ROAD_SENTINEL)
        out[:, base + 3] = np.minimum(right, ROAD_SENTINEL)
        out[:, base + 4] = y - lane_y
        out[:, base + 5] = 0.0
        out[:, base + 6] = wrap_angles(yaw)
        return out

    def step(self, action: np.ndarray) -> tuple[StepEvents, np.ndarray]:
        """Advance every copy by one tick with physical actions (copies, 3).

        Returns the events and a done mask; finished copies are reset in place.
        """
        a = np.clip(action, ACTION_LOW, ACTION_HIGH)
        x, y, yaw, v = self.ego.T.copy()
        yaw_rate, acc = a[:, 0], a[:, 1]
        v_new = np.maximum(v + acc * DT, 0.0)
        mid = yaw + 0.5 * yaw_rate * DT
        dist = 0.5 * (v + v_new) * DT
        self.prev_speed = v
        self.ego = np.stack([x + dist * np.cos(mid), y + dist * np.sin(mid), wrap_angles(yaw + yaw_rate * DT), v_new], axis=1)
        self.others[:, :, 0] += self.others[:, :, 2] * DT
        self.steps += 1
        ex, ey, eyaw, _ = self.ego.T
        hit = np.zeros(len(ex), dtype=bool)
        gap = np.full(len(ex), float(NEIGHBOR_SENTINEL))
        for j in range(2):
            ox, oy = self.others[:, j, 0], self.others[:, j, 1]
            live = np.isfinite(ox)
            ox = np.where(live, ox, ex + 1e6)
            h, _ = obb_overlap_arrays(ex, ey, eyaw, CAR_LENGTH / 2, CAR_WIDTH / 2, ox, oy, np.zeros_like(ox), CAR_LENGTH / 2, CAR_WIDTH / 2)
            hit |= h & live
            g = np.maximum(0.0, np.hypot(ox - ex, oy - ey) - CAR_LENGTH)
            gap = np.minimum(gap, np.where(live, g, NEIGHBOR_SENTINEL))
        lo, hi = self.EDGES
        off = (ey - CAR_WIDTH / 2 < lo) | (ey + CAR_WIDTH / 2 > hi)
        ev = StepEvents(hit, gap, off, ex - x)
        done = hit | (ey < lo) | (ey > hi) | (self.steps >= self.cfg.max_steps)
        for i in np.flatnonzero(done):
            self._reset(i)
        return ev, done


def expert_action(features: np.ndarray, idm: IDMParams = IDMParams()) -> np.ndarray:
    """IDM on the car straight ahead plus a centerline-tracking steering law."""
    out = np.zeros((len(features), N_ACTIONS))
    base = 4 + 4 * N_NEIGHBORS
    for i, f in enumerate(features):
        v = f[2]
        nb = f[4:base].reshape(N_NEIGHBORS, 4)
        ahead = [r for r in nb if r[0] < NEIGHBOR_SENTINEL and abs(r[2]) < 0.3]
        if ahead:
            r = min(ahead, key=lambda r: r[0])
            acc = idm_accel(v, r[0], v + r[1], idm)
        else:
            acc = idm_accel(v, math.inf, v, idm)
        offset, heading = f[base + 4], f[base + 6]
        yaw_rate = -0.3 * offset - 2.0 * heading
        out[i] = (yaw_rate, acc, v * yaw_rate)
    return np.clip(out, ACTION_LOW, ACTION_HIGH)


@dataclass
class ExpertData:
    features: np.ndarray
    actions: np.ndarray  # physical units
    collisions: int = 0

    def __len__(self) -> int:
        return len(self.features)


def generate_expert_data(n_episodes: int, seed: int = 0, env_cfg: EnvConfig | None = None) -> ExpertData:
    """Demonstrations from the IDM + centerline controller, one environment copy per episode."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    base = env_cfg or EnvConfig()
    cfg = EnvConfig(**{**asdict(base), "copies": n_episodes})
    env = TwoLaneEnv(cfg, seed)
    feats, acts = [], []
    collisions = 0
    alive = np.ones(n_episodes, dtype=bool)
    for _ in range(cfg.max_steps):
        f = env.features()
        a = expert_action(f)
        feats.append(f[alive])
        acts.append(a[alive])
        ev, done = env.step(a)
        collisions += int(np.sum(ev.collision & alive))
        alive &= ~done
        if not alive.any():
            break
    return ExpertData(np.concatenate(feats), np.concatenate(acts), collisions)


# --- rollouts and PPO --------------------------------------------------------------------------


@dataclass
class RolloutBuffer:
    features: np.ndarray  # (T, copies, 35)
    actions: np.ndarray  # (T, copies, 3), normalised units
    imitation: np.ndarray  # (T, copies)
    external: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    last_value: np.ndarray  # (copies,)

    def __len__(self) -> int:
        return self.features.shape[0] * self.features.shape[1]


@dataclass(frozen=True)
class PPOConfig:
    lr: float = 0.03
    batch: int = 32
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 2
    rollout_steps: int = 32
    value_coef: float = 0.5
    disc_coef: float = 1.0
    max_grad_norm: float = 0.5
    optimizer: str = "sgd"
    disc_lr: float = 0.03  # the discriminator has its own Adam optimizer
    disc_batch: int = 256
    disc_steps: int = 1
    reward: RewardConfig = field(default_factory=RewardConfig)
    env: EnvConfig = field(default_factory=EnvConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def gae(rewards, values, dones, last_value, gamma: float = 0.99, lam: float = 0.95):
    """Generalized advantage estimates and returns over (T, copies) arrays."""
    T = len(rewards)
    adv = np.zeros_like(rewards, dtype=float)
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        nxt = last_value if t == T - 1 else values[t + 1]
        keep = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt * keep - values[t]
        running = delta + gamma * lam * keep * running
        adv[t] = running
    return adv, adv + values


def collect_rollout(
    params: FlatParams, env: TwoLaneEnv, steps: int, rng: np.random.Generator, reward: RewardConfig = RewardConfig()
) -> RolloutBuffer:
    p = params.layout.unflatten(params.tensor())
    n = env.cfg.copies
    F_, A, I, E, V, L, D = [], [], [], [], [], [], []
    with torch.no_grad():
        for _ in range(steps):
            f = env.features()
            ft = torch.as_tensor(f)
            mean, log_std = policy_forward(p, ft)
            u = mean.numpy() + np.exp(log_std.numpy()) * rng.standard_normal((n, N_ACTIONS))
            ut = torch.as_tensor(u)
            lp = gaussian_log_prob(ut, mean, log_std).numpy()
            val = value_forward(p, ft).numpy()
            imit = reward_from_logit(discriminator_logit(p, ft, ut).numpy())
            ev, done = env.step(to_action(u))
            F_.append(f)
            A.append(u)
            I.append(imit)
            E.append(external_reward(reward, ev))
            V.append(val)
            L.append(lp)
            D.append(done.astype(float))
        last = value_forward(p, torch.as_tensor(env.features())).numpy()
    return RolloutBuffer(*(np.array(x) for x in (F_, A, I, E, V, L, D)), last)


def ppo_losses(vec: torch.Tensor, layout: Layout, mb: dict, expert: dict | None = None, clip: float = 0.2) -> dict:
    """Clipped surrogate (to maximise), value MSE and discriminator BCE on one minibatch.

    ``mb`` holds tensors features, actions, log_probs, advantages, returns;
    ``expert`` holds features and normalised actions. Without it the
    discriminator term is left out.
    """
    p = layout.unflatten(vec)
    mean, log_std = policy_forward(p, mb["features"])
    lp = gaussian_log_prob(mb["actions"], mean, log_std)
    ratio = torch.exp(lp - mb["log_probs"])
    adv = mb["advantages"]
    surrogate = torch.minimum(ratio * adv, torch.clamp(ratio, 1 - clip, 1 + clip) * adv).mean()
    value = ((value_forward(p, mb["features"]) - mb["returns"]) ** 2).mean()
    if expert is None:
        return {"surrogate": surrogate, "value": value}
    disc = discriminator_loss(p, mb["features"], mb["actions"], expert["features"], expert["actions"])
    return {"surrogate": surrogate, "value": value, "discriminator": disc}


def discriminator_loss(p: dict, pol_f, pol_u, exp_f, exp_u) -> torch.Tensor:
    """Balanced binary cross-entropy with expert pairs labelled 1 and policy pairs 0."""
    lg_pol = discriminator_logit(p, pol_f, pol_u)
    lg_exp = discriminator_logit(p, exp_f, exp_u)
    return 0.5 * (
        F.binary_cross_entropy_with_logits(lg_exp, torch.ones_like(lg_exp))
        + F.binary_cross_entropy_with_logits(lg_pol, torch.zeros_like(lg_pol))
    )


def total_loss(losses: dict, cfg: PPOConfig) -> torch.Tensor:
    return -losses["surrogate"] + cfg.value_coef * losses["value"] + cfg.disc_coef * losses["discriminator"]


def _disc_only(layout: Layout) -> torch.Tensor:
    mask = torch.zeros(layout.size, dtype=torch.float64)
    for name, (a, b, _) in layout.offsets.items():
        if name.startswith("d_"):
            mask[a:b] = 1.0
    return mask


def ppo_update(
    params: FlatParams,
    buf: RolloutBuffer,
    expert: ExpertData,
    cfg: PPOConfig = PPOConfig(),
    rng: np.random.Generator | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    vec: torch.Tensor | None = None,
    disc_optimizer: torch.optim.Optimizer | None = None,
) -> FlatParams:
    """One round of clipped-surrogate updates over the buffer's minibatches.

    Policy and value heads take one step per minibatch. The discriminator
    then takes ``disc_steps`` Adam steps, each on a fresh balanced batch of
    expert and policy pairs. Minibatch order comes from ``rng``, so results
    are deterministic given the seed.
    """
    if len(buf) == 0:
        raise ValueError("empty rollout buffer")
    if len(expert) == 0:
        raise ValueError("no expert data")
    rng = rng if rng is not None else np.random.default_rng(0)
    layout = params.layout
    if vec is None:
        vec = params.tensor(requires_grad=True)
    if optimizer is None:
        optimizer = make_optimizer(vec, cfg)
    if disc_optimizer is None:
        disc_optimizer = torch.optim.Adam([vec], lr=cfg.disc_lr)
    rewards = cfg.reward.imitation_weight * buf.imitation + buf.external
    adv, ret = gae(rewards, buf.values, buf.dones, buf.last_value, cfg.gamma, cfg.lam)
    n = len(buf)
    flat = {
        "features": torch.as_tensor(buf.features.reshape(n, -1)),
        "actions": torch.as_tensor(buf.actions.reshape(n, -1)),
        "log_probs": torch.as_tensor(buf.log_probs.reshape(n)),
        "advantages": torch.as_tensor(adv.reshape(n)),
        "returns": torch.as_tensor(ret.reshape(n)),
    }
    a = flat["advantages"]
    flat["advantages"] = (a - a.mean()) / (a.std() + 1e-8)
    ex_f = torch.as_tensor(expert.features)
    ex_u = torch.as_tensor(expert.actions / ACTION_SCALE)
    keep = 1.0 - _disc_only(layout)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = torch.as_tensor(order[start : start + cfg.batch])
            mb = {k: v[idx] for k, v in flat.items()}
            optimizer.zero_grad()
            L = ppo_losses(vec, layout, mb, None, cfg.clip)
            loss = -L["surrogate"] + cfg.value_coef * L["value"]
            loss.backward()
            vec.grad.mul_(keep)
            _step(optimizer, vec, cfg.max_grad_norm)
    for _ in range(cfg.disc_steps):
        discriminator_step(vec, layout, flat, ex_f, ex_u, cfg, rng, disc_optimizer)
    return FlatParams(layout, vec.detach().numpy().copy(), params.config, params.seed, params.kind, params.curve)


def discriminator_step(
    vec: torch.Tensor,
    layout: Layout,
    policy: dict,
    expert_f: torch.Tensor,
    expert_u: torch.Tensor,
    cfg: PPOConfig,
    rng: np.random.Generator,
    optimizer: torch.optim.Optimizer,
) -> float:
    """One discriminator step on a balanced batch of policy and expert pairs; returns the loss.

    ``policy`` holds features and normalised actions. Only discriminator
    entries of ``vec`` get a gradient; Adam leaves the others untouched.
    """
    n = len(policy["features"])
    pi_idx = torch.as_tensor(rng.choice(n, size=min(cfg.disc_batch, n), replace=False))
    ex_idx = torch.as_tensor(rng.choice(len(expert_f), size=len(pi_idx), replace=len(expert_f) < len(pi_idx)))
    loss = discriminator_loss(layout.unflatten(vec), policy["features"][pi_idx], policy["actions"][pi_idx],
                              expert_f[ex_idx], expert_u[ex_idx])
    optimizer.zero_grad()
    (cfg.disc_coef * loss).backward()
    vec.grad.mul_(_disc_only(layout))
    _step(optimizer, vec, cfg.max_grad_norm)
    return float(loss.detach())


def make_optimizer(vec: torch.Tensor, cfg: PPOConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam([vec], lr=cfg.lr)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD([vec], lr=cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def _step(opt: torch.optim.Optimizer, vec: torch.Tensor, max_norm: float = 0.0) -> None:
    if not torch.all(torch.isfinite(vec.grad)):
        raise NonFiniteGradient("gradient has non-finite entries")
    if max_norm:
        torch.nn.utils.clip_grad_norm_([vec], max_norm)
    opt.step()
    if not torch.all(torch.isfinite(vec)):
        raise NonFiniteGradient("parameters became non-finite")


def evaluate_policy(params: FlatParams, judge: FlatParams, cfg: PPOConfig, seed: int = 1234, episodes: int = 16) -> dict:
    """Mean episode return of the deterministic (mean) policy on fixed start states.

    ``judge`` supplies the discriminator used for the imitation term.
    """
    env_cfg = EnvConfig(**{**asdict(cfg.env), "copies": episodes})
    env = TwoLaneEnv(env_cfg, seed)
    p = params.layout.unflatten(params.tensor())
    pj = judge.layout.unflatten(judge.tensor())
    total = np.zeros(episodes)
    ext = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    with torch.no_grad():
        for _ in range(env_cfg.max_steps):
            ft = torch.as_tensor(env.features())
            u, _ = policy_forward(p, ft)
            imit = reward_from_logit(discriminator_logit(pj, ft, u).numpy())
            ev, done = env.step(to_action(u.numpy()))
            e = external_reward(cfg.reward, ev)
            total += alive * augmented_reward(cfg.reward, imit, ev)
            ext += alive * e
            alive &= ~done
            if not alive.any():
                break
    return {"return": float(total.mean()), "external": float(ext.mean())}


def discriminator_accuracy(params: FlatParams, expert: ExpertData, policy_f: np.ndarray, policy_u: np.ndarray) -> float:
    p = params.layout.unflatten(params.tensor())
    with torch.no_grad():
        le = discriminator_logit(p, torch.as_tensor(expert.features), torch.as_tensor(expert.actions / ACTION_SCALE))
        lp = discriminator_logit(p, torch.as_tensor(policy_f), torch.as_tensor(policy_u))
    return float(((le > 0).double().sum() + (lp <= 0).double().sum()) / (len(le) + len(lp)))


def train_policy(
    updates: int = 200,
    seed: int = 0,
    cfg: PPOConfig = PPOConfig(),
    expert: ExpertData | None = None,
    init: FlatParams | None = None,
    eval_every: int = 0,
) -> FlatParams:
    """PPO with reward augmentation; ``curve`` rows are (update, return, disc_accuracy)."""
    torch.manual_seed(seed)
    params = init.copy() if init is not None else init_policy(seed)
    check_layout(params, policy_layout(params.config.get("hidden", HIDDEN)))
    expert = expert if expert is not None else generate_expert_data(32, seed + 10_000, cfg.env)
    env = TwoLaneEnv(cfg.env, seed)
    rng = np.random.default_rng(seed)
    vec = params.tensor(requires_grad=True)
    opt = make_optimizer(vec, cfg)
    disc_opt = torch.optim.Adam([vec], lr=cfg.disc_lr)
    curve = []
    for u in range(updates):
        buf = collect_rollout(params, env, cfg.rollout_steps, rng, cfg.reward)
        params = ppo_update(params, buf, expert, cfg, rng, opt, vec, disc_opt)
        if eval_every and (u + 1) % eval_every == 0:
            ev = evaluate_policy(params, params, cfg)
            acc = discriminator_accuracy(params, expert, buf.features.reshape(-1, N_FEATURES), buf.actions.reshape(-1, N_ACTIONS))
            curve.append({"update": u + 1, "return": ev["return"], "disc_accuracy": acc})
            log.debug("update %d return %.3f external %.3f disc %.3f", u + 1, ev["return"], ev["external"], acc)
    params.curve = curve
    params.config = {**params.config, "ppo": cfg.to_dict()}
    return params


# --- engine adapter ------------------------------------------------------------------------------


def learned_controller(params: FlatParams):
    """A controller with the takeover_step signature that acts with the policy mean.

    Falls back to the deterministic law when there are no features (off map).
    """
    p = params.layout.unflatten(params.tensor())

    def control(mode, path, state, features, dt, target) -> ControlAction:
        if features is None:
            return takeover_step(mode, path, state, features, dt, target)
        with torch.no_grad():
            u, _ = policy_forward(p, torch.as_tensor(features.as_vector()))
        return ControlAction(*to_action(u.numpy()))

    return control
