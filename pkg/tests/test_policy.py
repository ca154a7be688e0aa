import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, relative_error
from reactsim.control import ACTION_HIGH, ACTION_LOW, ControlAction, World, extract_features
from reactsim.nn import FlatParams
from reactsim.policy import (
    ACTION_SCALE,
    LOG_STD_MAX,
    LOG_STD_MIN,
    N_ACTIONS,
    N_FEATURES,
    EnvConfig,
    PPOConfig,
    RewardConfig,
    StepEvents,
    TwoLaneEnv,
    collect_rollout,
    discriminator_accuracy,
    discriminator_reward,
    discriminator_step,
    evaluate_policy,
    external_reward,
    gae,
    generate_expert_data,
    init_policy,
    learned_controller,
    policy_forward,
    ppo_losses,
    reward_from_logit,
    total_loss,
    to_action,
    train_policy,
)
from reactsim.scenario import AgentState
from reactsim.synthetic import CAR_LENGTH, CAR_WIDTH, straight_road

SMALL_ENV = EnvConfig(copies=4, max_steps=40)
SMALL = PPOConfig(rollout_steps=8, env=SMALL_ENV)


# --- rewards ---------------------------------------------------------------------------------------


@given(st.floats(-30, 30))
def test_reward_is_minus_log_one_minus_sigmoid(x):
    want = math.log1p(math.exp(x))  # 1 - sigmoid(x) = 1 / (1 + e^x)
    assert reward_from_logit(x) == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_reward_stable_for_extreme_logits():
    r = reward_from_logit(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
    assert np.all(np.isfinite(r)) and np.all(np.diff(r) > 0)
    assert r[-1] == pytest.approx(1e4) and r[0] == pytest.approx(0.0, abs=1e-300)


def test_external_reward_terms():
    cfg = RewardConfig()
    assert external_reward(cfg, StepEvents()) == 0.0
    assert external_reward(cfg, StepEvents(collision=True)) == cfg.collision
    assert external_reward(cfg, StepEvents(gap=0.5)) == pytest.approx(cfg.proximity * 0.75)
    assert external_reward(cfg, StepEvents(off_road=True, progress=1.2)) == pytest.approx(cfg.off_road + 0.012)
    with pytest.raises(ValueError):
        RewardConfig(collision=0.0)
    with pytest.raises(ValueError):
        RewardConfig(progress=math.nan)


def test_discriminator_reward_accepts_actions_and_rows():
    p = init_policy(0, hidden=8)
    env = TwoLaneEnv(SMALL_ENV, 0)
    f = env.features()
    rows = np.tile([0.1, -1.0, 0.0], (len(f), 1))
    many = discriminator_reward(p, f, rows)
    one = discriminator_reward(p, f[0], ControlAction(0.1, -1.0, 0.0))
    assert many.shape == (len(f),) and np.all(many > 0)
    assert one == pytest.approx(many[0], rel=1e-12)


# --- advantage estimates -------------------------------------------------------------------------


def naive_gae(r, v, d, last, gamma, lam):
    T, n = r.shape
    adv = np.zeros((T, n))
    for i in range(n):
        for t in range(T):
            total, weight = 0.0, 1.0
            for k in range(t, T):
                nxt = last[i] if k == T - 1 else v[k + 1, i]
                total += weight * (r[k, i] + gamma * nxt * (1 - d[k, i]) - v[k, i])
                if d[k, i]:
                    break
                weight *= gamma * lam
            adv[t, i] = total
    return adv


@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 3))
def test_gae_matches_naive_sum(seed, T, n):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=(T, n)), rng.normal(size=(T, n))
    d = (rng.random((T, n)) < 0.2).astype(float)
    last = rng.normal(size=n)
    adv, ret = gae(r, v, d, last, 0.97, 0.9)
    assert np.allclose(adv, naive_gae(r, v, d, last, 0.97, 0.9), rtol=0, atol=1e-12)
    assert np.allclose(ret, adv + v)


# --- environment and expert -----------------------------------------------------------------------


def test_env_features_match_map_features():
    m = straight_road(2)
    env = TwoLaneEnv(EnvConfig(copies=6, max_steps=60), seed=5)
    rng = np.random.default_rng(0)
    prev = env.ego[:, 3].copy()
    for _ in range(30):
        f = env.features()
        for i in range(6):
            x, y, yaw, v = env.ego[i]
            states = {0: AgentState(x, y, CAR_WIDTH, CAR_LENGTH, yaw, v)}
            for j in range(2):
                ox, oy, ov = env.others[i, j]
                if math.isfinite(ox):
                    states[j + 1] = AgentState(ox, oy, CAR_WIDTH, CAR_LENGTH, 0.0, ov)
            want = extract_features(World(m, states, {0: (v - prev[i]) / 0.1}), 0).as_vector()
            assert np.allclose(f[i], want, rtol=0, atol=1e-9), i
        act = np.column_stack([rng.uniform(-0.05, 0.05, 6), rng.uniform(-2, 2, 6), np.zeros(6)])
        prev = env.ego[:, 3].copy()
        _, done = env.step(act)
        prev[done] = env.ego[done, 3]


def test_expert_demonstrations_are_clean():
    data = generate_expert_data(8, seed=3)
    assert data.collisions == 0
    assert data.features.shape[1] == N_FEATURES and data.actions.shape[1] == N_ACTIONS
    assert np.all(data.actions >= ACTION_LOW) and np.all(data.actions <= ACTION_HIGH)
    with pytest.raises(ValueError):
        generate_expert_data(0)


def test_env_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(max_steps=0)
    with pytest.raises(ValueError):
        EnvConfig(copies=0)


# --- PPO ---------------------------------------------------------------------------------------------


def test_log_std_clamp():
    p = init_policy(0, hidden=8)
    t = p.layout.unflatten(p.tensor())
    t["pi_log_std"] = torch.tensor([50.0, -50.0, 0.3], dtype=torch.float64)
    _, log_std = policy_forward(t, torch.zeros(N_FEATURES, dtype=torch.float64))
    assert log_std.tolist() == [LOG_STD_MAX, LOG_STD_MIN, 0.3]


def test_ppo_gradient_check():
    params = init_policy(2, hidden=8)
    layout = params.layout
    env = TwoLaneEnv(SMALL_ENV, 2)
    buf = collect_rollout(params, env, 8, np.random.default_rng(2), SMALL.reward)
    n = len(buf)
    rng = np.random.default_rng(4)
    mb = {
        "features": torch.as_tensor(buf.features.reshape(n, -1)),
        "actions": torch.as_tensor(buf.actions.reshape(n, -1)),
        # shifted old log-probs so some ratios fall outside the clip range
        "log_probs": torch.as_tensor(buf.log_probs.reshape(n) + rng.normal(0, 0.3, n)),
        "advantages": torch.as_tensor(rng.normal(size=n)),
        "returns": torch.as_tensor(rng.normal(size=n)),
    }
    data = generate_expert_data(2, seed=1, env_cfg=SMALL_ENV)
    expert = {"features": torch.as_tensor(data.features[:20]), "actions": torch.as_tensor(data.actions[:20] / ACTION_SCALE)}
    vec0 = params.vector + rng.normal(0, 0.05, layout.size)
    v = torch.tensor(vec0, requires_grad=True)
    total_loss(ppo_losses(v, layout, mb, expert), SMALL).backward()
    grad = v.grad.numpy()

    def f(x):
        with torch.no_grad():
            return float(total_loss(ppo_losses(torch.tensor(x), layout, mb, expert), SMALL))

    checked = 0
    for name, (a, b, _) in layout.offsets.items():
        idx = [i for i in range(a, b) if abs(grad[i]) > 1e-6]
        assert idx, f"{name} has no usable gradient"
        for i in rng.choice(idx, size=min(2, len(idx)), replace=False):
            assert relative_error(grad[i], central_difference(f, vec0, int(i))) < 1e-4, name
            checked += 1
    assert checked >= 20


def test_training_is_seed_deterministic_and_finite():
    a = train_policy(3, seed=7, cfg=SMALL)
    b = train_policy(3, seed=7, cfg=SMALL)
    c = train_policy(3, seed=8, cfg=SMALL)
    assert a.vector.tobytes() == b.vector.tobytes()
    assert a.vector.tobytes() != c.vector.tobytes()
    assert a.is_finite()
    assert a.config["ppo"]["rollout_steps"] == 8


def random_policy_pairs(seed, steps=32, copies=16):
    """(features, normalised actions) from uniformly random driving."""
    env = TwoLaneEnv(EnvConfig(copies=copies), seed)
    rng = np.random.default_rng(seed)
    feats, acts = [], []
    for _ in range(steps):
        u = rng.uniform(-1.0, 1.0, (copies, N_ACTIONS))
        feats.append(env.features())
        acts.append(u)
        env.step(to_action(u))
    return np.concatenate(feats), np.concatenate(acts)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_discriminator_separates_expert_from_random_policy(seed):
    cfg = PPOConfig()
    expert = generate_expert_data(32, seed=10_000)
    params = init_policy(seed)
    vec = params.tensor(requires_grad=True)
    opt = torch.optim.Adam([vec], lr=cfg.disc_lr)
    rng = np.random.default_rng(seed)
    ex_f, ex_u = torch.as_tensor(expert.features), torch.as_tensor(expert.actions / ACTION_SCALE)
    for u in range(50):
        f, a = random_policy_pairs(1000 * seed + u)
        discriminator_step(vec, params.layout, {"features": torch.as_tensor(f), "actions": torch.as_tensor(a)},
                           ex_f, ex_u, cfg, rng, opt)
    trained = FlatParams(params.layout, vec.detach().numpy().copy(), params.config, seed, "policy")
    head = [n for n in params.layout.offsets if not n.startswith("d_")]
    for name in head:  # only the discriminator moved
        assert np.array_equal(params.layout.unflatten(trained.tensor())[name], params.layout.unflatten(params.tensor())[name])
    held = generate_expert_data(8, seed=777)
    rf, ru = random_policy_pairs(99_999, steps=100, copies=8)
    assert discriminator_accuracy(trained, held, rf, ru) > 0.8


def test_training_keeps_parameters_finite_and_std_clamped():
    params = train_policy(20, seed=1, cfg=SMALL)
    assert params.is_finite()
    t = params.layout.unflatten(params.tensor())
    _, log_std = policy_forward(t, torch.zeros(N_FEATURES, dtype=torch.float64))
    assert torch.all(log_std >= LOG_STD_MIN) and torch.all(log_std <= LOG_STD_MAX)


def test_learned_controller_acts_within_clamps():
    params = init_policy(0, hidden=8)
    control = learned_controller(params)
    m = straight_road(2)
    state = AgentState(5.0, 0.2, CAR_WIDTH, CAR_LENGTH, 0.0, 10.0)
    feats = extract_features(World(m, {0: state}), 0)
    act = control(None, None, state, feats, 0.1, None)
    assert isinstance(act, ControlAction)
    assert np.all(act.as_array() >= ACTION_LOW) and np.all(act.as_array() <= ACTION_HIGH)


def test_evaluation_is_deterministic():
    p = init_policy(1, hidden=8)
    assert evaluate_policy(p, p, SMALL, episodes=4) == evaluate_policy(p, p, SMALL, episodes=4)
