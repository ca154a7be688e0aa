import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cases import DURATION, INIT, random_trace
from oracles import naive_ade, naive_collision_count, naive_rates
from reactsim.engine import SimTrace
from reactsim.metrics import (
    HorizonExceedsTrace,
    IDMParams,
    ade,
    colliding_agents,
    evaluate,
    idm_accel,
    scenario_breakdown,
    write_report,
)
from reactsim.scenario import LogScenario, TrackHistory, segment_from_log
from reactsim.synthetic import constant_velocity_rows

seeds = st.integers(0, 2**32 - 1)


@given(seeds)
def test_ade_matches_naive_loop(seed):
    tr = random_trace(np.random.default_rng(seed))
    for h in (0.5, 1.0, 2.0, 3.0):
        assert ade(tr, tr.segment, h) == pytest.approx(naive_ade(tr, tr.segment, h), rel=0, abs=1e-12)


@given(seeds, st.integers(1, 4))
def test_rates_match_naive_loops(seed, n):
    rng = np.random.default_rng(seed)
    traces = [random_trace(rng) for _ in range(n)]
    rep = evaluate(traces, horizons=(1, 2, 3))
    coll, react, rel, prog = naive_rates(traces)
    assert rep.collision_rate == pytest.approx(coll, rel=0, abs=1e-12)
    assert rep.reactivity_rate == pytest.approx(react, rel=0, abs=1e-12)
    assert rep.relevant_ratio == pytest.approx(rel, rel=0, abs=1e-12)
    assert rep.progress == pytest.approx(prog, rel=0, abs=1e-12)
    for r in (rep.collision_rate, rep.reactivity_rate, rep.relevant_ratio):
        assert 0.0 <= r <= 1.0


def test_multi_frame_collision_counts_once():
    rows_a = constant_velocity_rows(0.0, 0.0, 0.0, 5.0, DURATION)
    rows_b = constant_velocity_rows(2.0, 0.5, 0.0, 5.0, DURATION)  # overlapping for the whole run
    rows_c = constant_velocity_rows(0.0, 50.0, 0.0, 5.0, DURATION)
    tracks = {1: TrackHistory(1, 0, rows_a), 2: TrackHistory(2, 0, rows_b), 3: TrackHistory(3, 0, rows_c)}
    seg = segment_from_log(LogScenario(None, tracks, DURATION), init_steps=INIT)
    states = np.stack([rows_a[INIT:], rows_b[INIT:], rows_c[INIT:]], axis=1)
    tr = SimTrace(seg, 1, (1, 2, 3), INIT, states, np.zeros(states.shape[:2], dtype=np.int8))
    assert colliding_agents(tr) == {1, 2}
    assert naive_collision_count(tr) == 1
    rep = evaluate([tr], horizons=(1,))
    assert rep.collisions == 2 and rep.collision_rate == pytest.approx(2 / 3)
    assert rep.reactivity_rate == 0.0


@given(seeds)
def test_metrics_are_additive_over_trace_sets(seed):
    rng = np.random.default_rng(seed)
    left = [random_trace(rng) for _ in range(int(rng.integers(1, 3)))]
    right = [random_trace(rng) for _ in range(int(rng.integers(1, 3)))]
    a, b, ab = (evaluate(x, horizons=(1, 3)) for x in (left, right, left + right))
    assert ab.agents == a.agents + b.agents and ab.scenarios == a.scenarios + b.scenarios
    assert ab.collisions == a.collisions + b.collisions and ab.takeovers == a.takeovers + b.takeovers
    for name in ("collision_rate", "relevant_ratio", "progress"):
        want = (getattr(a, name) * a.agents + getattr(b, name) * b.agents) / ab.agents
        assert getattr(ab, name) == pytest.approx(want, rel=1e-12, abs=1e-12)
    want = (a.reactivity_rate * a.scenarios + b.reactivity_rate * b.scenarios) / ab.scenarios
    assert ab.reactivity_rate == pytest.approx(want, rel=1e-12, abs=1e-12)


@given(seeds)
def test_ade_zero_iff_log_is_replayed(seed):
    rng = np.random.default_rng(seed)
    tr = random_trace(rng, noise=0.0)
    assert ade(tr, tr.segment, 3.0) == 0.0
    k, j = np.argwhere(~np.isnan(tr.states[..., 0]))[0]
    tr.states[k, j, 0] += 1e-6
    assert ade(tr, tr.segment, 3.0) > 0.0
    assert ade(random_trace(rng), tr.segment, 3.0) >= 0.0


def test_horizon_longer_than_trace():
    tr = random_trace(np.random.default_rng(0))
    with pytest.raises(HorizonExceedsTrace):
        ade(tr, tr.segment, 5.0)


def test_report_json_and_breakdown():
    traces = [random_trace(np.random.default_rng(s)) for s in range(3)]
    rep = evaluate(traces, horizons=(1, 3))
    rows = scenario_breakdown(traces, ["a", "b", "c"])
    assert [r["scenario"] for r in rows] == ["a", "b", "c"]
    assert sum(r["collisions"] for r in rows) == rep.collisions
    buf = io.BytesIO()
    write_report(rep, buf, rows)
    doc = json.loads(buf.getvalue())
    assert doc["ade_at"] == {"1": rep.ade_at[1], "3": rep.ade_at[3]}
    assert doc["scenarios_detail"] == rows


# --- IDM ---------------------------------------------------------------------------------------------


@given(st.floats(0, 60), st.floats(-5, 500) | st.just(math.inf), st.floats(0, 60))
def test_idm_clamped(v, gap, lead):
    a = idm_accel(v, gap, lead)
    assert -8.0 <= a <= 4.0
    if gap <= 0:
        assert a == -8.0


def test_idm_reference_values():
    p = IDMParams()
    assert idm_accel(0.0, math.inf, 0.0, p) == pytest.approx(p.a_max)
    assert idm_accel(p.v0, math.inf, p.v0, p) == pytest.approx(0.0, abs=1e-12)
    # equilibrium gap for speed v behind an equal-speed leader
    v = 10.0
    s_star = p.s0 + v * p.headway
    s_eq = s_star / math.sqrt(1 - (v / p.v0) ** p.delta)
    assert idm_accel(v, s_eq, v, p) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        IDMParams(headway=0.0)


def test_idm_platoon_settles():
    p = IDMParams()
    dt, length = 0.1, 4.5
    x = np.array([0.0, -15.0, -35.0, -50.0, -80.0])
    v = np.array([10.0, 5.0, 12.0, 0.0, 8.0])
    history = []
    for _ in range(int(60 / dt)):
        a = np.zeros(5)
        for i in range(1, 5):
            a[i] = idm_accel(v[i], x[i - 1] - x[i] - length, v[i - 1], p)
        v = np.maximum(v + a * dt, 0.0)
        v[0] = 10.0
        x = x + v * dt
        history.append(x[:-1] - x[1:] - length)
    gaps = np.array(history)
    assert np.all(gaps > 0)
    assert np.abs(gaps[-1] - gaps[-1 - int(1 / dt)]).max() < 1e-3
