#!/usr/bin/env python3
"""
Tests for the SADE and backoff state machines
"""

import math

import numpy as np
import pytest

from protocol import (
    GAMMA_SCALE,
    Action,
    BackoffParams,
    BackoffPopulation,
    BackoffState,
    SadeParams,
    SadePopulation,
    SadeState,
    backoff_decide,
    backoff_init,
    backoff_update,
    default_gamma,
    sade_decide,
    sade_init,
    sade_update,
)
from sinr import Observation

PARAMS = SadeParams(gamma=0.1)


def test_init_state():
    assert sade_init(SadeParams(gamma=0.1, p_hat=1.0 / 24.0)) == SadeState(1.0 / 24.0, 1, 1, False)


def test_idle_at_cap_keeps_p_hat():
    state = sade_update(sade_init(PARAMS), Observation.IDLE, PARAMS)
    assert state.p == PARAMS.p_hat
    # T_est stays at 1 and the window wraps with an idle step seen
    assert (state.T_est, state.c, state.idle_in_window) == (1, 1, False)


def test_received_divides_p():
    state = sade_update(SadeState(0.01, 5, 1, False), Observation.RECEIVED, PARAMS)
    assert state.p == pytest.approx(0.0090909, abs=1e-7)
    assert state.p == 0.01 / 1.1
    assert (state.T_est, state.c) == (5, 2)


def test_busy_round_with_no_idle_grows_window():
    state = sade_update(SadeState(0.04, 1, 1, False), Observation.BUSY, PARAMS)
    assert state.p == 0.04 / 1.1
    assert (state.T_est, state.c, state.idle_in_window) == (3, 1, False)


def test_idle_decrements_window_estimate():
    state = sade_update(SadeState(0.01, 5, 1, False), Observation.IDLE, PARAMS)
    assert state.T_est == 4
    assert state.p == pytest.approx(0.011)
    assert state.idle_in_window and state.c == 2


def test_idle_earlier_in_window_prevents_shrink():
    state = SadeState(0.02, 3, 2, True)
    state = sade_update(state, Observation.BUSY, PARAMS)
    assert (state.p, state.T_est, state.c) == (0.02, 3, 3)
    state = sade_update(state, Observation.BUSY, PARAMS)
    assert (state.p, state.T_est, state.c, state.idle_in_window) == (0.02, 3, 1, False)


def test_sent_only_advances_counter():
    state = sade_update(SadeState(0.02, 3, 1, False), Observation.SENT, PARAMS)
    assert state == SadeState(0.02, 3, 2, False)


def test_decide_frequency():
    rng = np.random.default_rng(0)
    state = sade_init(SadeParams(gamma=0.1))
    draws = 200_000
    hits = sum(sade_decide(state, rng) == Action.TRANSMIT for _ in range(draws))
    p = 1.0 / 24.0
    assert abs(hits / draws - p) < 3 * math.sqrt(p * (1 - p) / draws)


def test_decide_tiny_probability_listens():
    rng = np.random.default_rng(1)
    state = SadeState(1e-300, 1, 1, False)
    assert all(sade_decide(state, rng) == Action.LISTEN for _ in range(1000))


def test_default_gamma():
    expected = GAMMA_SCALE / (math.log2(60) + math.log2(math.log2(500)))
    assert default_gamma(60, 500) == pytest.approx(expected)
    assert 0.3 < default_gamma(60, 500) < 0.35
    assert default_gamma(1, 1) == 0.5
    assert 0.01 <= default_gamma(10 ** 9, 10 ** 9) <= 0.5


def test_population_matches_scalar_rule():
    rng = np.random.default_rng(12)
    n = 40
    pop = SadePopulation(PARAMS, n)
    scalar = [sade_init(PARAMS) for _ in range(n)]
    for _ in range(300):
        obs = rng.choice([Observation.IDLE, Observation.BUSY, Observation.RECEIVED, Observation.SENT], size=n)
        pop.update(obs.astype(np.int8), np.zeros(n, dtype=bool))
        scalar = [sade_update(s, Observation(int(o)), PARAMS) for s, o in zip(scalar, obs)]
    assert pop.states() == scalar


def test_population_decide_uses_uniforms():
    pop = SadePopulation(PARAMS, 3)
    assert pop.decide(np.array([0.0, 0.05, 0.9])).tolist() == [True, False, False]


def test_backoff_reset_and_doubling():
    params = BackoffParams(cw_min=2, cw_max=16)
    rng = np.random.default_rng(0)
    state = backoff_init(params, rng)
    assert state.contention_window == 2 and 0 <= state.timer < 2
    for k in range(1, 6):
        state = backoff_update(state, Observation.SENT, params, rng, delivered=False)
        assert state.contention_window == min(2 * 2 ** k, 16)
        assert 0 <= state.timer < state.contention_window
    state = backoff_update(state, Observation.SENT, params, rng, delivered=True)
    assert state.contention_window == 2


def test_backoff_timer_counts_idle_and_freezes_on_busy():
    params = BackoffParams()
    rng = np.random.default_rng(0)
    state = BackoffState(contention_window=8, timer=2)
    assert backoff_decide(state) == Action.LISTEN
    state = backoff_update(state, Observation.BUSY, params, rng)
    assert state.timer == 2
    state = backoff_update(state, Observation.IDLE, params, rng)
    state = backoff_update(state, Observation.RECEIVED, params, rng)
    assert state.timer == 1
    state = backoff_update(state, Observation.IDLE, params, rng)
    assert backoff_decide(state) == Action.TRANSMIT


def test_backoff_params_order():
    with pytest.raises(ValueError):
        BackoffParams(cw_min=64, cw_max=8)


def test_backoff_population_matches_scalar_rule():
    params = BackoffParams(cw_min=2, cw_max=64)
    n = 10
    pop = BackoffPopulation(params, [np.random.default_rng(v) for v in range(n)])
    rngs = [np.random.default_rng(v) for v in range(n)]
    scalar = [backoff_init(params, g) for g in rngs]
    driver = np.random.default_rng(99)
    for _ in range(200):
        sent = pop.decide()
        obs = np.where(sent, Observation.SENT, driver.choice([Observation.IDLE, Observation.BUSY], size=n))
        delivered = sent & (driver.random(n) < 0.5)
        pop.update(obs.astype(np.int8), delivered)
        scalar = [backoff_update(s, Observation(int(o)), params, g, bool(d))
                  for s, o, g, d in zip(scalar, obs, rngs, delivered)]
    assert pop.states() == scalar
