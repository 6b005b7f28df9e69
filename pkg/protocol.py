"""
MAC protocols: SADE and a slotted binary-exponential-backoff baseline.

The per-node functions are pure transitions (old state + observation -> new
state). The population classes apply the same rules to every node at once
over numpy arrays and are what the engine drives.
"""

import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sinr import Observation

logger = logging.getLogger(__name__)


class Action(IntEnum):
    LISTEN = 0
    TRANSMIT = 1


class SadeParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: float = Field(..., gt=0, le=1, description="Multiplicative step")
    p_hat: float = Field(1.0 / 24.0, gt=0, lt=1, description="Send probability cap")


# Constant in front of 1 / (log T + log log n); about 0.33 at T=60, n=500
GAMMA_SCALE = 3.0


def default_gamma(window: int, n: int) -> float:
    """GAMMA_SCALE / (log2 T + log2 log2 n), clamped to [0.01, 0.5]"""
    log_t = math.log2(max(window, 1))
    loglog_n = math.log2(max(math.log2(max(n, 1)), 1.0))
    denom = log_t + loglog_n
    if denom <= 0:
        return 0.5
    return min(0.5, max(0.01, GAMMA_SCALE / denom))


@dataclass(frozen=True)
class SadeState:
    p: float
    T_est: int
    c: int
    idle_in_window: bool


def sade_init(params: SadeParams) -> SadeState:
    return SadeState(p=params.p_hat, T_est=1, c=1, idle_in_window=False)


def sade_decide(state: SadeState, rng: np.random.Generator) -> Action:
    return Action.TRANSMIT if rng.random() < state.p else Action.LISTEN


def sade_update(state: SadeState, obs: Observation, params: SadeParams) -> SadeState:
    """One round of the SADE rule: reception/idle step, then the window counter"""
    grow = 1.0 + params.gamma
    p, T_est, c, idle = state.p, state.T_est, state.c, state.idle_in_window

    if obs == Observation.RECEIVED:
        p = p / grow
    elif obs == Observation.IDLE:
        p = min(grow * p, params.p_hat)
        T_est = max(1, T_est - 1)
        idle = True

    c += 1
    if c > T_est:
        c = 1
        if not idle:
            p = p / grow
            T_est += 2
        idle = False
    return SadeState(p=p, T_est=T_est, c=c, idle_in_window=idle)


def sade_steps_allowed(p: np.ndarray, q: np.ndarray, params: SadeParams) -> np.ndarray:
    """
    Per node, whether q is a value one update can produce from p: unchanged,
    one or two divisions by (1+gamma), or one capped multiplication
    """
    grow = 1.0 + params.gamma
    down = p / grow
    in_range = (q > 0) & (q <= params.p_hat)
    return in_range & ((q == p) | (q == down) | (q == down / grow) | (q == np.minimum(grow * p, params.p_hat)))


class BackoffParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    cw_min: int = Field(2, ge=1, description="Minimum contention window in slots")
    cw_max: int = Field(1024, ge=1, description="Maximum contention window in slots")

    @model_validator(mode="after")
    def check_order(self):
        if self.cw_max < self.cw_min:
            raise ValueError("cw_max must be >= cw_min")
        return self


@dataclass(frozen=True)
class BackoffState:
    contention_window: int
    timer: int


def backoff_init(params: BackoffParams, rng: np.random.Generator) -> BackoffState:
    return BackoffState(contention_window=params.cw_min, timer=int(rng.integers(0, params.cw_min)))


def backoff_decide(state: BackoffState) -> Action:
    return Action.TRANSMIT if state.timer == 0 else Action.LISTEN


def backoff_update(state: BackoffState, obs: Observation, params: BackoffParams,
                   rng: np.random.Generator, delivered: bool = False) -> BackoffState:
    """
    Idle slots count the timer down, busy slots freeze it. After an own
    transmission the window resets on delivery and doubles otherwise, and a
    fresh timer is drawn from [0, CW).
    """
    if obs == Observation.SENT:
        cw = params.cw_min if delivered else min(2 * state.contention_window, params.cw_max)
        return BackoffState(contention_window=cw, timer=int(rng.integers(0, cw)))
    if obs == Observation.IDLE:
        return BackoffState(contention_window=state.contention_window, timer=max(0, state.timer - 1))
    return state


class SadePopulation:
    """SADE state of every node as arrays"""
    name = "sade"
    needs_uniforms = True

    def __init__(self, params: SadeParams, n: int):
        self.params = params
        self.n = n
        self.p = np.full(n, params.p_hat)
        self.T_est = np.ones(n, dtype=np.int64)
        self.c = np.ones(n, dtype=np.int64)
        self.idle_in_window = np.zeros(n, dtype=bool)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {"p": self.p, "T_est": self.T_est, "c": self.c, "idle_in_window": self.idle_in_window}

    def send_probabilities(self) -> Optional[np.ndarray]:
        return self.p

    def decide(self, uniforms: Optional[np.ndarray]) -> np.ndarray:
        return uniforms < self.p

    def update(self, observations: np.ndarray, delivered: np.ndarray) -> None:
        grow = 1.0 + self.params.gamma
        received = observations == Observation.RECEIVED
        idle = observations == Observation.IDLE

        p = np.where(received, self.p / grow, self.p)
        p = np.where(idle, np.minimum(grow * p, self.params.p_hat), p)
        T_est = np.where(idle, np.maximum(1, self.T_est - 1), self.T_est)
        flag = self.idle_in_window | idle

        c = self.c + 1
        wrap = c > T_est
        shrink = wrap & ~flag
        p = np.where(shrink, p / grow, p)
        T_est = np.where(shrink, T_est + 2, T_est)
        c[wrap] = 1
        flag = flag & ~wrap

        self.p, self.T_est, self.c, self.idle_in_window = p, T_est, c, flag

    def states(self) -> List[SadeState]:
        return [
            SadeState(p=float(p), T_est=int(t), c=int(c), idle_in_window=bool(f))
            for p, t, c, f in zip(self.p, self.T_est, self.c, self.idle_in_window)
        ]


class BackoffPopulation:
    """Backoff state of every node; each node redraws from its own generator"""
    name = "backoff"
    needs_uniforms = False

    def __init__(self, params: BackoffParams, generators: Sequence[np.random.Generator]):
        self.params = params
        self.generators = list(generators)
        self.n = len(self.generators)
        self.cw = np.full(self.n, params.cw_min, dtype=np.int64)
        self.timer = np.array([int(g.integers(0, params.cw_min)) for g in self.generators], dtype=np.int64)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {"contention_window": self.cw, "timer": self.timer}

    def send_probabilities(self) -> Optional[np.ndarray]:
        return None

    def decide(self, uniforms: Optional[np.ndarray] = None) -> np.ndarray:
        return self.timer == 0

    def update(self, observations: np.ndarray, delivered: np.ndarray) -> None:
        cw = self.cw.copy()
        timer = self.timer.copy()
        idle = observations == Observation.IDLE
        timer[idle] = np.maximum(0, timer[idle] - 1)
        for v in np.flatnonzero(observations == Observation.SENT):
            cw[v] = self.params.cw_min if delivered[v] else min(2 * cw[v], self.params.cw_max)
            timer[v] = int(self.generators[v].integers(0, cw[v]))
        self.cw, self.timer = cw, timer

    def states(self) -> List[BackoffState]:
        return [BackoffState(contention_window=int(w), timer=int(t)) for w, t in zip(self.cw, self.timer)]
