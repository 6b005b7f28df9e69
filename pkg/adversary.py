"""
Budget-tracked jamming strategies.

Every strategy emits one NoiseVector per round through noise_for_round, which
charges a per-node ledger over aligned windows [kT, (k+1)T). A strategy that
overspends raises BudgetViolation and the simulation aborts.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

LEDGER_TOLERANCE = 1e-9
# Below this a correction amount is rounding residue, not noise
RESIDUE = 1e-12
# Strategies that spend exactly B*T in every complete aligned window
EXACT_SPEND_STRATEGIES = ("reg", "bur")


class BudgetViolation(RuntimeError):
    pass


class AdversaryConfig(BaseModel):
    """(B,T)-bounded adversary settings and strategy choice"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    strategy: Literal["reg", "bur", "const", "adaptive", "none"] = Field("reg", description="Jamming strategy")
    budget: float = Field(2.0 / 3.0, ge=0, description="Average noise per round B")
    window: int = Field(60, ge=1, description="Budget window T in rounds")
    epsilon: float = Field(1.0 / 3.0, gt=0, le=1, description="Jam probability / burst fraction")
    uniform: bool = Field(False, description="Same noise at every node in a round")
    reg_mode: Literal["random", "strided"] = Field("random", description="Reg jammer: per-round coin or every ceil(1/eps)-th round")
    level: Optional[float] = Field(None, ge=0, description="Constant jammer noise level, B when omitted")


@dataclass(frozen=True, eq=False)
class AdversaryView:
    """Read-only snapshot taken before the nodes act in a round"""
    round: int
    n: int
    states: Mapping[str, np.ndarray]
    last_actions: Optional[np.ndarray] = None

    @classmethod
    def freeze(cls, round_index: int, n: int, states: Mapping[str, np.ndarray], last_actions=None) -> "AdversaryView":
        frozen = {}
        for name, values in states.items():
            arr = np.array(values, copy=True)
            arr.setflags(write=False)
            frozen[name] = arr
        if last_actions is not None:
            last_actions = np.array(last_actions, copy=True)
            last_actions.setflags(write=False)
        return cls(round=round_index, n=n, states=frozen, last_actions=last_actions)


class BudgetLedger:
    """Per-node spend inside the current aligned window"""

    def __init__(self, n: int, budget: float, window: int, tolerance: float = LEDGER_TOLERANCE):
        self.n = n
        self.budget = budget
        self.window = window
        self.tolerance = tolerance
        self.cap = budget * window
        self.spent = np.zeros(n)
        self.window_index = 0
        self.closed: List[np.ndarray] = []

    def _roll(self, round_index: int) -> None:
        k = round_index // self.window
        while self.window_index < k:
            self.closed.append(self.spent.copy())
            self.spent = np.zeros(self.n)
            self.window_index += 1

    def remaining(self, round_index: int) -> np.ndarray:
        self._roll(round_index)
        return np.maximum(self.cap - self.spent, 0.0)

    def charge(self, round_index: int, noise: np.ndarray) -> None:
        self._roll(round_index)
        if noise.shape != (self.n,) or np.any(noise < 0):
            raise BudgetViolation(f"round {round_index}: malformed noise vector")
        self.spent += noise
        over = self.spent - self.cap
        if np.any(over > self.tolerance):
            v = int(np.argmax(over))
            raise BudgetViolation(
                f"round {round_index}: node {v} spent {self.spent[v]:.12g} > B*T = {self.cap:.12g}"
            )

    def finish(self, rounds: int) -> None:
        """Close every window that is complete after `rounds` rounds"""
        self._roll(rounds)

    def window_deficit(self) -> float:
        """Largest |B*T - spend| over the closed windows (0 when none closed)"""
        if not self.closed:
            return 0.0
        return float(max(np.max(np.abs(self.cap - w)) for w in self.closed))


class JammingStrategy:
    """Base class: subclasses propose noise, the base class keeps the books"""
    uniform = False

    def __init__(self, cfg: AdversaryConfig):
        self.cfg = cfg
        self.ledger: Optional[BudgetLedger] = None

    @property
    def budget(self) -> float:
        return self.cfg.budget

    def _ensure_ledger(self, n: int) -> BudgetLedger:
        if self.ledger is None:
            self.ledger = BudgetLedger(n, self.budget, self.cfg.window)
        return self.ledger

    def noise_for_round(self, view: AdversaryView) -> np.ndarray:
        ledger = self._ensure_ledger(view.n)
        remaining = ledger.remaining(view.round)
        noise = np.asarray(self._propose(view, remaining), dtype=np.float64)
        ledger.charge(view.round, noise)
        return noise

    def _propose(self, view: AdversaryView, remaining: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class RegJammer(JammingStrategy):
    """
    Jams each node with probability eps per round at level B/eps (or every
    ceil(1/eps)-th round in strided mode). Near the end of a window the level
    is raised just enough that the window total reaches B*T exactly.
    """

    def __init__(self, cfg: AdversaryConfig, rng: np.random.Generator):
        super().__init__(cfg)
        if not 0 < cfg.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {cfg.epsilon}")
        self.rng = rng
        self.uniform = cfg.uniform
        self.level = cfg.budget / cfg.epsilon
        self.stride = max(1, math.ceil(1.0 / cfg.epsilon - 1e-9))
        self.offsets: Optional[np.ndarray] = None

    def _jam_mask(self, view: AdversaryView) -> np.ndarray:
        n = view.n
        if self.cfg.reg_mode == "strided":
            if self.offsets is None:
                if self.uniform:
                    self.offsets = np.full(n, int(self.rng.integers(self.stride)))
                else:
                    self.offsets = self.rng.integers(self.stride, size=n)
            return (view.round + self.offsets) % self.stride == 0
        if self.uniform:
            return np.full(n, self.rng.random() < self.cfg.epsilon)
        return self.rng.random(n) < self.cfg.epsilon

    def _propose(self, view: AdversaryView, remaining: np.ndarray) -> np.ndarray:
        T = self.cfg.window
        left = T - view.round % T
        jam = self._jam_mask(view)
        noise = np.where(jam, self.level, 0.0)
        # Least spend now that still lets the remaining rounds exhaust the budget
        floor = remaining - (left - 1) * self.level
        floor = np.where(floor < RESIDUE, 0.0, floor)
        noise = np.maximum(noise, floor)
        if left == 1:
            noise = np.where(remaining < RESIDUE, 0.0, remaining)
        return np.minimum(noise, remaining)


class BurJammer(JammingStrategy):
    """Jams the first floor(eps*T) rounds of every window at level B/eps"""
    uniform = True

    def __init__(self, cfg: AdversaryConfig):
        super().__init__(cfg)
        self.level = cfg.budget / cfg.epsilon
        self.burst = int(math.floor(cfg.epsilon * cfg.window + 1e-9))

    def _propose(self, view: AdversaryView, remaining: np.ndarray) -> np.ndarray:
        k = view.round % self.cfg.window
        if k < self.burst:
            return np.minimum(np.full(view.n, self.level), remaining)
        if k == self.burst:
            # Fractional remainder of eps*T
            return np.where(remaining < RESIDUE, 0.0, remaining)
        return np.zeros(view.n)


class ConstantJammer(JammingStrategy):
    uniform = True

    def __init__(self, level: float, window: int = 60):
        if level < 0:
            raise ValueError(f"jamming level must be >= 0, got {level}")
        super().__init__(AdversaryConfig(strategy="const", budget=level, window=window, epsilon=1.0, level=level))
        self.level = level

    def _propose(self, view: AdversaryView, remaining: np.ndarray) -> np.ndarray:
        return np.full(view.n, self.level)


class WindowClosingJammer(JammingStrategy):
    """
    Adaptive example: reads each node's window counter and jams it at level
    B/eps in the round that closes its current T_v window, while budget lasts
    """

    def __init__(self, cfg: AdversaryConfig):
        super().__init__(cfg)
        self.level = cfg.budget / cfg.epsilon

    def _propose(self, view: AdversaryView, remaining: np.ndarray) -> np.ndarray:
        if "c" not in view.states or "T_est" not in view.states:
            raise ValueError("window-closing jammer needs protocol states with c and T_est")
        closing = view.states["c"] >= view.states["T_est"]
        return np.where(closing & (remaining >= self.level), self.level, 0.0)


def reg_jammer(cfg: AdversaryConfig, rng: np.random.Generator) -> RegJammer:
    return RegJammer(cfg, rng)


def bur_jammer(cfg: AdversaryConfig) -> BurJammer:
    return BurJammer(cfg)


def constant_jammer(level: float, window: int = 60) -> ConstantJammer:
    return ConstantJammer(level, window)


def noise_for_round(strategy: JammingStrategy, view: AdversaryView) -> np.ndarray:
    return strategy.noise_for_round(view)


def make_strategy(cfg: AdversaryConfig, rng: np.random.Generator) -> JammingStrategy:
    if cfg.strategy == "reg":
        return reg_jammer(cfg, rng)
    if cfg.strategy == "bur":
        return bur_jammer(cfg)
    if cfg.strategy == "const":
        return constant_jammer(cfg.budget if cfg.level is None else cfg.level, cfg.window)
    if cfg.strategy == "adaptive":
        return WindowClosingJammer(cfg)
    return constant_jammer(0.0, cfg.window)


def window_totals(noise_rows: np.ndarray, window: int) -> np.ndarray:
    """Per aligned window, per node spend; the last window may be partial"""
    rounds = noise_rows.shape[0]
    starts = np.arange(0, rounds, window)
    return np.add.reduceat(noise_rows, starts, axis=0) if rounds else np.zeros((0, noise_rows.shape[1]))


def verify_aligned_windows(noise_rows: np.ndarray, budget: float, window: int,
                           exact: bool = False, tolerance: float = LEDGER_TOLERANCE) -> bool:
    """
    Every aligned window spends at most B*T per node; with exact=True every
    complete window must spend B*T to within tolerance
    """
    totals = window_totals(noise_rows, window)
    cap = budget * window
    if np.any(totals > cap + tolerance):
        return False
    if exact:
        complete = noise_rows.shape[0] // window
        if complete and np.any(np.abs(totals[:complete] - cap) > tolerance):
            return False
    return True


def verify_sliding_windows(noise_rows: np.ndarray, budget: float, window: int,
                           tolerance: float = LEDGER_TOLERANCE) -> bool:
    """Stricter check over every interval of T consecutive rounds"""
    rounds = noise_rows.shape[0]
    if rounds == 0:
        return True
    csum = np.vstack([np.zeros((1, noise_rows.shape[1])), np.cumsum(noise_rows, axis=0)])
    span = min(window, rounds)
    sums = csum[span:] - csum[:-span]
    return bool(np.all(sums <= budget * window + tolerance))


class WindowAudit:
    """
    Streaming form of verify_aligned_windows and, with sliding=True,
    verify_sliding_windows; counts failing windows and failing rounds
    """

    def __init__(self, n: int, budget: float, window: int, exact: bool = False,
                 sliding: bool = False, tolerance: float = LEDGER_TOLERANCE):
        self.cap = budget * window
        self.window = window
        self.exact = exact
        self.tolerance = tolerance
        self.spent = np.zeros(n)
        self.recent = np.zeros((window, n)) if sliding else None
        self.rounds = 0
        self.aligned_failures = 0
        self.sliding_failures = 0

    def add(self, noise: np.ndarray) -> None:
        self.spent += noise
        if self.recent is not None:
            self.recent[self.rounds % self.window] = noise
            if np.any(self.recent.sum(axis=0) > self.cap + self.tolerance):
                self.sliding_failures += 1
        self.rounds += 1
        if self.rounds % self.window == 0:
            self._close(complete=True)

    def _close(self, complete: bool) -> None:
        bad = np.any(self.spent > self.cap + self.tolerance)
        if complete and self.exact:
            bad = bad or np.any(np.abs(self.spent - self.cap) > self.tolerance)
        self.aligned_failures += int(bad)
        self.spent = np.zeros_like(self.spent)

    def finish(self) -> None:
        """Check the trailing partial window, if any"""
        if self.rounds % self.window:
            self._close(complete=False)


def write_jam_schedule(path: Union[str, Path], noise_rows: Iterable[np.ndarray]) -> int:
    """Write non-zero noise entries as round,node,noise; returns the row count"""
    count = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "node", "noise"])
        for t, row in enumerate(noise_rows):
            for v in np.flatnonzero(row):
                writer.writerow([t, int(v), repr(float(row[v]))])
                count += 1
    return count
