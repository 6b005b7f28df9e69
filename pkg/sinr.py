"""
Physical layer: received power, interference aggregation, carrier sensing
and the SINR reception rule
"""

import logging
import math
from dataclasses import dataclass, fields
from enum import IntEnum
from typing import Collection, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from topology import GridIndex, Topology, torus_distance

logger = logging.getLogger(__name__)

# Senders processed per block when building gain matrices
GAIN_BLOCK = 256


class PhysicalConfig(BaseModel):
    """Physical-layer constants"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(3.0, gt=2, description="Path-loss exponent")
    beta: float = Field(2.0, gt=1, description="SINR threshold")
    theta: float = Field(1.0, gt=0, description="Carrier-sense noise threshold")
    power: float = Field(8.0, gt=0, description="Transmit power P")
    epsilon: float = Field(1.0 / 3.0, gt=0, lt=1, description="Jamming slack constant")
    cutoff: float = Field(0.0, ge=0, description="Drop interference terms below this power (0 = exact)")

    @property
    def busy_noise_level(self) -> float:
        """Noise at or above which a step is potentially busy"""
        return (1.0 - self.epsilon) * self.theta

    @property
    def cutoff_radius(self) -> Optional[float]:
        if self.cutoff <= 0:
            return None
        return (self.power / self.cutoff) ** (1.0 / self.alpha)


class Observation(IntEnum):
    IDLE = 0
    BUSY = 1
    RECEIVED = 2
    SENT = 3


@dataclass(frozen=True, eq=False)
class RoundActivity:
    transmitters: frozenset
    noise: np.ndarray

    def __post_init__(self):
        noise = np.asarray(self.noise, dtype=np.float64)
        if np.any(noise < 0):
            raise ValueError("Adversarial noise must be non-negative")
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "transmitters", frozenset(int(v) for v in self.transmitters))

    @classmethod
    def build(cls, transmitters: Collection[int], noise) -> "RoundActivity":
        return cls(transmitters=frozenset(transmitters), noise=noise)


def received_power(phys: PhysicalConfig, d: float) -> float:
    if d <= 0:
        raise ValueError(f"distance must be positive, got {d}")
    return phys.power / d ** phys.alpha


def cutoff_error_bound(phys: PhysicalConfig, n: int) -> float:
    """Worst-case absolute interference error introduced by the far-field cutoff"""
    return n * phys.cutoff


def _sender_powers(v: int, activity: RoundActivity, topo: Topology, index: GridIndex, phys: PhysicalConfig, radius=None):
    me = topo.position(v)
    cand = index.candidates(me.x, me.y, radius)
    tx = np.fromiter(sorted(activity.transmitters), dtype=np.int64, count=len(activity.transmitters))
    senders = [int(w) for w in cand[np.isin(cand, tx)] if int(w) != v]
    return [(w, received_power(phys, torus_distance(topo.position(w), me, topo))) for w in senders]


def interference_at(
    v: int,
    activity: RoundActivity,
    topo: Topology,
    index: GridIndex,
    phys: PhysicalConfig,
    exclude: Optional[int] = None,
) -> float:
    """ADV(v) plus the received power of every transmitter other than v and exclude"""
    if exclude is not None and exclude == v:
        raise ValueError("the receiver itself cannot be excluded")
    terms = [float(activity.noise[v])]
    for w, pw in _sender_powers(v, activity, topo, index, phys, phys.cutoff_radius):
        if w == exclude or pw < phys.cutoff:
            continue
        terms.append(pw)
    return math.fsum(terms)


def carrier_sense(v: int, activity: RoundActivity, topo: Topology, index: GridIndex, phys: PhysicalConfig) -> Observation:
    if v in activity.transmitters:
        raise ValueError(f"node {v} is transmitting and cannot sense")
    if interference_at(v, activity, topo, index, phys) >= phys.theta:
        return Observation.BUSY
    return Observation.IDLE


def try_receive(v: int, activity: RoundActivity, topo: Topology, index: GridIndex, phys: PhysicalConfig) -> Optional[int]:
    """The transmitter whose message v decodes this round, if any"""
    if v in activity.transmitters:
        raise ValueError(f"node {v} is transmitting and cannot receive")
    powers = _sender_powers(v, activity, topo, index, phys)
    if not powers:
        return None
    # With beta > 1 only the strongest sender can satisfy the rule
    best, signal = max(powers, key=lambda item: (item[1], -item[0]))
    rest = math.fsum(
        [float(activity.noise[v])] + [pw for w, pw in powers if w != best and pw >= phys.cutoff]
    )
    if rest == 0.0 or signal >= phys.beta * rest:
        return best
    return None


def potentially_busy(adv_v, phys: PhysicalConfig):
    """Works on a scalar or a numpy array of noise levels"""
    return adv_v >= phys.busy_noise_level


@dataclass(frozen=True, eq=False)
class ChannelOutcome:
    observations: np.ndarray
    senders: np.ndarray
    total_power: np.ndarray


class ChannelModel:
    """Vectorised per-round resolver over a fixed topology"""

    def __init__(self, topo: Topology, phys: PhysicalConfig):
        self.topo = topo
        self.phys = phys
        self.n = topo.n

    def gain_matrix(self, senders: np.ndarray) -> np.ndarray:
        """Received power of each sender (rows) at each node (columns); zero at the sender itself"""
        topo, phys = self.topo, self.phys
        dx = np.abs(topo.xs[None, :] - topo.xs[senders][:, None])
        dy = np.abs(topo.ys[None, :] - topo.ys[senders][:, None])
        dx = np.minimum(dx, topo.width - dx)
        dy = np.minimum(dy, topo.height - dy)
        d = np.sqrt(dx * dx + dy * dy)
        with np.errstate(divide="ignore"):
            gain = phys.power / d ** phys.alpha
        gain[np.arange(senders.size), senders] = 0.0
        return gain

    def resolve(self, transmit: np.ndarray, noise: np.ndarray) -> ChannelOutcome:
        """
        Observation of every node for one round.

        Reception is checked before idleness: a listener that decodes a sender
        reports RECEIVED even though its measured power is above theta.
        """
        n, phys = self.n, self.phys
        senders = np.flatnonzero(transmit)
        total = np.array(noise, dtype=np.float64)
        best_gain = np.zeros(n)
        best_sender = np.full(n, -1, dtype=np.int32)

        for start in range(0, senders.size, GAIN_BLOCK):
            block = senders[start:start + GAIN_BLOCK]
            gain = self.gain_matrix(block)
            if phys.cutoff > 0:
                total += np.where(gain < phys.cutoff, 0.0, gain).sum(axis=0)
            else:
                total += gain.sum(axis=0)
            arg = gain.argmax(axis=0)
            top = gain[arg, np.arange(n)]
            better = top > best_gain
            best_gain = np.where(better, top, best_gain)
            best_sender = np.where(better, block[arg], best_sender).astype(np.int32)

        counted = best_gain if phys.cutoff <= 0 else np.where(best_gain < phys.cutoff, 0.0, best_gain)
        rest = total - counted
        decoded = (best_gain > 0) & ((rest <= 0) | (best_gain >= phys.beta * rest))

        listening = ~transmit
        received = listening & decoded
        obs = np.full(n, Observation.IDLE, dtype=np.int8)
        obs[listening & ~decoded & (total >= phys.theta)] = Observation.BUSY
        obs[received] = Observation.RECEIVED
        obs[transmit] = Observation.SENT
        sender_of = np.where(received, best_sender, -1).astype(np.int32)
        return ChannelOutcome(observations=obs, senders=sender_of, total_power=total)


@dataclass
class AuditResult:
    rounds: int = 0
    multiple_decoders: int = 0
    mismatched_receptions: int = 0
    unsound_idle: int = 0
    unsound_busy: int = 0
    listening_transmitters: int = 0

    @property
    def ok(self) -> bool:
        return not (self.multiple_decoders or self.mismatched_receptions or self.unsound_idle
                    or self.unsound_busy or self.listening_transmitters)

    def add(self, other: "AuditResult") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))


def audit_round(channel: ChannelModel, actions: np.ndarray, observations: np.ndarray,
                senders: np.ndarray, noise: np.ndarray, result: Optional[AuditResult] = None) -> AuditResult:
    """
    Recompute one recorded round from its inputs and count every deviation
    from the reception rule. Terms below phys.cutoff are dropped exactly as
    ChannelModel.resolve drops them.
    """
    result = result or AuditResult()
    result.rounds += 1
    phys = channel.phys
    transmit = actions.astype(bool)
    listening = ~transmit
    result.listening_transmitters += int(np.sum(transmit & (observations != Observation.SENT)))
    result.listening_transmitters += int(np.sum(listening & (observations == Observation.SENT)))

    idx = np.flatnonzero(transmit)
    if idx.size == 0:
        total = noise
        satisfiers = np.zeros(channel.n, dtype=np.int64)
        decoded_by = np.full(channel.n, -1)
    else:
        gain = channel.gain_matrix(idx)
        counted = gain if phys.cutoff <= 0 else np.where(gain < phys.cutoff, 0.0, gain)
        total = noise + counted.sum(axis=0)
        others = total[None, :] - counted
        ok = (gain > 0) & ((others <= 0) | (gain >= phys.beta * others))
        satisfiers = ok.sum(axis=0)
        decoded_by = np.where(satisfiers > 0, idx[ok.argmax(axis=0)], -1)

    result.multiple_decoders += int(np.sum(listening & (satisfiers > 1)))
    rec = listening & (observations == Observation.RECEIVED)
    result.mismatched_receptions += int(np.sum(rec & (decoded_by != senders)))
    result.mismatched_receptions += int(np.sum(listening & ~rec & (satisfiers > 0)))
    result.unsound_idle += int(np.sum(listening & (observations == Observation.IDLE) & (total >= phys.theta)))
    result.unsound_busy += int(np.sum(listening & (observations == Observation.BUSY) & (total < phys.theta)))
    return result


def brute_force_interference(v: int, activity: RoundActivity, topo: Topology, phys: PhysicalConfig,
                             exclude: Optional[int] = None) -> float:
    """Plain pairwise sum over every transmitter, no index"""
    total = float(activity.noise[v])
    me = topo.position(v)
    for w in sorted(activity.transmitters):
        if w in (v, exclude):
            continue
        total += received_power(phys, torus_distance(topo.position(w), me, topo))
    return total
