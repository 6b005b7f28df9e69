"""
Deterministic round loop.

Per round: the adversary sees a frozen snapshot of protocol state and last
round's actions and picks noise, every node draws its action, the channel
resolves observations, states update and the round is recorded. Every random
draw comes from a per-(seed, node, purpose) substream, so a run is a pure
function of its SimConfig.
"""

import csv
import hashlib
import logging
import os
import struct
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from adversary import (
    EXACT_SPEND_STRATEGIES,
    AdversaryConfig,
    AdversaryView,
    BudgetViolation,
    WindowAudit,
    make_strategy,
    noise_for_round,
)
from metrics import FrameMetrics, RoundTally, competitive_from_counts, simulation_throughput_from_counts
from protocol import (
    BackoffParams,
    BackoffPopulation,
    SadeParams,
    SadePopulation,
    default_gamma,
    sade_steps_allowed,
)
from sinr import AuditResult, ChannelModel, Observation, PhysicalConfig, audit_round, potentially_busy
from topology import GridIndex, Topology, TopologySpec, build_topology, zone_radii

logger = logging.getLogger(__name__)

PURPOSES = {"placement": 0, "decision": 1, "jammer": 2, "backoff": 3}
WORKERS_ENV = "SADE_WORKERS"
# Rounds of decision uniforms drawn per node at a time
DECISION_CHUNK = 256
PROGRESS_EVERY = 500

TRACE_MAGIC = b"SADT"
TRACE_VERSION = 1
_HEADER = struct.Struct("<4sBII")
_ROUND = struct.Struct("<I")
_NODE_DTYPE = np.dtype([
    ("action", "u1"),
    ("observation", "u1"),
    ("busy", "u1"),
    ("sender", "<i4"),
    ("noise", "<f8"),
])


class SimConfig(BaseModel):
    """Everything a run depends on"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    topology: TopologySpec = Field(default_factory=TopologySpec)
    physical: PhysicalConfig = Field(default_factory=PhysicalConfig)
    adversary: AdversaryConfig = Field(default_factory=AdversaryConfig)
    protocol: Literal["sade", "backoff"] = Field("sade", description="MAC protocol")
    gamma: Optional[float] = Field(None, gt=0, le=1, description="SADE step, default formula when omitted")
    p_hat: float = Field(1.0 / 24.0, gt=0, lt=1, description="SADE send probability cap")
    backoff: BackoffParams = Field(default_factory=BackoffParams)
    rounds: int = Field(3000, ge=1, description="Rounds to simulate")
    seed: int = Field(0, ge=0, lt=2 ** 64, description="Master seed")
    frame_length: Optional[int] = Field(None, ge=1, description="Reporting frame length, whole run when omitted")
    audit: bool = Field(False, description="Check every round against the reception rule, budget and SADE steps")
    audit_sliding: bool = Field(False, description="With audit, also bound every T consecutive rounds")

    @model_validator(mode="after")
    def check_adaptive(self):
        if self.adversary.strategy == "adaptive" and self.protocol != "sade":
            raise ValueError("the adaptive jammer reads SADE window counters; use protocol 'sade'")
        return self


def rng_substream(seed: int, node: int, purpose: str) -> np.random.Generator:
    """Independent generator for one (seed, node, purpose)"""
    if purpose not in PURPOSES:
        raise ValueError(f"unknown purpose {purpose!r}, expected one of {sorted(PURPOSES)}")
    if node < 0:
        raise ValueError(f"node must be >= 0, got {node}")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(PURPOSES[purpose], node))
    return np.random.Generator(np.random.SFC64(seq))


class DecisionStream:
    """Per-node decision uniforms, drawn DECISION_CHUNK rounds ahead"""

    def __init__(self, seed: int, n: int, chunk: int = DECISION_CHUNK):
        self.generators = [rng_substream(seed, v, "decision") for v in range(n)]
        self.chunk = chunk
        self.buffer = np.empty((0, n))
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos >= self.buffer.shape[0]:
            self.buffer = np.stack([g.random(self.chunk) for g in self.generators], axis=1)
            self.pos = 0
        row = self.buffer[self.pos]
        self.pos += 1
        return row


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round: int
    actions: np.ndarray
    observations: np.ndarray
    senders: np.ndarray
    noise: np.ndarray
    potentially_busy: np.ndarray
    # Send probabilities and window estimates before the round (SADE only)
    p: Optional[np.ndarray] = None
    T_est: Optional[np.ndarray] = None


@dataclass
class RunAudit:
    """Hard-guarantee checks accumulated while a run executes"""
    channel: AuditResult = field(default_factory=AuditResult)
    ledger_failures: int = 0
    sliding_failures: int = 0
    state_violations: int = 0

    @property
    def ok(self) -> bool:
        return self.channel.ok and not (self.ledger_failures or self.sliding_failures or self.state_violations)


class RoundAuditor:
    def __init__(self, config: "SimConfig", channel: ChannelModel, n: int, sade_params: Optional[SadeParams]):
        adv = config.adversary
        self.channel = channel
        self.sade_params = sade_params
        self.windows = WindowAudit(n, adv.budget, adv.window, exact=adv.strategy in EXACT_SPEND_STRATEGIES,
                                   sliding=config.audit_sliding)
        self.result = RunAudit()

    def observe(self, actions: np.ndarray, observations: np.ndarray, senders: np.ndarray, noise: np.ndarray,
                before: Dict[str, np.ndarray], after: Dict[str, np.ndarray]) -> None:
        audit_round(self.channel, actions, observations, senders, noise, self.result.channel)
        self.windows.add(noise)
        if self.sade_params is None:
            return
        steps_ok = np.all(sade_steps_allowed(before["p"], after["p"], self.sade_params))
        if not steps_ok or np.any(after["T_est"] < 1):
            self.result.state_violations += 1

    def finish(self) -> RunAudit:
        self.windows.finish()
        self.result.ledger_failures = self.windows.aligned_failures
        self.result.sliding_failures = self.windows.sliding_failures
        return self.result


@dataclass(eq=False)
class RunSummary:
    seed: int
    n: int
    rounds: int
    protocol: str
    trace_hash: str
    noise_digest: str
    topology_digest: str
    successes: np.ndarray
    unjammed: np.ndarray
    sent: np.ndarray
    frames: List[FrameMetrics]
    aggregate_p: np.ndarray
    receptions: np.ndarray
    idle_count: np.ndarray
    window_deficit: float
    groups: Optional[np.ndarray] = None
    group_sizes: Optional[Dict[int, int]] = None
    group_area: Optional[float] = None
    elapsed: float = 0.0
    audit: Optional[RunAudit] = None

    @property
    def throughput(self) -> Optional[float]:
        return simulation_throughput_from_counts(self.successes, self.unjammed).value

    @property
    def excluded_nodes(self) -> List[int]:
        return simulation_throughput_from_counts(self.successes, self.unjammed).excluded

    @property
    def competitive(self):
        return competitive_from_counts(self.successes, self.unjammed)

    @property
    def total_receptions(self) -> int:
        return int(self.successes.sum())


@dataclass(eq=False)
class Trace:
    config: SimConfig
    topology: Topology
    index: GridIndex
    records: List[RoundRecord]
    final_states: list
    trace_hash: str
    noise_digest: str
    summary: RunSummary
    sade_params: Optional[SadeParams] = None

    def noise_matrix(self) -> np.ndarray:
        return np.stack([rec.noise for rec in self.records])

    def action_matrix(self) -> np.ndarray:
        return np.stack([rec.actions for rec in self.records])


def hash_round(hasher, t: int, actions: np.ndarray, observations: np.ndarray,
               senders: np.ndarray, noise: np.ndarray) -> None:
    hasher.update(_ROUND.pack(t))
    hasher.update(actions.astype("u1").tobytes())
    hasher.update(observations.astype("u1").tobytes())
    hasher.update(senders.astype("<i4").tobytes())
    hasher.update(noise.astype("<f8").tobytes())


def hash_records(records: Sequence[RoundRecord]) -> str:
    hasher = hashlib.sha256()
    for rec in records:
        hash_round(hasher, rec.round, rec.actions, rec.observations, rec.senders, rec.noise)
    return hasher.hexdigest()


def trace_hash(trace: Trace) -> str:
    """Recompute the hash of a recorded trace"""
    return hash_records(trace.records)


def topology_digest(topo: Topology) -> str:
    hasher = hashlib.sha256()
    hasher.update(struct.pack("<dd", topo.width, topo.height))
    hasher.update(topo.xs.astype("<f8").tobytes())
    hasher.update(topo.ys.astype("<f8").tobytes())
    return hasher.hexdigest()


def resolve_gamma(config: SimConfig, n: int) -> float:
    if config.gamma is not None:
        return config.gamma
    return default_gamma(config.adversary.window, n)


def _simulate(config: SimConfig, keep_records: bool):
    start = time.perf_counter()
    phys = config.physical
    r1, _ = zone_radii(phys)
    topo, index = build_topology(config.topology, rng_substream(config.seed, 0, "placement"), r1)
    n = topo.n
    channel = ChannelModel(topo, phys)

    sade_params = None
    decisions = None
    if config.protocol == "sade":
        sade_params = SadeParams(gamma=resolve_gamma(config, n), p_hat=config.p_hat)
        population = SadePopulation(sade_params, n)
        decisions = DecisionStream(config.seed, n)
    else:
        population = BackoffPopulation(config.backoff, [rng_substream(config.seed, v, "backoff") for v in range(n)])

    strategy = make_strategy(config.adversary, rng_substream(config.seed, 0, "jammer"))
    tally = RoundTally(n, config.rounds, config.frame_length)
    hasher = hashlib.sha256()
    noise_hasher = hashlib.sha256()
    records: List[RoundRecord] = []
    last_actions = np.zeros(n, dtype=bool)
    auditor = RoundAuditor(config, channel, n, sade_params) if config.audit else None

    logger.info(f"Run start: protocol={config.protocol}, jammer={config.adversary.strategy}, "
                f"n={n}, rounds={config.rounds}, seed={config.seed}")
    for t in range(config.rounds):
        view = AdversaryView.freeze(t, n, population.snapshot(), last_actions)
        try:
            noise = noise_for_round(strategy, view)
        except BudgetViolation as e:
            logger.error(f"Adversary exceeded its budget in round {t}: {e}")
            raise
        uniforms = decisions.next() if decisions is not None else None
        actions = population.decide(uniforms)
        outcome = channel.resolve(actions, noise)
        busy = potentially_busy(noise, phys)

        delivered = np.zeros(n, dtype=bool)
        delivered[outcome.senders[outcome.senders >= 0]] = True
        population.update(outcome.observations, delivered)
        if auditor is not None:
            auditor.observe(actions, outcome.observations, outcome.senders, noise, view.states, population.snapshot())

        p_before = view.states.get("p")
        tally.add(t, outcome.observations, busy, p_before)
        hash_round(hasher, t, actions, outcome.observations, outcome.senders, noise)
        noise_hasher.update(noise.astype("<f8").tobytes())
        if keep_records:
            records.append(RoundRecord(
                round=t,
                actions=actions,
                observations=outcome.observations,
                senders=outcome.senders,
                noise=noise,
                potentially_busy=busy,
                p=p_before,
                T_est=view.states.get("T_est"),
            ))
        last_actions = actions
        if (t + 1) % PROGRESS_EVERY == 0:
            logger.debug(f"round {t + 1}/{config.rounds}: receptions so far {int(tally.successes.sum())}")

    strategy.ledger.finish(config.rounds)
    audit = auditor.finish() if auditor is not None else None
    if audit is not None and not audit.ok:
        logger.warning(f"Audit found violations in seed {config.seed}: {audit}")
    elapsed = time.perf_counter() - start
    digest = hasher.hexdigest()
    summary = RunSummary(
        seed=config.seed,
        n=n,
        rounds=config.rounds,
        protocol=config.protocol,
        trace_hash=digest,
        noise_digest=noise_hasher.hexdigest(),
        topology_digest=topology_digest(topo),
        successes=tally.successes,
        unjammed=tally.unjammed,
        sent=tally.sent,
        frames=tally.frames,
        aggregate_p=tally.aggregate_p,
        receptions=tally.receptions,
        idle_count=tally.idle_count,
        window_deficit=strategy.ledger.window_deficit(),
        groups=topo.groups,
        group_sizes=topo.group_sizes,
        group_area=topo.group_area,
        elapsed=elapsed,
        audit=audit,
    )
    logger.info(f"Run done: seed={config.seed}, receptions={summary.total_receptions}, "
                f"hash={digest[:12]}, {elapsed:.2f}s")
    trace = Trace(
        config=config,
        topology=topo,
        index=index,
        records=records,
        final_states=population.states(),
        trace_hash=digest,
        noise_digest=summary.noise_digest,
        summary=summary,
        sade_params=sade_params,
    )
    return trace


def run(config: SimConfig) -> Trace:
    """Simulate config.rounds rounds and keep every RoundRecord"""
    return _simulate(config, keep_records=True)


def run_summary(config: SimConfig) -> RunSummary:
    """Same run as `run`, keeping only the counters"""
    return _simulate(config, keep_records=False).summary


def resolve_workers(workers: Optional[int] = None) -> int:
    if workers is None:
        raw = os.environ.get(WORKERS_ENV)
        if raw is None:
            return 1
        try:
            workers = int(raw)
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    return workers


def run_batch(config: SimConfig, seeds: Sequence[int], workers: Optional[int] = None) -> List[RunSummary]:
    """One independent run per seed, returned in seed-list order"""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("seeds must be non-empty")
    return run_configs([config.model_copy(update={"seed": int(s)}) for s in seeds], workers)


def run_configs(configs: Sequence[SimConfig], workers: Optional[int] = None) -> List[RunSummary]:
    """Summaries of arbitrary configs, in input order"""
    configs = list(configs)
    if not configs:
        raise ValueError("nothing to run")
    workers = resolve_workers(workers)
    if workers == 1 or len(configs) == 1:
        return [run_summary(c) for c in configs]
    logger.info(f"Running {len(configs)} runs on {min(workers, len(configs))} workers")
    try:
        with ProcessPoolExecutor(max_workers=min(workers, len(configs))) as pool:
            return list(pool.map(run_summary, configs))
    except Exception as e:
        logger.error(f"Batch failed: {e}")
        logger.error(traceback.format_exc())
        raise


class BatchStatistics(BaseModel):
    runs: int
    mean_throughput: Optional[float] = Field(None, description="Mean simulation throughput over seeds")
    std_throughput: Optional[float] = Field(None, description="Sample standard deviation over seeds")
    mean_competitive: float
    std_competitive: float
    mean_receptions: float
    excluded_runs: int = Field(0, description="Runs where every node was excluded from the throughput mean")


def _mean_std(values: Sequence[float]):
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std


def batch_statistics(summaries: Sequence[RunSummary]) -> BatchStatistics:
    if not summaries:
        raise ValueError("no summaries to aggregate")
    throughputs = [s.throughput for s in summaries if s.throughput is not None]
    comp_mean, comp_std = _mean_std([s.competitive.value for s in summaries])
    rec_mean, _ = _mean_std([s.total_receptions for s in summaries])
    thr_mean, thr_std = _mean_std(throughputs) if throughputs else (None, None)
    return BatchStatistics(
        runs=len(summaries),
        mean_throughput=thr_mean,
        std_throughput=thr_std,
        mean_competitive=comp_mean,
        std_competitive=comp_std,
        mean_receptions=rec_mean,
        excluded_runs=len(summaries) - len(throughputs),
    )


def _observation_label(obs: int, sender: int) -> str:
    if obs == Observation.RECEIVED:
        return f"received:{sender}"
    return Observation(obs).name.lower()


def write_trace_csv(trace: Trace, path: Union[str, Path]) -> None:
    """One row per node per round: round,node,action,observation,noise"""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "node", "action", "observation", "noise"])
        for rec in trace.records:
            for v in range(rec.actions.size):
                writer.writerow([
                    rec.round,
                    v,
                    "transmit" if rec.actions[v] else "listen",
                    _observation_label(int(rec.observations[v]), int(rec.senders[v])),
                    repr(float(rec.noise[v])),
                ])


def write_trace_binary(trace: Trace, path: Union[str, Path]) -> None:
    """
    Layout (little-endian): magic "SADT", version byte, n (u32), rounds (u32),
    then per round a u32 round index followed by n packed records of
    action u8, observation u8, potentially-busy u8, sender i32, noise f64
    """
    n = trace.topology.n
    with open(path, "wb") as f:
        f.write(_HEADER.pack(TRACE_MAGIC, TRACE_VERSION, n, len(trace.records)))
        row = np.zeros(n, dtype=_NODE_DTYPE)
        for rec in trace.records:
            row["action"] = rec.actions
            row["observation"] = rec.observations
            row["busy"] = rec.potentially_busy
            row["sender"] = rec.senders
            row["noise"] = rec.noise
            f.write(_ROUND.pack(rec.round))
            f.write(row.tobytes())


def read_trace_binary(path: Union[str, Path]) -> List[RoundRecord]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, rounds = _HEADER.unpack_from(data, 0)
    if magic != TRACE_MAGIC:
        raise ValueError(f"{path}: not a trace file (magic {magic!r})")
    if version != TRACE_VERSION:
        raise ValueError(f"{path}: unsupported trace version {version}")
    step = _ROUND.size + n * _NODE_DTYPE.itemsize
    if len(data) != _HEADER.size + rounds * step:
        raise ValueError(f"{path}: expected {rounds} rounds of {n} nodes")
    records = []
    offset = _HEADER.size
    for _ in range(rounds):
        (t,) = _ROUND.unpack_from(data, offset)
        row = np.frombuffer(data, dtype=_NODE_DTYPE, count=n, offset=offset + _ROUND.size)
        records.append(RoundRecord(
            round=t,
            actions=row["action"].astype(bool),
            observations=row["observation"].astype(np.int8),
            senders=row["sender"].astype(np.int32),
            noise=row["noise"].astype(np.float64),
            potentially_busy=row["busy"].astype(bool),
        ))
        offset += step
    return records
