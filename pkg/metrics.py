"""
Throughput accounting, convergence series and analysis-side diagnostics
(sector and zone aggregate probabilities, open rounds, window estimates)
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse

from sinr import Observation
from topology import Topology, nodes_within, torus_distances, torus_offsets, zone_radii

if TYPE_CHECKING:
    from engine import Trace

logger = logging.getLogger(__name__)

RHO_GREEN = 5.0
RHO_YELLOW = 5.0 * math.e
RHO_RED = 5.0 * math.e ** 2
SECTORS = 6

Frame = Tuple[int, int]


@dataclass(eq=False)
class FrameMetrics:
    """Counts over rounds [start, end)"""
    start: int
    end: int
    f_v: np.ndarray
    s_v: np.ndarray
    unjammed: np.ndarray

    @property
    def length(self) -> int:
        return self.end - self.start


class ThroughputRatio(BaseModel):
    value: float = Field(..., description="Ratio, 1 by convention when the denominator is 0")
    vacuous: bool = Field(False, description="True when there was nothing to compete against")
    numerator: float
    denominator: float


class SimulationThroughput(BaseModel):
    value: Optional[float] = Field(None, description="Mean of s_v / unjammed_v over counted nodes")
    excluded: List[int] = Field(default_factory=list, description="Nodes with no unjammed round")


class GroupThroughput(BaseModel):
    group: int
    nodes: int
    density: float = Field(..., description="Nodes per unit area of the sub-square")
    throughput: Optional[float]
    excluded: int = 0


class RoundTally:
    """
    Streaming counters fed one round at a time by the engine; the same
    counters are rebuilt from a full trace for post-processing
    """

    def __init__(self, n: int, rounds: int, frame_length: Optional[int] = None):
        self.n = n
        self.rounds = rounds
        self.frame_length = frame_length or rounds
        self.frames: List[FrameMetrics] = []
        self.successes = np.zeros(n, dtype=np.int64)
        self.unjammed = np.zeros(n, dtype=np.int64)
        self.sent = np.zeros(n, dtype=np.int64)
        self.aggregate_p = np.full(rounds, np.nan)
        self.receptions = np.zeros(rounds, dtype=np.int64)
        self.idle_count = np.zeros(rounds, dtype=np.int64)
        self._start = 0
        self._f = np.zeros(n, dtype=np.int64)
        self._s = np.zeros(n, dtype=np.int64)

    def add(self, t: int, observations: np.ndarray, busy: np.ndarray, p: Optional[np.ndarray]) -> None:
        received = observations == Observation.RECEIVED
        free = ~busy
        self.successes += received
        self.unjammed += free
        self.sent += observations == Observation.SENT
        self._s += received
        self._f += free
        self.receptions[t] = int(received.sum())
        self.idle_count[t] = int((observations == Observation.IDLE).sum())
        if p is not None:
            self.aggregate_p[t] = math.fsum(p.tolist())
        if t + 1 - self._start == self.frame_length or t + 1 == self.rounds:
            # f_v and the unjammed count coincide: both are "noise below (1-eps)theta"
            self.frames.append(FrameMetrics(self._start, t + 1, self._f.copy(), self._s.copy(), self._f.copy()))
            self._start = t + 1
            self._f[:] = 0
            self._s[:] = 0


def tally_trace(trace: "Trace", frame_length: Optional[int] = None) -> RoundTally:
    tally = RoundTally(trace.topology.n, len(trace.records), frame_length)
    for rec in trace.records:
        tally.add(rec.round, rec.observations, rec.potentially_busy, rec.p)
    return tally


def competitive_from_counts(successes: np.ndarray, non_busy: np.ndarray) -> ThroughputRatio:
    num = float(np.sum(successes))
    den = float(np.sum(non_busy))
    if den == 0:
        return ThroughputRatio(value=1.0, vacuous=True, numerator=num, denominator=den)
    return ThroughputRatio(value=num / den, numerator=num, denominator=den)


def simulation_throughput_from_counts(successes: np.ndarray, unjammed: np.ndarray) -> SimulationThroughput:
    counted = unjammed > 0
    excluded = np.flatnonzero(~counted).tolist()
    if not counted.any():
        return SimulationThroughput(value=None, excluded=excluded)
    ratios = successes[counted] / unjammed[counted]
    return SimulationThroughput(value=float(np.mean(ratios)), excluded=excluded)


def _frame_bounds(trace: "Trace", frame: Optional[Frame]) -> Frame:
    rounds = len(trace.records)
    if frame is None:
        return 0, rounds
    start, end = frame
    if not 0 <= start <= end <= rounds:
        raise ValueError(f"frame {frame} is outside the trace of {rounds} rounds")
    return start, end


def frame_metrics(trace: "Trace", frame: Optional[Frame] = None) -> FrameMetrics:
    start, end = _frame_bounds(trace, frame)
    n = trace.topology.n
    f = np.zeros(n, dtype=np.int64)
    s = np.zeros(n, dtype=np.int64)
    for rec in trace.records[start:end]:
        f += ~rec.potentially_busy
        s += rec.observations == Observation.RECEIVED
    return FrameMetrics(start, end, f, s, f.copy())


def competitive_throughput(trace: "Trace", frame: Optional[Frame] = None) -> ThroughputRatio:
    """sum_v s_v(F) / sum_v f_v(F)"""
    fm = frame_metrics(trace, frame)
    return competitive_from_counts(fm.s_v, fm.f_v)


def simulation_throughput(trace: "Trace") -> SimulationThroughput:
    """Mean over nodes of receptions per unjammed round"""
    fm = frame_metrics(trace)
    result = simulation_throughput_from_counts(fm.s_v, fm.unjammed)
    if result.excluded:
        logger.debug(f"{len(result.excluded)} nodes had no unjammed round and are excluded")
    return result


def aggregate_probability(states, node_subset: Sequence[int]) -> float:
    """Sum of send probabilities over node_subset"""
    subset = list(node_subset)
    if not subset:
        raise ValueError("node subset must be non-empty")
    if isinstance(states, np.ndarray):
        return math.fsum(states[subset].tolist())
    if isinstance(states, dict):
        return math.fsum(np.asarray(states["p"])[subset].tolist())
    return math.fsum(states[v].p for v in subset)


def classify_sector(p_s: float) -> str:
    if p_s <= RHO_GREEN:
        return "green"
    if p_s <= RHO_YELLOW:
        return "yellow"
    if p_s <= RHO_RED:
        return "red"
    return "overloaded"


@dataclass
class SectorDiagnostics:
    node: int
    round: int
    p_sector: List[float]
    classes: List[str]
    members: List[List[int]]


def sector_of(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Sector 0 starts at angle 0; a node on a boundary goes to the lower index"""
    width = 2.0 * math.pi / SECTORS
    angle = np.mod(np.arctan2(dy, dx), 2.0 * math.pi)
    sector = np.ceil(angle / width).astype(np.int64) - 1
    return np.clip(sector, 0, SECTORS - 1)


def _record_p(trace: "Trace", round_index: int) -> np.ndarray:
    if not 0 <= round_index < len(trace.records):
        raise ValueError(f"round {round_index} is outside the trace")
    p = trace.records[round_index].p
    if p is None:
        raise ValueError("trace carries no send probabilities (not a SADE run)")
    return p


def sector_diagnostics(trace: "Trace", v: int, round_index: int) -> SectorDiagnostics:
    p = _record_p(trace, round_index)
    topo = trace.topology
    r1, _ = zone_radii(trace.config.physical)
    members = np.array(nodes_within(topo, trace.index, v, r1), dtype=np.int64)
    buckets: List[List[int]] = [[] for _ in range(SECTORS)]
    if members.size:
        dx, dy = torus_offsets(float(topo.xs[v]), float(topo.ys[v]), topo.xs[members], topo.ys[members],
                               topo.width, topo.height)
        for u, s in zip(members.tolist(), sector_of(dx, dy).tolist()):
            buckets[s].append(u)
    p_sector = [math.fsum(p[b].tolist()) if b else 0.0 for b in buckets]
    return SectorDiagnostics(
        node=v,
        round=round_index,
        p_sector=p_sector,
        classes=[classify_sector(x) for x in p_sector],
        members=buckets,
    )


@dataclass
class ZoneDiagnostics:
    node: int
    round: int
    p1: float
    p2: float
    zone3_interference: float


def zone_diagnostics(trace: "Trace", v: int, round_index: int) -> ZoneDiagnostics:
    """Aggregate probability in Zone 1 (incl. v) and Zone 2, and power from Zone-3 senders"""
    p = _record_p(trace, round_index)
    topo, phys = trace.topology, trace.config.physical
    r1, r2 = zone_radii(phys)
    d = torus_distances(float(topo.xs[v]), float(topo.ys[v]), topo.xs, topo.ys, topo.width, topo.height)
    zone1 = d <= r1
    zone2 = (d > r1) & (d <= r2)
    far_senders = (d > r2) & trace.records[round_index].actions
    return ZoneDiagnostics(
        node=v,
        round=round_index,
        p1=math.fsum(p[zone1].tolist()),
        p2=math.fsum(p[zone2].tolist()),
        zone3_interference=math.fsum((phys.power / d[far_senders] ** phys.alpha).tolist()),
    )


@dataclass(eq=False)
class OpenRoundStats:
    open_counts: np.ndarray
    non_busy_counts: np.ndarray


def transmission_adjacency(topo: Topology, index, r1: float) -> sparse.csr_matrix:
    rows, cols = [], []
    for v in range(topo.n):
        nbrs = nodes_within(topo, index, v, r1)
        rows.extend([v] * len(nbrs))
        cols.extend(nbrs)
    data = np.ones(len(rows), dtype=np.int64)
    return sparse.csr_matrix((data, (rows, cols)), shape=(topo.n, topo.n))


def open_rounds(trace: "Trace") -> OpenRoundStats:
    """Rounds in which v and at least one node of D1(v) are both not potentially busy"""
    r1, _ = zone_radii(trace.config.physical)
    adj = transmission_adjacency(trace.topology, trace.index, r1)
    n = trace.topology.n
    open_counts = np.zeros(n, dtype=np.int64)
    non_busy = np.zeros(n, dtype=np.int64)
    for rec in trace.records:
        free = ~rec.potentially_busy
        has_free_neighbour = adj.dot(free.astype(np.int64)) > 0
        open_counts += free & has_free_neighbour
        non_busy += free
    return OpenRoundStats(open_counts=open_counts, non_busy_counts=non_busy)


@dataclass(eq=False)
class WindowEstimateStats:
    max_T_est: np.ndarray
    bound: float
    within_bound: float
    idle_fraction: np.ndarray


def window_estimate_stats(trace: "Trace", frame: Optional[Frame] = None) -> WindowEstimateStats:
    """Largest T_v per node against sqrt(|F|), plus each node's share of idle steps"""
    start, end = _frame_bounds(trace, frame)
    records = trace.records[start:end]
    if not records or records[0].T_est is None:
        raise ValueError("window estimates need a non-empty SADE trace")
    T = np.stack([rec.T_est for rec in records])
    idle = np.stack([rec.observations == Observation.IDLE for rec in records])
    max_t = T.max(axis=0)
    bound = math.sqrt(end - start)
    return WindowEstimateStats(
        max_T_est=max_t,
        bound=bound,
        within_bound=float(np.mean(max_t <= bound)),
        idle_fraction=idle.mean(axis=0),
    )


def group_throughput(groups: Optional[np.ndarray], group_area: Optional[float],
                     successes: np.ndarray, unjammed: np.ndarray) -> List[GroupThroughput]:
    """Throughput per Het sub-square with its node density"""
    if groups is None or not group_area:
        raise ValueError("topology has no sub-square assignment")
    rows = []
    for group in np.unique(groups).tolist():
        members = np.flatnonzero(groups == group)
        result = simulation_throughput_from_counts(successes[members], unjammed[members])
        rows.append(GroupThroughput(
            group=group,
            nodes=int(members.size),
            density=members.size / group_area,
            throughput=result.value,
            excluded=len(result.excluded),
        ))
    return rows


def frames_to_csv(frames: Sequence[FrameMetrics]) -> str:
    output = io.StringIO()
    writer = csv.writer(output)
    writer.writerow(["frame", "node", "f_v", "s_v", "unjammed"])
    for k, fm in enumerate(frames):
        for v in range(fm.f_v.size):
            writer.writerow([k, v, int(fm.f_v[v]), int(fm.s_v[v]), int(fm.unjammed[v])])
    return output.getvalue()


def round_aggregates_to_csv(aggregate_p: np.ndarray, receptions: np.ndarray, idle_count: np.ndarray) -> str:
    output = io.StringIO()
    writer = csv.writer(output)
    writer.writerow(["round", "aggregate_p", "receptions", "idle_count"])
    for t in range(receptions.size):
        agg = "" if np.isnan(aggregate_p[t]) else repr(float(aggregate_p[t]))
        writer.writerow([t, agg, int(receptions[t]), int(idle_count[t])])
    return output.getvalue()


def groups_to_csv(rows: Sequence[GroupThroughput]) -> str:
    output = io.StringIO()
    writer = csv.writer(output)
    writer.writerow(["group", "nodes", "density", "throughput", "excluded"])
    for row in rows:
        writer.writerow([row.group, row.nodes, repr(row.density),
                         "" if row.throughput is None else repr(row.throughput), row.excluded])
    return output.getvalue()


def diagnostics_to_csv(trace: "Trace", round_index: Optional[int] = None) -> str:
    """
    Per-node analysis view of a SADE trace: Zone-1/Zone-2 aggregate
    probability, Zone-3 interference and the most loaded sector at one round,
    plus whole-run window estimates and open rounds
    """
    if round_index is None:
        round_index = len(trace.records) - 1
    windows = window_estimate_stats(trace)
    opened = open_rounds(trace)
    output = io.StringIO()
    writer = csv.writer(output)
    writer.writerow(["node", "round", "p1", "p2", "zone3_interference", "max_sector_p", "max_sector_class",
                     "max_T_est", "idle_fraction", "open_rounds", "non_busy_rounds"])
    for v in range(trace.topology.n):
        zones = zone_diagnostics(trace, v, round_index)
        sectors = sector_diagnostics(trace, v, round_index)
        worst = int(np.argmax(sectors.p_sector))
        writer.writerow([v, round_index, repr(zones.p1), repr(zones.p2), repr(zones.zone3_interference),
                         repr(sectors.p_sector[worst]), sectors.classes[worst], int(windows.max_T_est[v]),
                         repr(float(windows.idle_fraction[v])), int(opened.open_counts[v]),
                         int(opened.non_busy_counts[v])])
    return output.getvalue()
