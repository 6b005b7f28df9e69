"""
Node placement on a wrap-around plane, scenario generators and a grid index
for neighbour and interference queries
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

if TYPE_CHECKING:
    from sinr import PhysicalConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Position:
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class Topology:
    """Immutable node positions on a width x height torus, indexed by NodeId"""
    width: float
    height: float
    xs: np.ndarray
    ys: np.ndarray
    # Sub-square of every node for Het placements, None otherwise
    groups: Optional[np.ndarray] = None
    group_sizes: Optional[Dict[int, int]] = None
    group_area: Optional[float] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"Plane must have positive size, got {self.width}x{self.height}")
        xs = np.ascontiguousarray(self.xs, dtype=np.float64)
        ys = np.ascontiguousarray(self.ys, dtype=np.float64)
        if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 1:
            raise ValueError("Topology needs n >= 1 matching x and y coordinates")
        if np.any(xs < 0) or np.any(xs >= self.width) or np.any(ys < 0) or np.any(ys >= self.height):
            raise ValueError("Node positions must lie in [0,width) x [0,height)")
        if len(set(zip(xs.tolist(), ys.tolist()))) != xs.size:
            raise ValueError("No two nodes may share a position")
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        if self.groups is not None:
            groups = np.asarray(self.groups, dtype=np.int64).copy()
            groups.setflags(write=False)
            object.__setattr__(self, "groups", groups)

    @property
    def n(self) -> int:
        return int(self.xs.size)

    def position(self, v: int) -> Position:
        return Position(float(self.xs[v]), float(self.ys[v]))

    @property
    def positions(self) -> List[Position]:
        return [Position(x, y) for x, y in zip(self.xs.tolist(), self.ys.tolist())]

    @classmethod
    def from_positions(cls, positions, width: float, height: float) -> "Topology":
        pts = [(p.x, p.y) if isinstance(p, Position) else tuple(p) for p in positions]
        return cls(
            width=float(width),
            height=float(height),
            xs=np.array([p[0] for p in pts], dtype=np.float64),
            ys=np.array([p[1] for p in pts], dtype=np.float64),
        )


class TopologySpec(BaseModel):
    """Which scenario generator builds the node placement"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["uniform", "het", "pair", "file"] = Field("uniform", description="Placement scenario")
    n: int = Field(500, ge=1, description="Node count for uniform placement")
    width: float = Field(25.0, gt=0, description="Plane width in units")
    height: float = Field(25.0, gt=0, description="Plane height in units")
    grid_side: int = Field(5, ge=1, description="Het: sub-squares per side")
    sub_size: float = Field(5.0, gt=0, description="Het: side length of a sub-square")
    lambda_min: int = Field(20, ge=0, description="Het: minimum nodes per sub-square")
    lambda_max: int = Field(1000, ge=0, description="Het: maximum nodes per sub-square")
    pair_distance: Optional[float] = Field(None, gt=0, description="Pair: node distance, R1 when omitted")
    path: Optional[str] = Field(None, description="File: topology text file")
    cell_size: Optional[float] = Field(None, gt=0, description="Grid index cell size, R1 when omitted")

    @model_validator(mode="after")
    def check_kind_fields(self):
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min must not exceed lambda_max")
        if self.kind == "file" and not self.path:
            raise ValueError("topology kind 'file' needs a path")
        return self


def _draw_box(rng: np.random.Generator, count: int, x0: float, y0: float, w: float, h: float) -> Tuple[np.ndarray, np.ndarray]:
    xs = x0 + rng.random(count) * w
    ys = y0 + rng.random(count) * h
    # Rounding can land exactly on the upper edge
    xs = np.minimum(xs, np.nextafter(x0 + w, x0))
    ys = np.minimum(ys, np.nextafter(y0 + h, y0))
    return xs, ys


def _redraw_collisions(rng, xs, ys, boxes) -> None:
    """Re-draw later duplicates inside their own box until all positions differ"""
    seen = set()
    for i in range(xs.size):
        while (xs[i], ys[i]) in seen:
            x0, y0, w, h = boxes(i)
            nx, ny = _draw_box(rng, 1, x0, y0, w, h)
            xs[i], ys[i] = nx[0], ny[0]
        seen.add((xs[i], ys[i]))


def gen_uniform(n: int, width: float, height: float, rng: np.random.Generator) -> Topology:
    """Uni scenario: n nodes i.i.d. uniform on the plane"""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    xs, ys = _draw_box(rng, n, 0.0, 0.0, width, height)
    _redraw_collisions(rng, xs, ys, lambda i: (0.0, 0.0, width, height))
    return Topology(width=float(width), height=float(height), xs=xs, ys=ys)


def gen_het(
    grid_side: int,
    sub_size: float,
    lambda_min: int,
    lambda_max: int,
    rng: np.random.Generator,
) -> Topology:
    """
    Het scenario: grid_side x grid_side sub-squares, each with its own node
    count drawn uniformly from [lambda_min, lambda_max]
    """
    if grid_side < 1:
        raise ValueError(f"grid_side must be >= 1, got {grid_side}")
    if lambda_min > lambda_max:
        raise ValueError("lambda_min must not exceed lambda_max")

    chunks_x, chunks_y, chunks_g = [], [], []
    sizes: Dict[int, int] = {}
    for row in range(grid_side):
        for col in range(grid_side):
            cell = row * grid_side + col
            count = int(rng.integers(lambda_min, lambda_max + 1))
            sizes[cell] = count
            xs, ys = _draw_box(rng, count, col * sub_size, row * sub_size, sub_size, sub_size)
            chunks_x.append(xs)
            chunks_y.append(ys)
            chunks_g.append(np.full(count, cell, dtype=np.int64))

    xs = np.concatenate(chunks_x)
    ys = np.concatenate(chunks_y)
    groups = np.concatenate(chunks_g)
    if xs.size == 0:
        raise ValueError("Het placement produced no nodes; raise lambda_min")

    def box(i):
        cell = int(groups[i])
        row, col = divmod(cell, grid_side)
        return col * sub_size, row * sub_size, sub_size, sub_size

    _redraw_collisions(rng, xs, ys, box)
    side = grid_side * sub_size
    logger.debug(f"Het placement: {xs.size} nodes in {grid_side * grid_side} sub-squares")
    return Topology(
        width=side,
        height=side,
        xs=xs,
        ys=ys,
        groups=groups,
        group_sizes=sizes,
        group_area=sub_size * sub_size,
    )


def gen_pair(distance: float, width: float, height: float) -> Topology:
    if distance <= 0 or distance > min(width, height) / 2:
        raise ValueError(f"Pair distance {distance} does not fit a {width}x{height} torus")
    return Topology.from_positions([(0.0, 0.0), (distance, 0.0)], width, height)


def torus_distance(a: Position, b: Position, topo: Topology) -> float:
    dx = abs(a.x - b.x)
    dy = abs(a.y - b.y)
    dx = min(dx, topo.width - dx)
    dy = min(dy, topo.height - dy)
    return math.sqrt(dx * dx + dy * dy)


def torus_offsets(x: float, y: float, xs: np.ndarray, ys: np.ndarray, width: float, height: float) -> Tuple[np.ndarray, np.ndarray]:
    """Signed minimal-image displacement from (x, y) to every (xs, ys)"""
    dx = xs - x
    dy = ys - y
    dx = dx - width * np.round(dx / width)
    dy = dy - height * np.round(dy / height)
    return dx, dy


def torus_distances(x: float, y: float, xs: np.ndarray, ys: np.ndarray, width: float, height: float) -> np.ndarray:
    dx = np.abs(xs - x)
    dy = np.abs(ys - y)
    dx = np.minimum(dx, width - dx)
    dy = np.minimum(dy, height - dy)
    return np.sqrt(dx * dx + dy * dy)


@dataclass(frozen=True, eq=False)
class GridIndex:
    """
    Spatial hash of node ids by cell.

    The plane is split into floor(width / cell_size) columns and
    floor(height / cell_size) rows of equal size, so every cell is at least
    cell_size wide and query rings wrap around the torus without gaps. A cell
    is therefore width / floor(width / cell_size) wide (cell_w), which is
    cell_size only when cell_size divides the width.
    """
    cell_size: float
    nx: int
    ny: int
    cell_w: float
    cell_h: float
    buckets: Dict[Tuple[int, int], Tuple[int, ...]] = field(default_factory=dict)
    n: int = 0

    @classmethod
    def build(cls, topo: Topology, cell_size: float) -> "GridIndex":
        if cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {cell_size}")
        nx = max(1, int(topo.width // cell_size))
        ny = max(1, int(topo.height // cell_size))
        cell_w = topo.width / nx
        cell_h = topo.height / ny
        cx = np.minimum((topo.xs // cell_w).astype(np.int64), nx - 1)
        cy = np.minimum((topo.ys // cell_h).astype(np.int64), ny - 1)
        buckets: Dict[Tuple[int, int], List[int]] = {}
        for v, key in enumerate(zip(cx.tolist(), cy.tolist())):
            buckets.setdefault(key, []).append(v)
        return cls(
            cell_size=float(cell_size),
            nx=nx,
            ny=ny,
            cell_w=cell_w,
            cell_h=cell_h,
            buckets={k: tuple(ids) for k, ids in buckets.items()},
            n=topo.n,
        )

    def cell_of(self, x: float, y: float) -> Tuple[int, int]:
        return min(int(x // self.cell_w), self.nx - 1), min(int(y // self.cell_h), self.ny - 1)

    def candidates(self, x: float, y: float, radius: Optional[float] = None) -> np.ndarray:
        """Ascending ids of every node in a cell that may lie within radius of (x, y)"""
        if radius is None:
            return np.arange(self.n, dtype=np.int64)
        kx = math.ceil(radius / self.cell_w)
        ky = math.ceil(radius / self.cell_h)
        cx, cy = self.cell_of(x, y)
        cols = range(self.nx) if 2 * kx + 1 >= self.nx else sorted({(cx + d) % self.nx for d in range(-kx, kx + 1)})
        rows = range(self.ny) if 2 * ky + 1 >= self.ny else sorted({(cy + d) % self.ny for d in range(-ky, ky + 1)})
        found: List[int] = []
        for i in cols:
            for j in rows:
                found.extend(self.buckets.get((i, j), ()))
        return np.array(sorted(found), dtype=np.int64)


def nodes_within(topo: Topology, index: GridIndex, v: int, r: float) -> List[int]:
    """Nodes u != v with torus distance at most r, ascending"""
    if r < 0:
        raise ValueError(f"radius must be >= 0, got {r}")
    x, y = float(topo.xs[v]), float(topo.ys[v])
    cand = index.candidates(x, y, r)
    cand = cand[cand != v]
    if cand.size == 0:
        return []
    d = torus_distances(x, y, topo.xs[cand], topo.ys[cand], topo.width, topo.height)
    return cand[d <= r].tolist()


def zone_radii(phys: "PhysicalConfig") -> Tuple[float, float]:
    """Transmission range R1 and critical interference range R2"""
    if phys.alpha <= 2:
        raise ValueError(f"alpha must exceed 2, got {phys.alpha}")
    r1 = (phys.power / (phys.beta * phys.theta)) ** (1.0 / phys.alpha)
    c = max(2, math.ceil((1.0 / phys.epsilon) ** (1.0 / (phys.alpha - 2)) - 1e-9))
    return r1, c * r1


def build_topology(spec: TopologySpec, rng: np.random.Generator, r1: float) -> Tuple[Topology, GridIndex]:
    if spec.kind == "uniform":
        topo = gen_uniform(spec.n, spec.width, spec.height, rng)
    elif spec.kind == "het":
        topo = gen_het(spec.grid_side, spec.sub_size, spec.lambda_min, spec.lambda_max, rng)
    elif spec.kind == "pair":
        topo = gen_pair(spec.pair_distance or r1, spec.width, spec.height)
    else:
        topo = load_topology(spec.path)
    index = GridIndex.build(topo, spec.cell_size or r1)
    logger.debug(f"Built {spec.kind} topology: n={topo.n}, plane {topo.width}x{topo.height}, {index.nx}x{index.ny} cells")
    return topo, index


def save_topology(topo: Topology, path: Union[str, Path]) -> None:
    lines = [f"{topo.width!r} {topo.height!r} {topo.n}"]
    lines.extend(f"{x!r} {y!r}" for x, y in zip(topo.xs.tolist(), topo.ys.tolist()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_topology(path: Union[str, Path]) -> Topology:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows or len(rows[0]) != 3:
        raise ValueError(f"{path}: header must be 'width height n'")
    width, height, n = float(rows[0][0]), float(rows[0][1]), int(rows[0][2])
    body = rows[1:]
    if len(body) != n or any(len(r) != 2 for r in body):
        raise ValueError(f"{path}: expected {n} 'x y' lines, got {len(body)}")
    return Topology.from_positions([(float(a), float(b)) for a, b in body], width, height)
