#!/usr/bin/env python3
"""
Tests for node placement, torus geometry and the grid index
"""

import math

import numpy as np
import pytest

from sinr import PhysicalConfig
from topology import (
    GridIndex,
    Position,
    Topology,
    TopologySpec,
    build_topology,
    gen_het,
    gen_pair,
    gen_uniform,
    load_topology,
    nodes_within,
    save_topology,
    torus_distance,
    torus_distances,
    torus_offsets,
    zone_radii,
)


def test_torus_distance_wraps_both_axes():
    topo = Topology.from_positions([(0.5, 0.5), (24.5, 24.5)], 25, 25)
    assert torus_distance(topo.position(0), topo.position(1), topo) == pytest.approx(math.sqrt(2))
    same_row = Topology.from_positions([(0.5, 0.5), (24.5, 0.5)], 25, 25)
    assert torus_distance(same_row.position(0), same_row.position(1), same_row) == pytest.approx(1.0)


def test_torus_offsets_are_minimal_images():
    xs = np.array([24.0, 1.0, 12.0])
    ys = np.array([0.5, 24.5, 0.5])
    dx, dy = torus_offsets(0.5, 0.5, xs, ys, 25.0, 25.0)
    assert dx.tolist() == pytest.approx([-1.5, 0.5, 11.5])
    assert dy.tolist() == pytest.approx([0.0, -1.0, 0.0])
    d = torus_distances(0.5, 0.5, xs, ys, 25.0, 25.0)
    assert d.tolist() == pytest.approx(np.hypot(dx, dy).tolist())


def test_topology_rejects_bad_input():
    with pytest.raises(ValueError):
        Topology.from_positions([(1.0, 1.0), (1.0, 1.0)], 10, 10)
    with pytest.raises(ValueError):
        Topology.from_positions([(10.0, 1.0)], 10, 10)
    with pytest.raises(ValueError):
        Topology.from_positions([], 10, 10)
    with pytest.raises(ValueError):
        gen_uniform(0, 10, 10, np.random.default_rng(0))


def test_positions_are_read_only():
    topo = gen_uniform(20, 5, 5, np.random.default_rng(1))
    with pytest.raises(ValueError):
        topo.xs[0] = 1.0


def test_gen_uniform_is_seeded_and_in_bounds():
    a = gen_uniform(300, 25, 25, np.random.default_rng(7))
    b = gen_uniform(300, 25, 25, np.random.default_rng(7))
    assert a.n == 300
    assert np.array_equal(a.xs, b.xs) and np.array_equal(a.ys, b.ys)
    assert a.xs.min() >= 0 and a.xs.max() < 25
    assert len(set(zip(a.xs.tolist(), a.ys.tolist()))) == 300


def test_gen_het_groups_and_boxes():
    topo = gen_het(3, 5.0, 4, 30, np.random.default_rng(3))
    assert topo.width == topo.height == 15.0
    assert sum(topo.group_sizes.values()) == topo.n
    assert topo.group_area == 25.0
    for v in range(topo.n):
        row, col = divmod(int(topo.groups[v]), 3)
        assert col * 5.0 <= topo.xs[v] < (col + 1) * 5.0
        assert row * 5.0 <= topo.ys[v] < (row + 1) * 5.0
    assert all(4 <= c <= 30 for c in topo.group_sizes.values())


def test_gen_pair_places_two_nodes():
    topo = gen_pair(1.5, 25, 25)
    assert topo.n == 2
    assert torus_distance(topo.position(0), topo.position(1), topo) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        gen_pair(13.0, 25, 25)


def test_zone_radii_defaults():
    r1, r2 = zone_radii(PhysicalConfig())
    assert r1 == pytest.approx(4.0 ** (1.0 / 3.0))
    assert r2 == pytest.approx(3 * r1)


def test_zone_radii_factor_at_least_two():
    r1, r2 = zone_radii(PhysicalConfig(alpha=4.0))
    # sqrt(3) rounds up to 2
    assert r2 == pytest.approx(2 * r1)
    r1, r2 = zone_radii(PhysicalConfig(alpha=6.0, epsilon=0.5))
    assert r2 == pytest.approx(2 * r1)


def test_torus_distance_is_a_metric():
    rng = np.random.default_rng(17)
    topo = gen_uniform(60, 25.0, 18.0, rng)
    pts = topo.positions
    for _ in range(300):
        a, b, c = (pts[i] for i in rng.integers(0, topo.n, size=3))
        ab = torus_distance(a, b, topo)
        assert ab >= 0
        assert ab == torus_distance(b, a, topo)
        assert ab <= torus_distance(a, c, topo) + torus_distance(c, b, topo) + 1e-12
        # No pair is further apart than half the plane on each axis
        assert ab <= math.hypot(12.5, 9.0) + 1e-12
    assert all(torus_distance(p, p, topo) == 0.0 for p in pts)
    assert torus_distance(Position(0.0, 0.0), Position(12.5, 0.0), topo) == 12.5


def test_gen_uniform_mean_position_is_plane_centre():
    topo = gen_uniform(10_000, 25.0, 25.0, np.random.default_rng(23))
    assert abs(float(topo.xs.mean()) - 12.5) < 0.5
    assert abs(float(topo.ys.mean()) - 12.5) < 0.5


def test_gen_het_is_deterministic_per_seed():
    a = gen_het(5, 5.0, 20, 60, np.random.default_rng(8))
    b = gen_het(5, 5.0, 20, 60, np.random.default_rng(8))
    c = gen_het(5, 5.0, 20, 60, np.random.default_rng(9))
    assert np.array_equal(a.xs, b.xs) and np.array_equal(a.ys, b.ys)
    assert np.array_equal(a.groups, b.groups) and a.group_sizes == b.group_sizes
    assert a.n != c.n or not np.array_equal(a.xs, c.xs)


def test_zone_radii_are_monotone():
    base = PhysicalConfig()
    r1, r2 = zone_radii(base)
    for changed in (base.model_copy(update={"beta": 3.0}), base.model_copy(update={"theta": 2.0})):
        assert zone_radii(changed)[0] < r1
    assert zone_radii(base.model_copy(update={"power": 16.0}))[0] > r1
    for eps in (0.05, 0.2, 0.5, 0.9):
        for alpha in (2.5, 3.0, 4.0):
            s1, s2 = zone_radii(PhysicalConfig(alpha=alpha, epsilon=eps))
            assert s2 >= 2 * s1 > s1 > 0
    assert r2 > r1


def test_nodes_within_matches_brute_force():
    rng = np.random.default_rng(11)
    topo = gen_uniform(400, 20, 20, rng)
    index = GridIndex.build(topo, 1.6)
    for v in range(0, 400, 37):
        for r in (0.5, 1.6, 4.0, 15.0):
            d = torus_distances(float(topo.xs[v]), float(topo.ys[v]), topo.xs, topo.ys, 20, 20)
            expected = [u for u in range(400) if u != v and d[u] <= r]
            assert nodes_within(topo, index, v, r) == expected


def test_grid_index_cells_cover_plane_without_gaps():
    topo = gen_uniform(50, 25, 25, np.random.default_rng(0))
    index = GridIndex.build(topo, 1.5874)
    assert index.nx == 15
    assert index.cell_w >= 1.5874
    assert index.cell_w == pytest.approx(25 / 15)
    assert sum(len(b) for b in index.buckets.values()) == 50
    assert index.candidates(3.0, 3.0).tolist() == list(range(50))


def test_singleton_has_empty_neighbourhood():
    topo = Topology.from_positions([Position(2.0, 2.0)], 10, 10)
    index = GridIndex.build(topo, 1.0)
    assert nodes_within(topo, index, 0, 5.0) == []


def test_build_topology_kinds(tmp_path):
    rng = np.random.default_rng(0)
    topo, index = build_topology(TopologySpec(kind="pair"), rng, 1.5)
    assert topo.n == 2 and index.cell_size == 1.5

    path = tmp_path / "nodes.txt"
    save_topology(gen_uniform(25, 10, 10, np.random.default_rng(4)), path)
    loaded, _ = build_topology(TopologySpec(kind="file", path=str(path)), rng, 1.5)
    original = gen_uniform(25, 10, 10, np.random.default_rng(4))
    assert np.array_equal(loaded.xs, original.xs) and np.array_equal(loaded.ys, original.ys)


def test_load_topology_rejects_short_file(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("10 10 3\n1.0 1.0\n")
    with pytest.raises(ValueError):
        load_topology(path)


def test_topology_spec_validation():
    with pytest.raises(ValueError):
        TopologySpec(kind="file")
    with pytest.raises(ValueError):
        TopologySpec(lambda_min=50, lambda_max=10)
