#!/usr/bin/env python3
"""
Tests for the round loop, seeding, batches and trace files
"""

import csv

import numpy as np
import pytest

import engine
from adversary import AdversaryConfig, BudgetViolation, JammingStrategy, verify_aligned_windows
from engine import (
    SimConfig,
    batch_statistics,
    hash_records,
    read_trace_binary,
    rng_substream,
    run,
    run_batch,
    run_summary,
    trace_hash,
    write_trace_binary,
    write_trace_csv,
)
from sinr import AuditResult, ChannelModel, ChannelOutcome, Observation, audit_round
from topology import TopologySpec


def small_config(**kwargs) -> SimConfig:
    base = dict(
        topology=TopologySpec(n=60, width=8.0, height=8.0),
        rounds=200,
        seed=3,
    )
    base.update(kwargs)
    return SimConfig(**base)


def test_rng_substreams_are_reproducible_and_distinct():
    a = rng_substream(7, 3, "decision").random(5)
    b = rng_substream(7, 3, "decision").random(5)
    c = rng_substream(7, 4, "decision").random(5)
    d = rng_substream(7, 3, "jammer").random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    with pytest.raises(ValueError):
        rng_substream(7, 3, "weather")


def test_rng_substreams_uncorrelated():
    x = rng_substream(1, 0, "decision").random(100_000)
    y = rng_substream(1, 1, "decision").random(100_000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.01


def test_chunked_draws_equal_sequential_draws():
    chunk = rng_substream(5, 2, "decision").random(300)
    g = rng_substream(5, 2, "decision")
    assert np.array_equal(chunk, np.array([g.random() for _ in range(300)]))


def test_singleton_never_receives_and_pumps_to_cap():
    config = SimConfig(topology=TopologySpec(n=1, width=5.0, height=5.0),
                       adversary=AdversaryConfig(strategy="none"), rounds=100)
    trace = run(config)
    assert len(trace.records) == 100
    assert trace.summary.total_receptions == 0
    p = np.array([rec.p[0] for rec in trace.records])
    assert p.max() == config.p_hat
    assert trace.summary.idle_count.sum() > 80


def test_close_pair_receives_without_jamming():
    config = SimConfig(topology=TopologySpec(kind="pair", pair_distance=1.0),
                       adversary=AdversaryConfig(strategy="none"), rounds=3000, seed=1)
    trace = run(config)
    received = [int((rec.observations == Observation.RECEIVED).sum()) for rec in trace.records]
    assert sum(received) > 0
    senders = {int(s) for rec in trace.records for s in rec.senders if s >= 0}
    assert senders == {0, 1}


def test_same_seed_same_hash_and_different_seed_differs():
    first = run(small_config())
    second = run(small_config())
    third = run(small_config(seed=4))
    assert first.trace_hash == second.trace_hash
    assert first.trace_hash == trace_hash(first)
    assert first.trace_hash != third.trace_hash


def test_run_summary_matches_run():
    config = small_config()
    trace = run(config)
    summary = run_summary(config)
    assert summary.trace_hash == trace.trace_hash
    assert np.array_equal(summary.successes, trace.summary.successes)


def test_trace_invariants():
    trace = run(small_config(rounds=300))
    channel = ChannelModel(trace.topology, trace.config.physical)
    audit = AuditResult()
    for rec in trace.records:
        assert rec.actions.size == rec.observations.size == trace.topology.n
        # A transmitter never observes the channel
        assert np.all((rec.observations == Observation.SENT) == rec.actions)
        audit_round(channel, rec.actions, rec.observations, rec.senders, rec.noise, audit)
    assert audit.ok
    adv = trace.config.adversary
    assert verify_aligned_windows(trace.noise_matrix(), adv.budget, adv.window, exact=True)
    assert trace.summary.window_deficit < 1e-9


def test_default_uni_run_sheds_contention_quickly():
    summary = run_summary(SimConfig(rounds=500, seed=0))
    initial = summary.aggregate_p[0]
    assert initial == pytest.approx(500 / 24)
    assert summary.aggregate_p.min() < 0.25 * initial


def test_audited_run_is_clean_and_hash_unchanged():
    plain = run_summary(small_config())
    audited = run_summary(small_config(audit=True, audit_sliding=True,
                                       adversary=AdversaryConfig(strategy="bur")))
    assert plain.audit is None
    assert audited.audit.ok and audited.audit.channel.rounds == 200
    assert audited.audit.sliding_failures == 0
    bur_plain = run_summary(small_config(adversary=AdversaryConfig(strategy="bur")))
    assert audited.trace_hash == bur_plain.trace_hash


def test_audit_flags_a_bad_probability_step(monkeypatch):
    original = engine.SadePopulation.update

    def halving_update(self, observations, delivered):
        original(self, observations, delivered)
        self.p = self.p.copy()
        self.p[0] *= 0.5

    monkeypatch.setattr(engine.SadePopulation, "update", halving_update)
    audit = run_summary(small_config(rounds=50, audit=True)).audit
    assert audit.state_violations > 0
    assert not audit.ok


def test_audit_flags_a_wrong_idle_report(monkeypatch):
    original = ChannelModel.resolve

    def quiet_resolve(self, transmit, noise):
        outcome = original(self, transmit, noise)
        obs = outcome.observations.copy()
        obs[obs == Observation.BUSY] = Observation.IDLE
        return ChannelOutcome(observations=obs, senders=outcome.senders, total_power=outcome.total_power)

    monkeypatch.setattr(ChannelModel, "resolve", quiet_resolve)
    audit = run_summary(small_config(rounds=60, audit=True)).audit
    assert audit.channel.unsound_idle > 0


def test_adversary_sees_state_before_round():
    trace = run(small_config(rounds=5))
    assert np.all(trace.records[0].p == trace.config.p_hat)
    assert np.all(trace.records[0].T_est == 1)


def test_backoff_run_has_no_probabilities():
    trace = run(small_config(protocol="backoff"))
    assert trace.records[0].p is None
    assert np.isnan(trace.summary.aggregate_p).all()
    assert trace.summary.total_receptions > 0


def test_paired_protocols_share_topology_and_jamming():
    sade = run_summary(small_config())
    backoff = run_summary(small_config(protocol="backoff"))
    assert sade.noise_digest == backoff.noise_digest
    assert sade.topology_digest == backoff.topology_digest


def test_adaptive_jammer_needs_sade():
    with pytest.raises(ValueError):
        small_config(protocol="backoff", adversary=AdversaryConfig(strategy="adaptive"))
    trace = run(small_config(adversary=AdversaryConfig(strategy="adaptive")))
    assert verify_aligned_windows(trace.noise_matrix(), 2.0 / 3.0, 60)


class Overspender(JammingStrategy):
    def _propose(self, view, remaining):
        return np.full(view.n, 5.0)


def test_budget_violation_aborts_run(monkeypatch):
    monkeypatch.setattr(engine, "make_strategy", lambda cfg, rng: Overspender(cfg))
    with pytest.raises(BudgetViolation):
        run(small_config())


def test_batch_order_and_single_seed():
    config = small_config(rounds=100)
    batch = run_batch(config, [3, 5, 4], workers=1)
    assert [s.seed for s in batch] == [3, 5, 4]
    permuted = run_batch(config, [4, 3, 5], workers=1)
    assert sorted(s.trace_hash for s in batch) == sorted(s.trace_hash for s in permuted)
    single = run_batch(config, [3], workers=1)[0]
    assert single.trace_hash == run(config.model_copy(update={"seed": 3})).trace_hash
    with pytest.raises(ValueError):
        run_batch(config, [])


def test_batch_in_worker_pool_matches_serial():
    config = small_config(rounds=50)
    serial = run_batch(config, [1, 2], workers=1)
    pooled = run_batch(config, [1, 2], workers=2)
    assert [s.trace_hash for s in serial] == [s.trace_hash for s in pooled]


def test_batch_statistics():
    stats = batch_statistics(run_batch(small_config(rounds=100), [1, 2, 3], workers=1))
    assert stats.runs == 3
    assert 0.0 <= stats.mean_throughput <= 1.0
    assert stats.std_throughput >= 0.0


def test_trace_csv(tmp_path):
    trace = run(small_config(rounds=3))
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3 * trace.topology.n
    assert set(rows[0]) == {"round", "node", "action", "observation", "noise"}
    labels = {r["observation"].split(":")[0] for r in rows}
    assert labels <= {"idle", "busy", "received", "sent"}


def test_trace_binary_preserves_hash(tmp_path):
    trace = run(small_config(rounds=40))
    path = tmp_path / "trace.bin"
    write_trace_binary(trace, path)
    assert path.read_bytes()[:4] == b"SADT"
    records = read_trace_binary(path)
    assert hash_records(records) == trace.trace_hash
    assert all(np.array_equal(a.potentially_busy, b.potentially_busy) for a, b in zip(records, trace.records))

    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        read_trace_binary(path)
