import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leofl.constellation import (ContactPlan, GroundNode, NodeKind, SatelliteId, ShellSpec, VisibilityWindow,
                                 build_walker_delta)
from leofl.fl import TrainConfig, fedavg, generate_synthetic, partition, payload_bits, train_test_split
from leofl.protocol import (AlwaysVisible, EventKind, EventQueue, InboxEntry, ProtocolParams, ScenarioError,
                            Simulation, SubOrbitalModel, Termination, aggregate_round, build_ring,
                            dedup_orbit, effective_weights, fedavg_reference, propagate_global,
                            reverse_propagate, rounds_to_csv, run_training, uplink_duration)


def _hap(name, lon, lat=0.0):
    return GroundNode(name, lat, lon, 25e3, 10.0, NodeKind.HAP)


def _problem(shells, classes=3, n=480, seed=0, mode="iid"):
    const = build_walker_delta(shells)
    ds = generate_synthetic(classes, 5, n, 3.0, seed)
    train, test = train_test_split(ds, 0.25, seed)
    return const, partition(train, mode, const.ids, seed), test


# -- ring -----------------------------------------------------------------


def test_single_hap_ring_has_no_hops():
    ring = build_ring([_hap("a", 10.0)], 500e6)
    assert len(ring) == 1 and ring.source_index == ring.sink_index == 0
    assert propagate_global(ring, 1e6, 5.0) == {"a": 5.0}


def test_four_hap_ring_arithmetic():
    nodes = [_hap("b", 90.0), _hap("d", -90.0), _hap("a", 0.0), _hap("c", 180.0)]
    ring = build_ring(nodes, 500e6)
    assert ring.haps == ("d", "a", "b", "c")
    assert ring.haps[ring.source_index] == "b"
    assert ring.haps[ring.sink_index] == "d"
    assert ring.hops(ring.source_index, ring.sink_index) == 2
    times = propagate_global(ring, 1e8, 0.0)
    by_hops = sorted(ring.haps, key=lambda h: ring.hops(ring.source_index, ring.haps.index(h)))
    hop_counts = [ring.hops(ring.source_index, ring.haps.index(h)) for h in by_hops]
    for (h1, c1), (h2, c2) in zip(zip(by_hops, hop_counts), zip(by_hops[1:], hop_counts[1:])):
        if c2 > c1:
            assert times[h2] > times[h1]
    assert times["b"] == 0.0
    assert all(v == 0.0 for v in propagate_global(ring, 1e8, 0.0, instant=True).values())


def test_build_ring_requires_a_node():
    with pytest.raises(ScenarioError):
        build_ring([], 1.0)


# -- sub-orbital models, dedup and aggregation --------------------------------


def _model(sats, w, round_index=0):
    orbit = (sats[0].shell_index, sats[0].orbit_index)
    return SubOrbitalModel(np.asarray(w, float), frozenset(sats), orbit, round_index, len(sats))


def test_suborbital_model_invariants():
    with pytest.raises(ValueError):
        SubOrbitalModel(np.ones(1), frozenset(), (0, 0), 0, 0)
    with pytest.raises(ValueError):
        SubOrbitalModel(np.ones(1), frozenset({SatelliteId(0, 0, 0), SatelliteId(0, 1, 0)}), (0, 0), 0, 2)


def test_reverse_propagate_single_hap_identity():
    ring = build_ring([_hap("a", 0.0)], 500e6)
    m = _model([SatelliteId(0, 0, 0)], [1.5, -2.0])
    inbox = reverse_propagate(ring, {"a": [(m, 3.0), (m, 4.0)]}, lambda _: 1e6)
    assert [e.received_s for e in inbox] == [3.0, 4.0]
    assert inbox[0].model.weights is m.weights


def test_reverse_propagate_cardinality_and_exactness():
    ring = build_ring([_hap("a", 0.0), _hap("b", 120.0), _hap("c", -120.0)], 500e6)
    ms = [_model([SatelliteId(0, 0, i)], np.random.default_rng(i).standard_normal(4)) for i in range(5)]
    collected = {"a": [(ms[0], 1.0)], "b": [(ms[1], 2.0), (ms[2], 2.5)], "c": [(ms[3], 1.0), (ms[4], 9.0)]}
    inbox = reverse_propagate(ring, collected, lambda _: 1e6)
    assert len(inbox) == 5
    assert {e.model.weights.tobytes() for e in inbox} == {m.weights.tobytes() for m in ms}
    for e in inbox:
        if e.hap != "a":
            assert e.received_s > dict((id(m), t) for m, t in collected[e.hap])[id(e.model)]


def test_dedup_counts_duplicate_once_and_prefers_larger_sets():
    s = [SatelliteId(0, 0, i) for i in range(3)]
    single = _model([s[0]], [1.0])
    twice = [InboxEntry(single, "a", 1.0), InboxEntry(single, "b", 2.0)]
    kept = dedup_orbit(twice)
    assert len(kept) == 1 and kept[0].hap == "a"
    big = InboxEntry(_model([s[0], s[1]], [2.0]), "b", 5.0)
    kept = dedup_orbit(twice + [big, InboxEntry(_model([s[2]], [3.0]), "a", 0.5)])
    assert [sorted(e.model.contributors) for e in kept] == [[s[0], s[1]], [s[2]]]


def test_aggregate_two_orbits_equals_fedavg():
    rng = np.random.default_rng(3)
    sats = [SatelliteId(0, o, i) for o in range(2) for i in range(3)]
    sizes = {s: int(rng.integers(5, 50)) for s in sats}
    local = {s: rng.standard_normal(4) for s in sats}
    orbit_total = {o: sum(sizes[s] for s in sats if s.orbit_index == o) for o in range(2)}
    inbox = []
    # orbit 0 arrives as one chain, orbit 1 as a chain of two plus a single
    chain0 = sum(sizes[s] / orbit_total[0] * local[s] for s in sats[:3])
    inbox.append(InboxEntry(_model(sats[:3], chain0), "a", 1.0))
    part = sum(sizes[s] / orbit_total[1] * local[s] for s in sats[3:5])
    inbox.append(InboxEntry(_model(sats[3:5], part), "a", 2.0))
    lone = _model([sats[5]], sizes[sats[5]] / orbit_total[1] * local[sats[5]])
    inbox += [InboxEntry(lone, "a", 3.0), InboxEntry(lone, "b", 3.5)]
    res = aggregate_round(inbox, sizes, 0)
    assert not res.waited
    ref = fedavg([local[s] for s in sats], [sizes[s] for s in sats])
    assert np.max(np.abs(res.global_model - ref)) <= 1e-12
    eff = effective_weights(res.kept, sizes)
    for o in range(2):
        assert math.fsum(eff[s] for s in sats if s.orbit_index == o) == pytest.approx(1.0, abs=1e-12)


def test_aggregate_waits_for_missing_orbit():
    sats = [SatelliteId(0, o, 0) for o in range(2)]
    sizes = {s: 10 for s in sats}
    res = aggregate_round([InboxEntry(_model([sats[0]], [1.0]), "a", 1.0)], sizes, 0)
    assert res.waited and res.global_model is None and res.missing == {sats[1]}
    stale = InboxEntry(_model([sats[1]], [1.0], round_index=7), "a", 1.0)
    res = aggregate_round([InboxEntry(_model([sats[0]], [1.0]), "a", 1.0), stale], sizes, 0)
    assert res.waited


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), orbits=st.integers(1, 4), per=st.integers(1, 6))
def test_aggregation_of_random_chains_equals_fedavg(seed, orbits, per):
    rng = np.random.default_rng(seed)
    sats = [SatelliteId(0, o, i) for o in range(orbits) for i in range(per)]
    sizes = {s: int(rng.integers(1, 100)) for s in sats}
    local = {s: rng.standard_normal(3) for s in sats}
    inbox = []
    for o in range(orbits):
        members = [s for s in sats if s.orbit_index == o]
        total = sum(sizes[s] for s in members)
        cuts = sorted(set(rng.integers(1, per + 1, size=2).tolist()) | {per})
        start = 0
        for c in cuts:
            chunk = members[start:c]
            if chunk:
                w = sum(sizes[s] / total * local[s] for s in chunk)
                inbox.append(InboxEntry(_model(chunk, w), "a", float(rng.random())))
                # a duplicate copy of the same model from another node
                inbox.append(InboxEntry(_model(chunk, w), "b", float(rng.random()) + 1))
            start = c
    res = aggregate_round(inbox, sizes, 0)
    ref = fedavg([local[s] for s in sats], [sizes[s] for s in sats])
    assert np.max(np.abs(res.global_model - ref)) <= 1e-12


# -- engine pieces --------------------------------------------------------


def test_uplink_duration():
    bits = 528e6 * 8
    # 160 Mbps over 50 MHz is 3.2 bits/s/Hz
    assert uplink_duration(bits, 3.2, 50e6, 0.0) == pytest.approx(26.4, rel=5e-3)
    assert uplink_duration(0, 0.0, 50e6, 3e5) == pytest.approx(3e5 / 299792458.0)
    t1 = uplink_duration(1e6, 2.0, 1e6, 0.0)
    assert uplink_duration(1e6, 1.0, 1e6, 0.0) == pytest.approx(2 * t1)


def test_event_queue_order_and_causality():
    q = EventQueue()
    q.push(5.0, EventKind.UPLINK_DONE, (1,))
    q.push(1.0, EventKind.AGGREGATE_READY)
    q.push(5.0, EventKind.HAP_FORWARD, (0,))
    q.push(1.0, EventKind.ISL_HOP, (2,))
    got = [(e.at_s, e.kind) for e in (q.pop() for _ in range(4))]
    assert got == [(1.0, EventKind.ISL_HOP), (1.0, EventKind.AGGREGATE_READY),
                   (5.0, EventKind.HAP_FORWARD), (5.0, EventKind.UPLINK_DONE)]
    with pytest.raises(RuntimeError):
        q.push(1.0, EventKind.ISL_HOP)


# -- full runs ------------------------------------------------------------


def test_two_satellites_instant_links_match_fedavg():
    const, shards, test = _problem([ShellSpec(500e3, 70.0, 1, 2)])
    cfg = TrainConfig(lr=0.2, batch_size=16)
    sim = Simulation(const, [_hap("a", 0.0)], shards, 3, cfg, ProtocolParams(instant_links=True),
                     Termination(max_rounds=4), seed=5, test_set=test, contacts=AlwaysVisible())
    recs = run_training(sim)
    ref = fedavg_reference(shards, cfg, 3, 4, 5, np.zeros(18))
    assert len(recs) == 4
    for r, w in zip(recs, ref):
        assert np.max(np.abs(r.global_model - w)) <= 1e-12
        assert r.contributors_count == 2


def test_all_visible_each_satellite_uplinks_its_own_model():
    const, shards, test = _problem([ShellSpec(500e3, 70.0, 2, 3)])
    trace = []
    sim = Simulation(const, [_hap("a", 0.0)], shards, 3, TrainConfig(), ProtocolParams(),
                     Termination(max_rounds=1), seed=0, test_set=test, contacts=AlwaysVisible(), trace=trace)
    sim.run()
    ups = [e for e in trace if e["kind"] == "UplinkDone"]
    assert len(ups) == 6
    assert {e["bytes"] for e in ups} == {payload_bits(18, 1) // 8}
    assert not [e for e in trace if e["kind"] == "IslHop"]


def test_one_visible_of_ten_forms_a_full_chain():
    const, shards, test = _problem([ShellSpec(500e3, 70.0, 1, 10)], n=800)
    sats = const.ids
    plan = ContactPlan([VisibilityWindow(sats[0], "a", 0.0, 1e7)], 1e7)
    trace = []
    params = ProtocolParams(train_s_per_sample=0.01)
    cfg = TrainConfig(lr=0.1)
    sim = Simulation(const, [_hap("a", 0.0)], shards, 3, cfg, params, Termination(max_rounds=1), seed=2,
                     test_set=test, contacts=plan, trace=trace)
    rec = sim.run()[0]
    ups = [e for e in trace if e["kind"] == "UplinkDone"]
    assert len(ups) == 1 and ups[0]["src"] == str(sats[0])
    assert ups[0]["bytes"] == payload_bits(18, 10) // 8
    hops = [e for e in trace if e["kind"] == "IslHop"]
    # nine train-and-forward hops around the orbit plus the relay back to the visible satellite
    assert [h["dst"] for h in hops] == [str(s) for s in sats[1:]] + [str(sats[0])]
    train_total = sum(params.train_s_per_sample * len(shards[s]) for s in sats)
    assert rec.sim_time_s > train_total
    ref = fedavg_reference(shards, cfg, 3, 1, 2, np.zeros(18))[0]
    assert np.max(np.abs(rec.global_model - ref)) <= 1e-12


def test_zero_satellites_is_a_scenario_error():
    const = build_walker_delta([])
    with pytest.raises(ScenarioError):
        Simulation(const, [_hap("a", 0.0)], {}, 2, TrainConfig(), ProtocolParams(), Termination(), seed=0)


def test_unreachable_orbit_is_reported():
    const, shards, test = _problem([ShellSpec(500e3, 70.0, 2, 2)])
    plan = ContactPlan([VisibilityWindow(const.ids[0], "a", 0.0, 1e5)], 1e5)
    with pytest.raises(ScenarioError, match=r"orbit \(0, 1\)"):
        Simulation(const, [_hap("a", 0.0)], shards, 3, TrainConfig(), ProtocolParams(), Termination(),
                   seed=0, contacts=plan)


def test_real_geometry_matches_fedavg_and_is_deterministic():
    const, shards, test = _problem([ShellSpec(500e3, 70.0, 1, 4), ShellSpec(1000e3, 70.0, 1, 4)])
    nodes = [_hap("rolla", -91.77, 37.95), _hap("primorsky", 135.0, 45.0)]
    cfg = TrainConfig(lr=0.2)

    def run():
        sim = Simulation(const, nodes, shards, 3, cfg, ProtocolParams(), Termination(max_rounds=3,
                         max_sim_time_s=2 * 86400.0), seed=4, test_set=test)
        return sim.run()

    a, b = run(), run()
    assert rounds_to_csv(a) == rounds_to_csv(b)
    assert all(np.array_equal(x.global_model, y.global_model) for x, y in zip(a, b))
    ref = fedavg_reference(shards, cfg, 3, 3, 4, np.zeros(18))
    for r, w in zip(a, ref):
        assert np.max(np.abs(r.global_model - w)) <= 1e-12
        assert r.contributors_count == 8
    times = [r.sim_time_s for r in a]
    assert times == sorted(times) and times[0] > 0
    assert rounds_to_csv(a).splitlines()[0] == "round,sim_time_s,loss,accuracy,bytes_tx,contributors"
