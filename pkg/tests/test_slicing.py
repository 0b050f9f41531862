import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridslice.iec61850 import SLICE_ORDER, SliceId, default_profiles
from gridslice.slicing import (
    ConfigurationError,
    RanaConfig,
    RanaIndex,
    RilMode,
    RilPolicy,
    RsfConfig,
    RsmMonitor,
    RsmSample,
    Tile,
    default_tiles,
    partition_rbs,
    puncture,
    register_scheduling_function,
    resolve_rana,
    rsm_check,
    rsm_violation_rate,
    tile_errors,
    SCHEDULING_FUNCTIONS,
)

G, S, M = SliceId.GOOSE, SliceId.SV, SliceId.MMS
PROFILES = default_profiles()


def test_rana_defaults():
    assert resolve_rana(RanaConfig(RanaIndex.DISTRIBUTED)) == 0.05e-3
    assert resolve_rana(RanaConfig(RanaIndex.CENTRALIZED)) == 1.0e-3
    assert resolve_rana(RanaConfig("hybrid")) == 0.3e-3


def test_rana_ordering_enforced():
    with pytest.raises(ConfigurationError):
        RanaConfig(processing_delay={"centralized": 1e-3, "hybrid": 2e-3, "distributed": 0.0})
    with pytest.raises(ConfigurationError):
        RanaConfig(processing_delay={"centralized": 1e-3, "hybrid": 0.5e-3})


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1e-3), st.floats(1e-6, 1e-3), st.floats(1e-6, 1e-3))
def test_distributed_never_slower_than_centralized(s, dh, dc):
    delays = {"distributed": s, "hybrid": s + dh, "centralized": s + dh + dc}
    d = resolve_rana(RanaConfig("distributed", delays))
    c = resolve_rana(RanaConfig("centralized", delays))
    assert d < c


def test_dedicated_partition():
    parts = partition_rbs(RilPolicy("dedicated", {G: 8, S: 8, M: 9}), 25)
    assert [len(parts[s]) for s in SLICE_ORDER] == [8, 8, 9]
    assert not (parts[G] & parts[S] or parts[G] & parts[M] or parts[S] & parts[M])
    assert parts[G] | parts[S] | parts[M] == frozenset(range(25))


def test_shared_partition():
    parts = partition_rbs(RilPolicy("shared"), 25)
    assert all(parts[s] == frozenset(range(25)) for s in SLICE_ORDER)


def test_hybrid_partition():
    parts = partition_rbs(RilPolicy("hybrid", {G: 4, S: 8, M: 4}), 25)
    overflow = frozenset(range(16, 25))
    assert parts[G] == frozenset(range(4)) | overflow
    assert parts[S] == frozenset(range(4, 12)) | overflow
    assert parts[M] == frozenset(range(12, 16)) | overflow


def test_oversubscribed_dedicated_names_deficit():
    with pytest.raises(ConfigurationError) as err:
        partition_rbs(RilPolicy("dedicated", {G: 10, S: 10, M: 10}), 25)
    assert "deficit of 5 RBs" in str(err.value)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(3, 40))
def test_dedicated_pools_disjoint_property(a, b, c, n):
    policy = RilPolicy("dedicated", {G: a, S: b, M: c})
    if a + b + c > n:
        with pytest.raises(ConfigurationError):
            partition_rbs(policy, n)
        return
    parts = partition_rbs(policy, n)
    union = set()
    for s in SLICE_ORDER:
        assert not (union & parts[s])
        union |= parts[s]
    assert union <= set(range(n))


def test_numerology_slot_duration():
    assert RsfConfig(numerology=0).slot_duration == 1e-3
    assert RsfConfig(numerology=3).slot_duration == 0.125e-3
    with pytest.raises(ConfigurationError):
        RsfConfig(numerology=4)


def test_default_tiles_follow_pools():
    parts = partition_rbs(RilPolicy("dedicated", {G: 8, S: 8, M: 9}), 25)
    tiles = default_tiles(parts)
    assert {(t.slice_id, t.rb_start, t.rb_stop) for t in tiles} == {(G, 0, 8), (S, 8, 16), (M, 16, 25)}
    assert tile_errors(tiles, 25, 100, RilMode.DEDICATED) == []


def test_tile_overlap_only_outside_dedicated():
    tiles = [Tile(G, 0, 5), Tile(M, 4, 8)]
    assert tile_errors(tiles, 25, 10, RilMode.DEDICATED)
    assert tile_errors(tiles, 25, 10, RilMode.SHARED) == []
    assert tile_errors([Tile(G, 20, 26)], 25, 10, RilMode.SHARED)
    assert tile_errors([Tile(G, 0, 2, 5, 12)], 25, 10, RilMode.SHARED)
    assert not Tile(G, 0, 5, 0, 3).overlaps(Tile(M, 0, 5, 3, 6))


def test_scheduling_extension_point_is_empty_by_default():
    assert "noop" not in SCHEDULING_FUNCTIONS
    register_scheduling_function("noop")(lambda *a: None)
    with pytest.raises(ValueError):
        register_scheduling_function("noop")(lambda *a: None)
    del SCHEDULING_FUNCTIONS["noop"]


PRI = {"g1": 0, "g2": 0, "sv": 1, "mms": 2}


def test_urgent_goose_takes_demand_from_mms():
    res = puncture({"mms": {0, 1, 2, 3, 4}, "g1": set()}, ["g1"], PRI, demand=2)
    assert len(res.schedule["g1"]) == 2
    assert len(res.schedule["mms"]) == 3
    assert res.schedule["g1"] <= {0, 1, 2, 3, 4}
    assert not res.schedule["g1"] & res.schedule["mms"]
    assert len(res.events) == 2 and all(e.from_link == "mms" and e.to_link == "g1" for e in res.events)
    assert res.starved == []


def test_lowest_priority_preempted_first():
    res = puncture({"mms": {0, 1}, "sv": {2, 3}, "g1": set()}, ["g1"], PRI, demand=2)
    assert res.schedule["g1"] == {0, 1}
    assert res.schedule["sv"] == {2, 3}
    assert res.preempted == ["mms"]


def test_no_urgent_is_identity():
    sched = {"mms": frozenset({0, 1}), "sv": frozenset({2})}
    res = puncture(sched, [], PRI)
    assert res.schedule == sched and res.events == [] and res.starved == []


def test_two_urgent_one_preemptible_rb():
    res = puncture({"mms": {7}, "g1": set(), "g2": set()}, ["g1", "g2"], PRI, demand=2)
    served = [u for u in ("g1", "g2") if res.schedule[u]]
    assert served == ["g1"]
    assert res.starved == ["g2"]


def test_admissible_set_restricts_takeover():
    res = puncture({"mms": {0, 9}, "g1": set()}, ["g1"], PRI, demand=2, admissible={"g1": {0, 1, 2}})
    assert res.schedule["g1"] == {0}
    assert res.schedule["mms"] == {9}


def test_shared_rb_coholder_evicted():
    res = puncture({"g1": {3}, "mms": {3, 4}}, ["g1"], PRI, demand=1)
    assert res.schedule["g1"] == {3} and res.schedule["mms"] == {4}


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.tuples(st.sampled_from(list(PRI)), st.integers(0, 11)), max_size=30),
    st.lists(st.sampled_from(["g1", "g2"]), unique=True, max_size=2),
    st.integers(1, 4),
)
def test_puncture_priority_property(grants, urgent, demand):
    sched: dict[str, set[int]] = {k: set() for k in PRI}
    for link, rb in grants:
        sched[link].add(rb)
    res = puncture(sched, urgent, PRI, demand=demand)
    total_before = set().union(*sched.values())
    total_after = set().union(*res.schedule.values())
    assert total_after == total_before
    for u in urgent:
        own = res.schedule[u]
        # urgent RBs are not shared with lower priority links
        for k, v in res.schedule.items():
            if PRI[k] > PRI[u]:
                assert not own & v
        if len(own) < demand:
            # nothing left that only lower-priority links hold
            for rb in total_after - own:
                holders = [k for k, v in res.schedule.items() if rb in v]
                assert any(PRI[h] <= PRI[u] for h in holders)


def test_rsm_check_examples():
    assert rsm_check(0.4e-3, PROFILES[G])
    assert not rsm_check(39e-3, PROFILES[M])
    assert not rsm_check(0.3e-3, PROFILES[G])
    assert rsm_check(math.inf, PROFILES[M])
    with pytest.raises(ValueError):
        rsm_check(math.nan, PROFILES[G])


def _samples(slice_id, n, bad):
    return [RsmSample(i, slice_id, 1.0 if i < bad else 0.0, i < bad) for i in range(n)]


def test_violation_rate_examples():
    assert rsm_violation_rate(_samples(G, 100, 0), (0, 100))[G].violation_rate == 0.0
    assert rsm_violation_rate(_samples(S, 50, 5), (0, 50))[S].violation_rate == 0.1
    empty = rsm_violation_rate([], (0, 10))[M]
    assert empty.violation_rate == 0.0 and empty.no_data
    with pytest.raises(ValueError):
        rsm_violation_rate([], (5, 5))


def test_windowed_rates_match_recount():
    rng = np.random.default_rng(7)
    mon = RsmMonitor(PROFILES)
    for slot in range(400):
        for _ in range(rng.integers(0, 3)):
            s = SLICE_ORDER[rng.integers(0, 3)]
            mon.record(slot, s, float(rng.exponential(PROFILES[s].latency_sla)))
    total = 0
    for start in range(0, 400, 50):
        recs = rsm_violation_rate(mon.samples, (start, start + 50))
        for s in SLICE_ORDER:
            brute = [x for x in mon.samples if start <= x.slot < start + 50 and x.slice_id == s]
            assert len(recs[s].samples) == len(brute)
            assert recs[s].violations == sum(x.latency > PROFILES[s].latency_sla for x in brute)
            total += len(recs[s].samples)
    assert total == len(mon.samples)


def test_monitor_is_append_only_in_slot_order():
    mon = RsmMonitor(PROFILES)
    mon.record(5, G, 1e-4)
    with pytest.raises(ValueError):
        mon.record(4, G, 1e-4)
