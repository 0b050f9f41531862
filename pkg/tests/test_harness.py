import csv
import json
import math
from collections import Counter
from itertools import product

import numpy as np
import pytest

from gridslice.baselines import GreedyPolicy, RoundRobinPolicy
from gridslice.engine import MemorySink, Simulation, SimulationSpec
from gridslice.experiment import run_experiment, simulate
from gridslice.iec61850 import SLICE_ORDER, ArrivalModel, SliceId, SliceProfile, default_profiles
from gridslice.metrics import (
    IncompleteLogError,
    LogIOError,
    MetricsLog,
    compare_runs,
    export_log,
    export_summary,
    import_summary,
    nearest_rank,
    read_log,
    summarize,
    summarize_records,
    window_bounds,
)
from gridslice.radio import DeviceKind, DeviceNode, Link, RadioConfig, Topology, dbm_to_w
from gridslice.scenario import default_scenario, with_overrides
from gridslice.slicing import RsmSample


def small_cfg(**over):
    sections = dict(
        run={"episodes": 1, "slots_per_episode": 200},
        faults={"fault_fraction": 0.1, "restore_delay_ms": 5.0},
        training={"hidden": [16], "batch_size": 16},
    )
    sections.update(over)
    return with_overrides(default_scenario(), **sections)


# baselines ---------------------------------------------------------------------


def saturated_spec(num_mus=3, slots=120, offsets=()):
    radio = RadioConfig(num_rbs=7, shadowing_sigma_db=3.0, rb_gain_offset_db=offsets)
    gnb = DeviceNode("G1", DeviceKind.GNODEB, 0.0, 0.0)
    mus = [DeviceNode(f"MU{i}", DeviceKind.MU, 100.0 + 150 * i, 20.0 * i) for i in range(num_mus)]
    topo = Topology([gnb], mus, radio)
    profiles = default_profiles()
    profiles[SliceId.SV] = SliceProfile(SliceId.SV, 2, 5e-4, 0.99, 10_000_000, 1, ArrivalModel("periodic", 4000.0))
    pools = {s: frozenset(range(7)) for s in SLICE_ORDER}
    return SimulationSpec(
        topology=topo, radio=radio, links=[Link(f"MU{i}.SV", f"MU{i}", "G1", SliceId.SV) for i in range(num_mus)],
        profiles=profiles, pools=pools, fixed_delay=0.0, slot_duration=0.125e-3,
        slots_per_episode=slots, episodes=1, seed=4,
    )


def test_round_robin_rotation_counts():
    spec = saturated_spec()
    sim = Simulation(spec)
    sink = MemorySink()
    sim.run(RoundRobinPolicy(sim.env, spec.pools), sink)
    steps = [s for s in sink.link_steps if s.slot >= 1]  # all links active from slot 1 on
    counts = Counter()
    for s in steps:
        counts[s.link_id] += len(s.rbs)
    assert len(counts) == 3
    one_grant = math.ceil(7 / 3)
    assert max(counts.values()) - min(counts.values()) <= one_grant
    per_slot = {}
    for s in steps:
        per_slot.setdefault(s.slot, set()).update(s.rbs)
        assert s.tx_power_dbm == 23.0
    assert all(v == set(range(7)) for v in per_slot.values())


def brute_best_blocks(env, link_id, channel, sizes):
    link = env.links[link_id]
    g = channel.g(link.device_id, link.cell_id)
    p = dbm_to_w(23.0)
    n = env.config.num_rbs
    offsets = env.config.rb_gain_offset_db or [0.0] * n
    best, rate_of = -1.0, {}
    for size, start in product(sizes, range(n)):
        if start + size > n:
            continue
        block = tuple(range(start, start + size))
        rate = sum(
            env.config.rb_bandwidth_hz * min(math.log2(1 + p * g * 10 ** (offsets[r] / 10) / env.noise_w), 9.6)
            for r in block
        )
        rate_of[block] = rate
        best = max(best, rate)
    return best, rate_of


def test_greedy_matches_exhaustive_argmax():
    rng = np.random.default_rng(0)
    offsets = tuple(float(x) for x in rng.uniform(-30, 0, size=7))
    spec = saturated_spec(num_mus=2, slots=40, offsets=offsets)
    sim = Simulation(spec)
    sink = MemorySink()
    policy = GreedyPolicy(sim.env, spec.pools, (1, 2, 4))
    sim.run(policy, sink)
    assert sink.link_steps
    for s in sink.link_steps:
        channel = sim.env.channel(s.epoch)
        best, rate_of = brute_best_blocks(sim.env, s.link_id, channel, (1, 2, 4))
        assert rate_of[s.rbs] == pytest.approx(best, rel=1e-12)
        assert s.tx_power_dbm == 23.0


# engine --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def b5g_run():
    cfg = small_cfg()
    return cfg, simulate(cfg, "beyond5g_plus")


def test_every_injected_message_logged_once(b5g_run):
    _, (sim, _, sink) = b5g_run
    ids = [m.message_id for m in sink.messages]
    assert len(ids) == len(set(ids)) == sim.injected
    assert {m.outcome for m in sink.messages} <= {"delivered", "dropped", "horizon"}


def test_fault_bursts_reach_the_log(b5g_run):
    _, (_, _, sink) = b5g_run
    burst = [m for m in sink.messages if "#f" in m.message_id]
    assert len(burst) == 6 and all(m.slice_id is SliceId.GOOSE for m in burst)


def test_rsm_conservation(b5g_run):
    _, (sim, _, sink) = b5g_run
    counted = [m for m in sink.messages if m.counted]
    assert len(sim.rsm.samples) == len(counted)
    by_slice = Counter(s.slice_id for s in sim.rsm.samples)
    assert sum(by_slice.values()) == len(counted)


def test_puncturing_logged_and_respects_priority(b5g_run):
    _, (sim, _, sink) = b5g_run
    for p in sink.punctures:
        src, dst = sim.env.links[p.from_link], sim.env.links[p.to_link]
        assert sim.spec.profiles[src.slice_id].priority > sim.spec.profiles[dst.slice_id].priority


def test_dedicated_mode_never_crosses_pools():
    cfg = small_cfg()
    sim, _, sink = simulate(cfg, "default_5g")
    pools = sim.spec.pools
    for s in sink.link_steps:
        assert set(s.rbs) <= pools[s.slice_id]


# persisted logs -------------------------------------------------------------------


def test_same_seed_same_content_hash(tmp_path):
    cfg = small_cfg()
    a = run_experiment(cfg, "beyond5g_plus", tmp_path / "a")
    b = run_experiment(cfg, "beyond5g_plus", tmp_path / "b")
    assert a.content_hash == b.content_hash
    c = run_experiment(cfg, "beyond5g_plus", tmp_path / "c", seed=7)
    assert c.content_hash != a.content_hash
    man = read_log(tmp_path / "a").manifest
    assert man["status"] == "complete" and man["run"]["scenario_hash"] == cfg.hash
    assert man["messages_injected"] == man["record_counts"]["messages"]


def test_failed_run_marked_incomplete(tmp_path, monkeypatch):
    cfg = small_cfg()

    def boom(self, state, allocs):
        raise RuntimeError("radio exploded")

    from gridslice import radio
    monkeypatch.setattr(radio.RadioEnv, "step", boom)
    with pytest.raises(RuntimeError):
        run_experiment(cfg, "baseline_rr", tmp_path / "x")
    log = read_log(tmp_path / "x")
    assert log.status == "incomplete" and "radio exploded" in log.manifest["error"]
    with pytest.raises(IncompleteLogError):
        summarize(log)


def test_log_rejects_out_of_order_records(tmp_path):
    log = MetricsLog(tmp_path / "l", {"total_slots": 10})
    from gridslice.engine import PunctureRecord
    log.puncture(PunctureRecord(5, "G", 1, "a", "b"))
    with pytest.raises(ValueError):
        log.puncture(PunctureRecord(4, "G", 1, "a", "b"))
    log.close()


def test_unwritable_log_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(LogIOError) as err:
        MetricsLog(blocker / "sub", {})
    assert str(blocker) in str(err.value)


# summaries --------------------------------------------------------------------------


def test_nearest_rank_and_windows():
    assert nearest_rank([1.0, 2.0, 3.0, 4.0], 50) == 2.0
    assert nearest_rank([1.0, 2.0, 3.0, 4.0], 95) == 4.0
    assert math.isnan(nearest_rank([], 50))
    assert window_bounds(10, 3) == [(0, 3), (3, 7), (7, 10)]


def test_constant_latency_percentiles():
    samples = [RsmSample(t, SliceId.SV, 4e-4, False) for t in range(100)]
    s = summarize_records(samples, [], 100, 4)
    for w in range(4):
        assert s.p50["SV"][w] == s.p95["SV"][w] == s.p99["SV"][w] == 4e-4


def test_binomial_violation_rate_per_window():
    rng = np.random.default_rng(8)
    n_slots, per_slot = 1000, 5
    samples = []
    for t in range(n_slots):
        for _ in range(per_slot):
            bad = rng.random() < 0.1
            samples.append(RsmSample(t, SliceId.GOOSE, 1e-3 if bad else 1e-4, bad))
    s = summarize_records(samples, [], n_slots, 10)
    per_window = n_slots // 10 * per_slot
    se = math.sqrt(0.1 * 0.9 / per_window)
    for w in range(10):
        assert abs(s.violation_rate("GOOSE", w) - 0.1) < 3 * se


def test_percentiles_ordered_on_random_logs():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        samples = sorted(
            (RsmSample(int(rng.integers(0, 20)), SLICE_ORDER[rng.integers(0, 3)], float(rng.exponential(1e-3)), False)
             for _ in range(n)),
            key=lambda r: r.slot,
        )
        s = summarize_records(samples, [], 20, 4)
        for k in s.p50:
            for a, b, c in zip(s.p50[k], s.p95[k], s.p99[k]):
                if not math.isnan(a):
                    assert a <= b <= c


def test_compare_identical_and_mismatched(tmp_path):
    cfg = small_cfg()
    run_experiment(cfg, "baseline_rr", tmp_path / "rr")
    s = summarize(tmp_path / "rr", 4)
    rep = compare_runs(s, s)
    assert all(c.p50_delta == 0 and c.violation_delta == 0 for c in rep.slices.values())
    assert all(c.latency_winner == "tie" for c in rep.slices.values())
    other = summarize(tmp_path / "rr", 4)
    other.scenario_hash = "0" * 64
    with pytest.raises(ValueError):
        compare_runs(s, other)


def test_summary_and_log_export_round_trip(tmp_path):
    cfg = small_cfg()
    run_experiment(cfg, "beyond5g_plus", tmp_path / "run")
    summary = summarize(tmp_path / "run", 5)
    for fmt in ("json", "csv"):
        path = tmp_path / f"summary.{fmt}"
        export_summary(summary, fmt, path)
        assert import_summary(path) == summary
    written = export_log(tmp_path / "run", "csv", tmp_path / "out" / "messages.csv")
    with open(written[0], newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == read_log(tmp_path / "run").manifest["record_counts"]["messages"] + 1
    assert written[1].name == "messages_windows.csv"
    (doc_path,) = export_log(tmp_path / "run", "json", tmp_path / "log.json")
    doc = json.loads(doc_path.read_text())
    assert doc["schema_version"] == 1
    assert len(doc["streams"]["link_steps"]) == doc["manifest"]["record_counts"]["link_steps"]
    with pytest.raises(ValueError):
        export_log(tmp_path / "run", "xml", tmp_path / "log.xml")
