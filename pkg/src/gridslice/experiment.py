"""Build a simulation from a scenario and setup tag, run it and persist the log."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .baselines import GreedyPolicy, RoundRobinPolicy
from .drl import IrssPolicy
from .engine import MemorySink, Simulation, SimulationSpec, Sink
from .iec61850 import SliceId, default_fault_script
from .metrics import MetricsLog
from .radio import DeviceKind, DeviceNode, Link, RadioConfig, Topology
from .scenario import (
    DEFAULT_SLICES_BY_KIND,
    LEARNING_SETUPS,
    ScenarioConfig,
    setup_profile,
    slice_profiles,
    training_config,
)
from .slicing import RanaConfig, RilPolicy, partition_rbs, resolve_rana


def radio_config(cfg: ScenarioConfig) -> RadioConfig:
    r = cfg.scenario.radio
    return RadioConfig(
        num_rbs=r.num_rbs, rb_bandwidth_hz=r.rb_bandwidth_hz, noise_dbm_per_hz=r.noise_dbm_per_hz,
        noise_figure_db=r.noise_figure_db, pathloss_a_db=r.pathloss_a_db, pathloss_b_db=r.pathloss_b_db,
        shadowing_sigma_db=r.shadowing_sigma_db, coherence_slots=r.coherence_slots, se_cap=r.se_cap,
        min_power_dbm=r.min_power_dbm, max_power_bounds_dbm=tuple(r.max_power_bounds_dbm),
        rb_gain_offset_db=tuple(r.rb_gain_offset_db),
    )


def build_topology(cfg: ScenarioConfig, radio: RadioConfig) -> tuple[Topology, list[Link]]:
    t = cfg.scenario.topology
    gnbs = [DeviceNode(g.id, DeviceKind.GNODEB, g.x, g.y) for g in t.gnodebs]
    devs = [DeviceNode(d.id, DeviceKind(d.kind), d.x, d.y, d.serving_cell, d.max_tx_power_dbm)
            for d in t.devices]
    topo = Topology(gnbs, devs, radio)
    links = []
    for spec in t.devices:
        dev = topo.device(spec.id)
        flows = spec.slices if spec.slices is not None else DEFAULT_SLICES_BY_KIND[spec.kind]
        for s in flows:
            s = SliceId(s)
            links.append(Link(f"{dev.id}.{s.value}", dev.id, dev.serving_cell, s))
    return topo, links


def build_spec(cfg: ScenarioConfig, setup: str, seed: int | None = None) -> SimulationSpec:
    sc = cfg.scenario
    _, profile = setup_profile(sc, setup)
    radio = radio_config(cfg)
    topo, links = build_topology(cfg, radio)
    delays = {k: v * 1e-3 for k, v in sc.rana.delays_ms.items()}
    fixed = resolve_rana(RanaConfig(profile.rana, delays))
    pools = partition_rbs(
        RilPolicy(profile.ril.mode, dict(profile.ril.guaranteed), profile.ril.shareable), radio.num_rbs
    )
    slot = cfg.slot_duration
    horizon = sc.run.slots_per_episode * slot
    f = sc.faults
    script = None
    if f.enabled:
        script = default_fault_script(horizon, f.protecting_ssc, f.commanding_ied, f.fault_fraction,
                                      f.restore_delay_ms * 1e-3, f.burst)
    return SimulationSpec(
        topology=topo, radio=radio, links=links, profiles=slice_profiles(sc), pools=pools,
        fixed_delay=fixed, slot_duration=slot, slots_per_episode=sc.run.slots_per_episode,
        episodes=sc.run.episodes, seed=sc.run.seed if seed is None else seed,
        enabled={s: spec.enabled for s, spec in sc.slices.items()}, fault_script=script,
        puncturing=profile.puncturing, puncture_demand=sc.rsf.puncturing_demand,
        drop_multiplier=sc.run.drop_multiplier,
    )


def make_policy(cfg: ScenarioConfig, setup: str, sim: Simulation):
    spec = sim.spec
    tcfg = training_config(cfg.scenario)
    if setup in LEARNING_SETUPS:
        _, profile = setup_profile(cfg.scenario, setup)
        return IrssPolicy(sim.env, spec.pools, spec.profiles, tcfg, spec.seed, profile.deadline_features)
    if setup == "baseline_rr":
        return RoundRobinPolicy(sim.env, spec.pools)
    return GreedyPolicy(sim.env, spec.pools, tcfg.action_sizes)


def simulate(cfg: ScenarioConfig, setup: str, seed: int | None = None, sink: Sink | None = None):
    """Run in memory; returns (simulation, policy, sink)."""
    sim = Simulation(build_spec(cfg, setup, seed))
    policy = make_policy(cfg, setup, sim)
    sink = sink if sink is not None else MemorySink()
    sim.run(policy, sink)
    return sim, policy, sink


@dataclass(frozen=True)
class RunResult:
    setup: str
    seed: int
    directory: Path
    content_hash: str


def run_experiment(cfg: ScenarioConfig, setup: str, out_dir: str | Path, seed: int | None = None) -> RunResult:
    """Execute one setup and persist its complete MetricsLog under ``out_dir``.

    A failure mid-run still closes the log, with status ``incomplete``.
    """
    sc = cfg.scenario
    spec = build_spec(cfg, setup, seed)
    profile_name, _ = setup_profile(sc, setup)
    run_info = {
        "scenario_hash": cfg.hash,
        "setup": setup,
        "profile": profile_name,
        "seed": spec.seed,
        "seed_override": seed is not None,
        "episodes": spec.episodes,
        "slots_per_episode": spec.slots_per_episode,
        "total_slots": spec.total_slots,
        "code_version": __version__,
    }
    log = MetricsLog(out_dir, run_info)
    sim = Simulation(spec)
    try:
        policy = make_policy(cfg, setup, sim)
        sim.run(policy, log)
    except BaseException as exc:
        log.close("incomplete", {"error": f"{type(exc).__name__}: {exc}"})
        raise
    digest = log.close("complete", {"messages_injected": sim.injected})
    return RunResult(setup, spec.seed, Path(out_dir), digest)


def _run_one(args) -> RunResult:
    cfg, setup, out_dir, seed = args
    return run_experiment(cfg, setup, out_dir, seed)


def run_replicates(
    cfg: ScenarioConfig, setups, seeds, out_root: str | Path, workers: int = 1
) -> dict[tuple[str, int], RunResult]:
    """Every (setup, seed) pair, each in its own log directory ``<out_root>/<setup>/seed<n>``."""
    root = Path(out_root)
    jobs = [(cfg, s, root / s / f"seed{n}", n) for s in setups for n in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    return {(r.setup, r.seed): r for r in results}
