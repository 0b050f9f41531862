"""Scenario files: one YAML document with named sections, defaults filled in,
unknown keys rejected and every constraint violation reported at once."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .drl import TrainingConfig, block_actions
from .iec61850 import SLICE_ORDER, ArrivalModel, SliceId, SliceProfile
from .slicing import RanaIndex, RilMode, RilPolicy, partition_rbs, ril_errors

SETUP_TAGS = ("beyond5g_plus", "default_5g", "baseline_rr", "baseline_greedy")
LEARNING_SETUPS = ("beyond5g_plus", "default_5g")
DEFAULT_SLICES_BY_KIND = {"IED": ["GOOSE", "MMS"], "SSC": ["GOOSE"], "MU": ["SV"]}


class ScenarioError(ValueError):
    def __init__(self, errors: list[str], phase: str):
        self.errors = errors
        self.phase = phase
        super().__init__(f"{len(errors)} {phase} error(s):\n" + "\n".join(f"  - {e}" for e in errors))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GnbSpec(_Section):
    id: str
    x: float
    y: float


class DeviceSpec(_Section):
    id: str
    kind: Literal["IED", "SSC", "MU"]
    x: float
    y: float
    serving_cell: str | None = None
    max_tx_power_dbm: float = 23.0
    slices: list[SliceId] | None = None


def _default_gnbs() -> list[GnbSpec]:
    return [GnbSpec(id=f"gNB{i + 1}", x=500.0 * i, y=0.0) for i in range(3)]


def _default_devices() -> list[DeviceSpec]:
    spots = [
        ("SSC1", "SSC", 80, 60), ("SSC2", "SSC", 920, -70),
        ("IED1", "IED", -120, 90), ("IED2", "IED", 180, -110), ("IED3", "IED", 420, 130),
        ("IED4", "IED", 620, -90), ("IED5", "IED", 1130, 100),
        ("MU1", "MU", 330, 70), ("MU2", "MU", 760, 110),
    ]
    return [DeviceSpec(id=i, kind=k, x=x, y=y) for i, k, x, y in spots]


class TopologySection(_Section):
    gnodebs: list[GnbSpec] = Field(default_factory=_default_gnbs)
    devices: list[DeviceSpec] = Field(default_factory=_default_devices)


class RadioSection(_Section):
    num_rbs: int = Field(25, gt=0)
    rb_bandwidth_hz: float = Field(180e3, gt=0)
    noise_dbm_per_hz: float = -174.0
    noise_figure_db: float = Field(7.0, ge=0)
    pathloss_a_db: float = 128.1
    pathloss_b_db: float = Field(37.6, gt=0)
    shadowing_sigma_db: float = Field(8.0, ge=0)
    coherence_slots: int = Field(10, gt=0)
    se_cap: float | None = Field(9.6, gt=0)
    min_power_dbm: float = -10.0
    max_power_bounds_dbm: tuple[float, float] = (-10.0, 30.0)
    rb_gain_offset_db: list[float] = Field(default_factory=list)


class ArrivalSpec(_Section):
    kind: Literal["periodic", "poisson", "event"]
    rate: float = Field(0.0, ge=0)


class SliceSpec(_Section):
    sst: Literal[1, 2, 3]
    latency_sla_ms: float = Field(gt=0)
    reliability_target: float = Field(gt=0, le=1)
    packet_bits: int = Field(gt=0)
    priority: int = Field(ge=0)
    arrival: ArrivalSpec
    enabled: bool = True


def _default_slices() -> dict[SliceId, SliceSpec]:
    return {
        SliceId.GOOSE: SliceSpec(sst=2, latency_sla_ms=0.3, reliability_target=1 - 1e-5, packet_bits=1096,
                                 priority=0, arrival=ArrivalSpec(kind="periodic", rate=1.0)),
        SliceId.SV: SliceSpec(sst=2, latency_sla_ms=0.5, reliability_target=1 - 1e-5, packet_bits=1120,
                              priority=1, arrival=ArrivalSpec(kind="periodic", rate=4000.0)),
        SliceId.MMS: SliceSpec(sst=3, latency_sla_ms=40.0, reliability_target=1 - 1e-3, packet_bits=8000,
                               priority=2, arrival=ArrivalSpec(kind="poisson", rate=10.0)),
    }


class FaultSection(_Section):
    enabled: bool = True
    protecting_ssc: str = "SSC1"
    commanding_ied: str = "IED2"
    fault_fraction: float = Field(0.2, ge=0, lt=1)
    restore_delay_ms: float = Field(50.0, ge=0)
    burst: int = Field(3, ge=0)


class RanaSection(_Section):
    delays_ms: dict[RanaIndex, float] = Field(
        default_factory=lambda: {RanaIndex.CENTRALIZED: 1.0, RanaIndex.HYBRID: 0.3, RanaIndex.DISTRIBUTED: 0.05}
    )


class RsfSection(_Section):
    numerology: int = Field(3, ge=0, le=4)
    puncturing_demand: int = Field(2, gt=0)


class RilSpec(_Section):
    mode: RilMode
    guaranteed: dict[SliceId, int]
    shareable: int | None = None


class SetupSpec(_Section):
    rana: RanaIndex
    ril: RilSpec
    puncturing: bool
    deadline_features: bool


def _default_setups() -> dict[str, SetupSpec]:
    return {
        "beyond5g_plus": SetupSpec(
            rana=RanaIndex.DISTRIBUTED,
            ril=RilSpec(mode=RilMode.HYBRID, guaranteed={SliceId.GOOSE: 4, SliceId.SV: 8, SliceId.MMS: 4}, shareable=9),
            puncturing=True, deadline_features=True,
        ),
        "default_5g": SetupSpec(
            rana=RanaIndex.CENTRALIZED,
            ril=RilSpec(mode=RilMode.DEDICATED, guaranteed={SliceId.GOOSE: 8, SliceId.SV: 8, SliceId.MMS: 9}),
            puncturing=False, deadline_features=False,
        ),
    }


class BaselineSection(_Section):
    profile: str = "default_5g"


class TrainingSection(_Section):
    gamma: float = 0.5
    gae_lambda: float = 0.95
    tau0: float = 5.0
    tau_min: float = 0.1
    decay_fraction: float = 0.6
    replay_capacity: int = 10_000
    batch_size: int = 64
    target_sync: int = 200
    beta: float = 0.5
    ac_period: int = 32
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    dqn_lr: float = 1e-3
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    entropy_coef: float = 1e-3
    reward_scale: float = 0.1
    action_sizes: list[int] = Field(default_factory=lambda: [1, 2, 4])


class RunSection(_Section):
    seed: int = 1
    episodes: int = Field(40, gt=0)
    slots_per_episode: int = Field(640, gt=0)
    drop_multiplier: float = Field(100.0, gt=0)


class OutputSection(_Section):
    dir: str = "runs"


class Scenario(_Section):
    topology: TopologySection = Field(default_factory=TopologySection)
    radio: RadioSection = Field(default_factory=RadioSection)
    slices: dict[SliceId, SliceSpec] = Field(default_factory=_default_slices)
    faults: FaultSection = Field(default_factory=FaultSection)
    rana: RanaSection = Field(default_factory=RanaSection)
    rsf: RsfSection = Field(default_factory=RsfSection)
    setups: dict[str, SetupSpec] = Field(default_factory=_default_setups)
    baselines: BaselineSection = Field(default_factory=BaselineSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    run: RunSection = Field(default_factory=RunSection)
    output: OutputSection = Field(default_factory=OutputSection)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario
    hash: str
    source: str | None = None

    @property
    def slot_duration(self) -> float:
        return 1e-3 / (2 ** self.scenario.rsf.numerology)


def canonical_json(scenario: Scenario) -> str:
    return json.dumps(scenario.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def scenario_hash(scenario: Scenario) -> str:
    return hashlib.sha256(canonical_json(scenario).encode("utf-8")).hexdigest()


def _loc(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def structural_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        msg = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
        out.append(f"{_loc(err['loc'])}: {msg}")
    return out


def semantic_errors(sc: Scenario) -> list[str]:
    errors: list[str] = []
    gnb_ids = [g.id for g in sc.topology.gnodebs]
    dev_ids = [d.id for d in sc.topology.devices]
    all_ids = gnb_ids + dev_ids
    for dup in sorted({i for i in all_ids if all_ids.count(i) > 1}):
        errors.append(f"topology: duplicate node id {dup!r}")
    if not gnb_ids:
        errors.append("topology.gnodebs: at least one gNodeB is required")
    lo, hi = sc.radio.max_power_bounds_dbm
    if lo > hi:
        errors.append("radio.max_power_bounds_dbm: lower bound exceeds upper bound")
    for i, d in enumerate(sc.topology.devices):
        path = f"topology.devices.{i}"
        if d.serving_cell is not None and d.serving_cell not in gnb_ids:
            errors.append(f"{path}.serving_cell: unknown gNodeB {d.serving_cell!r} for device {d.id!r}")
        if not lo <= d.max_tx_power_dbm <= hi:
            errors.append(f"{path}.max_tx_power_dbm: {d.max_tx_power_dbm} outside [{lo}, {hi}]")
        if d.max_tx_power_dbm <= sc.radio.min_power_dbm:
            errors.append(f"{path}.max_tx_power_dbm: must exceed radio.min_power_dbm")
    if sc.radio.rb_gain_offset_db and len(sc.radio.rb_gain_offset_db) != sc.radio.num_rbs:
        errors.append(f"radio.rb_gain_offset_db: needs {sc.radio.num_rbs} entries, got {len(sc.radio.rb_gain_offset_db)}")

    for s in SLICE_ORDER:
        if s not in sc.slices:
            errors.append(f"slices.{s.value}: missing slice profile")
    for s, spec in sc.slices.items():
        if spec.arrival.kind != "event" and not spec.arrival.rate > 0:
            errors.append(f"slices.{s.value}.arrival.rate: {spec.arrival.kind} arrivals need a positive rate")

    f = sc.faults
    if f.enabled:
        devs = {d.id: d for d in sc.topology.devices}
        for key in ("protecting_ssc", "commanding_ied"):
            ref = getattr(f, key)
            if ref not in devs:
                errors.append(f"faults.{key}: unknown device {ref!r}")
            else:
                d = devs[ref]
                flows = d.slices if d.slices is not None else DEFAULT_SLICES_BY_KIND[d.kind]
                if SliceId.GOOSE not in flows:
                    errors.append(f"faults.{key}: device {ref!r} carries no GOOSE flow")
        horizon_ms = sc.run.slots_per_episode * 1e3 / (2 ** sc.rsf.numerology)
        restore_ms = f.fault_fraction * horizon_ms + f.restore_delay_ms
        if restore_ms >= horizon_ms:
            errors.append(
                f"faults.restore_delay_ms: restore at {restore_ms:g} ms falls outside the "
                f"{horizon_ms:g} ms episode"
            )

    delays = sc.rana.delays_ms
    missing = [r.value for r in RanaIndex if r not in delays]
    if missing:
        errors.append(f"rana.delays_ms: missing entries {missing}")
    elif not delays[RanaIndex.CENTRALIZED] > delays[RanaIndex.HYBRID] > delays[RanaIndex.DISTRIBUTED] >= 0:
        errors.append("rana.delays_ms: need centralized > hybrid > distributed >= 0")

    t = sc.training
    try:
        TrainingConfig(**{**t.model_dump(), "hidden": tuple(t.hidden), "action_sizes": tuple(t.action_sizes)})
    except ValueError as exc:
        errors.extend(f"training: {m.strip()}" for m in str(exc).split(";"))

    for name in sc.setups:
        if name not in LEARNING_SETUPS:
            errors.append(f"setups.{name}: unknown setup tag (expected one of {list(LEARNING_SETUPS)})")
    for name in LEARNING_SETUPS:
        if name not in sc.setups:
            errors.append(f"setups.{name}: missing setup")
    for name, setup in sc.setups.items():
        path = f"setups.{name}.ril"
        policy = RilPolicy(setup.ril.mode, dict(setup.ril.guaranteed), setup.ril.shareable)
        ril_msgs = ril_errors(policy, sc.radio.num_rbs)
        errors.extend(f"{path}: {m}" for m in ril_msgs)
        if not ril_msgs:
            pools = partition_rbs(policy, sc.radio.num_rbs)
            for s, pool in pools.items():
                mask = [r in pool for r in range(sc.radio.num_rbs)]
                if not block_actions(mask, t.action_sizes):
                    errors.append(f"{path}: no RB block of sizes {t.action_sizes} fits the {s.value} pool")
    if sc.baselines.profile not in sc.setups:
        errors.append(f"baselines.profile: unknown setup {sc.baselines.profile!r}")
    return errors


def scenario_from_dict(data: dict[str, Any] | None, source: str | None = None) -> ScenarioConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ScenarioError(["<root>: scenario must be a mapping of sections"], "structural")
    try:
        sc = Scenario.model_validate(data)
    except ValidationError as exc:
        raise ScenarioError(structural_errors(exc), "structural") from None
    errors = semantic_errors(sc)
    if errors:
        raise ScenarioError(errors, "semantic")
    return ScenarioConfig(sc, scenario_hash(sc), source)


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")  # OSError propagates with the path
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError([f"<file>: not valid YAML ({exc})"], "structural") from None
    return scenario_from_dict(data, str(path))


def default_scenario_text() -> str:
    return resources.files("gridslice").joinpath("data/default_scenario.yaml").read_text(encoding="utf-8")


def default_scenario() -> ScenarioConfig:
    return scenario_from_dict(yaml.safe_load(default_scenario_text()), "<default>")


def with_overrides(cfg: ScenarioConfig, **sections: dict[str, Any]) -> ScenarioConfig:
    """Copy of ``cfg`` with some section fields replaced, revalidated."""
    data = cfg.scenario.model_dump(mode="json")
    for key, patch in sections.items():
        if isinstance(patch, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **patch}
        else:
            data[key] = patch
    return scenario_from_dict(data, cfg.source)


def slice_profiles(sc: Scenario) -> dict[SliceId, SliceProfile]:
    out = {}
    for s, spec in sc.slices.items():
        out[s] = SliceProfile(
            s, spec.sst, spec.latency_sla_ms * 1e-3, spec.reliability_target, spec.packet_bits,
            spec.priority, ArrivalModel(spec.arrival.kind, spec.arrival.rate),
        )
    return out


def training_config(sc: Scenario) -> TrainingConfig:
    t = sc.training.model_dump()
    return TrainingConfig(**{**t, "hidden": tuple(t["hidden"]), "action_sizes": tuple(t["action_sizes"])})


def setup_profile(sc: Scenario, tag: str) -> tuple[str, SetupSpec]:
    """(profile name, setup spec) a run tag executes under; baselines borrow a learning profile."""
    if tag not in SETUP_TAGS:
        raise KeyError(f"unknown setup {tag!r}; expected one of {list(SETUP_TAGS)}")
    name = tag if tag in LEARNING_SETUPS else sc.baselines.profile
    return name, sc.setups[name]


def setup_diff(cfg: ScenarioConfig, a: str, b: str) -> dict[str, tuple[Any, Any]]:
    """Resolved fields that differ between the run settings of setups ``a`` and ``b``."""
    sa = _resolved_setup(cfg.scenario, a)
    sb = _resolved_setup(cfg.scenario, b)
    return {k: (sa[k], sb[k]) for k in sorted(sa) if sa[k] != sb[k]}


def _resolved_setup(sc: Scenario, tag: str) -> dict[str, Any]:
    _, setup = setup_profile(sc, tag)
    policy = RilPolicy(setup.ril.mode, dict(setup.ril.guaranteed), setup.ril.shareable)
    pools = partition_rbs(policy, sc.radio.num_rbs)
    return {
        "rana": setup.rana.value,
        "ril": json.dumps(setup.ril.model_dump(mode="json"), sort_keys=True),
        "pools": {s.value: sorted(p) for s, p in pools.items()},
        "puncturing": setup.puncturing,
        "deadline_features": setup.deadline_features,
        "scheduler": "irss" if tag in LEARNING_SETUPS else tag,
    }
