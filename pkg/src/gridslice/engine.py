"""Slot loop tying traffic, the slicing controls, a scheduler and the radio together."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from .drl import LearningRecord, SlotView
from .iec61850 import (
    SLICE_ORDER,
    ArrivalModel,
    FaultScript,
    Message,
    SliceId,
    SliceProfile,
    apply_fault_script,
    generate_traffic,
)
from .radio import Delivery, Link, LinkAllocation, RadioConfig, RadioEnv, StepMetrics, Topology
from .rng import stream
from .slicing import RsmMonitor, puncture, rsm_check


class Policy(Protocol):
    name: str

    def act(self, view: SlotView) -> dict[str, LinkAllocation]: ...

    def feedback(self, view: SlotView, metrics: Sequence[StepMetrics]) -> list[LearningRecord]: ...

    def end_episode(self) -> None: ...


@dataclass(frozen=True)
class MessageRecord:
    message_id: str
    link_id: str
    slice_id: SliceId
    episode: int
    created_at: float
    outcome: str
    slot: int
    finished_at: float
    queueing_s: float
    serialization_s: float
    latency_s: float
    violated: bool
    counted: bool


@dataclass(frozen=True)
class LinkStepRecord:
    slot: int
    episode: int
    epoch: int
    link_id: str
    slice_id: SliceId
    rbs: tuple[int, ...]
    tx_power_dbm: float
    sinr_db: float
    throughput_bps: float
    delivered: int
    latency_s: float  # worst latency among messages completed this slot, nan if none
    violated: bool


@dataclass(frozen=True)
class PunctureRecord:
    slot: int
    cell_id: str
    rb: int
    from_link: str
    to_link: str


class Sink(Protocol):
    def message(self, rec: MessageRecord) -> None: ...

    def link_step(self, rec: LinkStepRecord) -> None: ...

    def learning(self, rec: LearningRecord) -> None: ...

    def puncture(self, rec: PunctureRecord) -> None: ...


@dataclass
class MemorySink:
    messages: list[MessageRecord] = field(default_factory=list)
    link_steps: list[LinkStepRecord] = field(default_factory=list)
    learning_records: list[LearningRecord] = field(default_factory=list)
    punctures: list[PunctureRecord] = field(default_factory=list)

    def message(self, rec: MessageRecord) -> None:
        self.messages.append(rec)

    def link_step(self, rec: LinkStepRecord) -> None:
        self.link_steps.append(rec)

    def learning(self, rec: LearningRecord) -> None:
        self.learning_records.append(rec)

    def puncture(self, rec: PunctureRecord) -> None:
        self.punctures.append(rec)


@dataclass
class SimulationSpec:
    topology: Topology
    radio: RadioConfig
    links: list[Link]
    profiles: Mapping[SliceId, SliceProfile]
    pools: Mapping[SliceId, frozenset[int]]
    fixed_delay: float
    slot_duration: float
    slots_per_episode: int
    episodes: int
    seed: int
    enabled: Mapping[SliceId, bool] = field(default_factory=dict)
    fault_script: FaultScript | None = None
    puncturing: bool = False
    puncture_demand: int = 2
    urgent_slices: tuple[SliceId, ...] = (SliceId.GOOSE,)
    drop_multiplier: float = 100.0
    ewma_weight: float = 0.1

    @property
    def total_slots(self) -> int:
        return self.slots_per_episode * self.episodes

    @property
    def episode_duration(self) -> float:
        return self.slots_per_episode * self.slot_duration


class Simulation:
    def __init__(self, spec: SimulationSpec):
        self.spec = spec
        drop_after = {s: spec.drop_multiplier * p.latency_sla for s, p in spec.profiles.items()}
        self.env = RadioEnv(
            spec.topology, spec.radio, spec.links, spec.seed, spec.slot_duration,
            spec.fixed_delay, spec.pools, drop_after,
        )
        self.rsm = RsmMonitor(spec.profiles)
        self.violation_ewma = {s: 0.0 for s in SLICE_ORDER}
        self._seq = {l.id: 0 for l in spec.links}
        self._fault_seq = 0
        self._arrivals = {}
        for link in spec.links:
            base = spec.profiles[link.slice_id].arrival
            if base.kind == "periodic":
                phase = float(stream(spec.seed, "phase", link.id).uniform(0.0, 1.0 / base.rate))
                base = ArrivalModel("periodic", base.rate, phase)
            self._arrivals[link.id] = base
        self._traffic_rng = {l.id: stream(spec.seed, "traffic", l.id) for l in spec.links}
        self._goose_link = {
            l.device_id: l.id for l in spec.links if l.slice_id is SliceId.GOOSE
        }
        self.injected = 0

    def _episode_traffic(self, episode: int) -> dict[int, list[Message]]:
        spec = self.spec
        t_start = episode * spec.episode_duration
        t_end = t_start + spec.episode_duration
        msgs: list[Message] = []
        for link in spec.links:
            if not spec.enabled.get(link.slice_id, True):
                continue
            profile = spec.profiles[link.slice_id]
            prof = SliceProfile(**{**profile.__dict__, "arrival": self._arrivals[link.id]})
            new = generate_traffic(prof, t_start, t_end, self._traffic_rng[link.id], link.id, self._seq[link.id])
            self._seq[link.id] += len(new)
            msgs.extend(new)
        if spec.fault_script is not None and spec.enabled.get(SliceId.GOOSE, True):
            burst = apply_fault_script(
                spec.fault_script, t_start, t_end, spec.profiles[SliceId.GOOSE],
                self._goose_link.__getitem__, offset=t_start, seq_start=self._fault_seq,
            )
            self._fault_seq += len(burst)
            msgs.extend(burst)
        buckets: dict[int, list[Message]] = {}
        for m in msgs:
            k = int(math.floor((m.created_at - t_start) / spec.slot_duration))
            k = min(max(k, 0), spec.slots_per_episode - 1)
            buckets.setdefault(k, []).append(m)
        self.injected += len(msgs)
        return buckets

    def _apply_puncturing(
        self, allocs: dict[str, LinkAllocation], slot: int, sink: Sink
    ) -> dict[str, LinkAllocation]:
        env, spec = self.env, self.spec
        out = dict(allocs)
        for cell in (g.id for g in env.topology.gnodebs):
            in_cell = sorted(l for l in allocs if env.links[l].cell_id == cell)
            urgent = [l for l in in_cell if env.links[l].slice_id in spec.urgent_slices]
            if not urgent:
                continue
            res = puncture(
                {l: allocs[l].rbs for l in in_cell},
                urgent,
                {l: spec.profiles[env.links[l].slice_id].priority for l in in_cell},
                spec.puncture_demand,
                {l: spec.pools[env.links[l].slice_id] for l in in_cell},
            )
            for ev in res.events:
                sink.puncture(PunctureRecord(slot, cell, ev.rb, ev.from_link, ev.to_link))
            for l in in_cell:
                rbs = tuple(sorted(res.schedule[l]))
                if rbs != allocs[l].rbs:
                    out[l] = LinkAllocation(allocs[l].link, rbs, allocs[l].tx_power_dbm)
        return out

    def _record(self, d: Delivery, episode: int, sink: Sink) -> MessageRecord:
        profile = self.spec.profiles[d.message.slice_id]
        if d.outcome == "horizon":
            age = d.finished_at - d.message.created_at
            counted = age > profile.latency_sla
            violated = counted
        else:
            counted = True
            violated = rsm_check(d.latency_s, profile)
        if counted:
            self.rsm.record(d.slot, d.message.slice_id, d.latency_s)
            s = d.message.slice_id
            w = self.spec.ewma_weight
            self.violation_ewma[s] = (1.0 - w) * self.violation_ewma[s] + w * float(violated)
        rec = MessageRecord(
            d.message.id, d.message.source, d.message.slice_id, episode, d.message.created_at,
            d.outcome, d.slot, d.finished_at, d.queueing_s, d.serialization_s, d.latency_s,
            violated, counted,
        )
        sink.message(rec)
        return rec

    def run(self, policy: Policy, sink: Sink) -> None:
        spec, env = self.spec, self.env
        total = spec.total_slots
        for episode in range(spec.episodes):
            base = episode * spec.slots_per_episode
            state = env.initial_state(base)
            buckets = self._episode_traffic(episode)
            for k in range(spec.slots_per_episode):
                slot = base + k
                state = env.inject(state, buckets.get(k, ()))
                active = env.active_links(state)
                view = SlotView(slot, slot, total, env, state, active, self.violation_ewma, spec.profiles)
                allocs = policy.act(view) if active else {}
                if spec.puncturing and allocs:
                    allocs = self._apply_puncturing(allocs, slot, sink)
                state, metrics, drops = env.step(state, allocs.values())
                for m in metrics:
                    worst = max((d.latency_s for d in m.deliveries), default=float("nan"))
                    bad = False
                    for d in m.deliveries:
                        bad |= self._record(d, episode, sink).violated
                    sink.link_step(LinkStepRecord(
                        slot, episode, m.epoch, m.link_id, m.slice_id, m.rbs, m.tx_power_dbm,
                        m.sinr_db, m.throughput_bps, len(m.deliveries), worst, bad,
                    ))
                for d in drops:
                    self._record(d, episode, sink)
                for rec in policy.feedback(view, metrics):
                    sink.learning(rec)
            state, leftovers = env.flush(state)
            for d in leftovers:
                self._record(d, episode, sink)
            policy.end_episode()
