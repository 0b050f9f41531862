"""Uplink radio environment: topology, path loss, shadowing, co-channel SINR,
throughput and per-message latency, advanced one scheduling slot at a time.

Power is handled in watts internally; configuration uses dBm/dB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .iec61850 import Message, SliceId
from .rng import counter_normal, philox_key


class PolicyViolationError(ValueError):
    """An allocation uses RBs outside its slice's admissible pool."""

    def __init__(self, slice_id, message: str):
        self.slice_id = slice_id
        super().__init__(message)


class DeviceKind(str, Enum):
    IED = "IED"
    SSC = "SSC"
    MU = "MU"
    GNODEB = "gNodeB"


@dataclass(frozen=True)
class DeviceNode:
    id: str
    kind: DeviceKind
    x: float
    y: float
    serving_cell: str | None = None
    max_tx_power_dbm: float = 23.0


@dataclass(frozen=True)
class RadioConfig:
    num_rbs: int = 25
    rb_bandwidth_hz: float = 180e3
    noise_dbm_per_hz: float = -174.0
    noise_figure_db: float = 7.0
    pathloss_a_db: float = 128.1
    pathloss_b_db: float = 37.6
    shadowing_sigma_db: float = 8.0
    coherence_slots: int = 10
    se_cap: float | None = 9.6
    min_power_dbm: float = -10.0
    max_power_bounds_dbm: tuple[float, float] = (-10.0, 30.0)
    rb_gain_offset_db: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.num_rbs <= 0 or self.rb_bandwidth_hz <= 0 or self.coherence_slots <= 0:
            raise ValueError("num_rbs, rb_bandwidth_hz and coherence_slots must be positive")
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing sigma cannot be negative")
        if self.rb_gain_offset_db and len(self.rb_gain_offset_db) != self.num_rbs:
            raise ValueError("rb_gain_offset_db needs one entry per RB")

    @property
    def noise_power_w(self) -> float:
        dbm = self.noise_dbm_per_hz + self.noise_figure_db + 10.0 * math.log10(self.rb_bandwidth_hz)
        return dbm_to_w(dbm)

    @property
    def rb_gain(self) -> np.ndarray:
        if not self.rb_gain_offset_db:
            return np.ones(self.num_rbs)
        return 10.0 ** (np.asarray(self.rb_gain_offset_db, dtype=float) / 10.0)


def dbm_to_w(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def w_to_dbm(w: float) -> float:
    return 10.0 * math.log10(w) + 30.0


def path_loss_db(distance_m: float, a: float = 128.1, b: float = 37.6) -> float:
    """PL = a + b*log10(d_km), distances below 1 m clamped to 1 m."""
    if not distance_m > 0:
        raise ValueError(f"distance must be positive, got {distance_m}")
    d = max(float(distance_m), 1.0)
    return a + b * math.log10(d / 1000.0)


class Topology:
    """gNodeBs plus smart-grid endpoints, each endpoint attached to one cell."""

    def __init__(
        self,
        gnodebs: Sequence[DeviceNode],
        devices: Sequence[DeviceNode],
        config: RadioConfig | None = None,
    ):
        config = config or RadioConfig()
        self.gnodebs = list(gnodebs)
        ids = [g.id for g in self.gnodebs] + [d.id for d in devices]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValueError(f"duplicate node ids {dupes}")
        if not self.gnodebs:
            raise ValueError("topology needs at least one gNodeB")
        lo, hi = config.max_power_bounds_dbm
        cell_ids = {g.id for g in self.gnodebs}
        resolved = []
        for d in devices:
            if d.kind is DeviceKind.GNODEB:
                raise ValueError(f"{d.id}: gNodeBs belong in the gnodebs list")
            if not (math.isfinite(d.x) and math.isfinite(d.y)):
                raise ValueError(f"{d.id}: position must be finite")
            if not lo <= d.max_tx_power_dbm <= hi:
                raise ValueError(f"{d.id}: max_tx_power {d.max_tx_power_dbm} dBm outside [{lo}, {hi}]")
            cell = d.serving_cell
            if cell is None:
                cell = min(self.gnodebs, key=lambda g: (math.hypot(g.x - d.x, g.y - d.y), g.id)).id
            elif cell not in cell_ids:
                raise ValueError(f"{d.id}: unknown serving cell {cell!r}")
            resolved.append(replace(d, serving_cell=cell))
        self.devices = resolved
        self.device_index = {d.id: i for i, d in enumerate(self.devices)}
        self.cell_index = {g.id: i for i, g in enumerate(self.gnodebs)}

    def device(self, device_id: str) -> DeviceNode:
        return self.devices[self.device_index[device_id]]

    def distances(self) -> np.ndarray:
        return np.array(
            [[math.hypot(d.x - g.x, d.y - g.y) for g in self.gnodebs] for d in self.devices]
        )


@dataclass(frozen=True)
class ChannelMatrix:
    device_ids: tuple[str, ...]
    cell_ids: tuple[str, ...]
    gain: np.ndarray  # (devices, cells) linear power gain in (0, 1]
    shadowing_db: np.ndarray
    epoch: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "_dev", {d: i for i, d in enumerate(self.device_ids)})
        object.__setattr__(self, "_cell", {c: i for i, c in enumerate(self.cell_ids)})

    def g(self, device_id: str, cell_id: str) -> float:
        return float(self.gain[self._dev[device_id], self._cell[cell_id]])  # type: ignore[attr-defined]


class ShadowingField:
    """Counter-based log-normal shadowing keyed by (seed, epoch, device, cell)."""

    def __init__(self, topology: Topology, config: RadioConfig, seed: int):
        self.topology = topology
        self.config = config
        self.seed = seed
        self.keys = [
            [philox_key(seed, "shadowing", d.id, g.id) for g in topology.gnodebs]
            for d in topology.devices
        ]
        dist = topology.distances()
        self.path_loss = np.vectorize(
            lambda d: path_loss_db(d, config.pathloss_a_db, config.pathloss_b_db)
        )(dist)

    def realize(self, epoch: int) -> ChannelMatrix:
        sigma = self.config.shadowing_sigma_db
        if sigma > 0:
            shadow = sigma * np.array([[counter_normal(k, epoch) for k in row] for row in self.keys])
        else:
            shadow = np.zeros_like(self.path_loss)
        gain = np.minimum(10.0 ** (-(self.path_loss + shadow) / 10.0), 1.0)
        return ChannelMatrix(
            tuple(d.id for d in self.topology.devices),
            tuple(g.id for g in self.topology.gnodebs),
            gain,
            shadow,
            epoch,
        )


def realize_channel(topology: Topology, config: RadioConfig, seed: int, epoch: int) -> ChannelMatrix:
    return ShadowingField(topology, config, seed).realize(epoch)


@dataclass(frozen=True)
class Link:
    """One uplink flow: a device sending one slice's traffic to its serving cell."""

    id: str
    device_id: str
    cell_id: str
    slice_id: SliceId


@dataclass(frozen=True)
class LinkAllocation:
    link: Link
    rbs: tuple[int, ...]
    tx_power_dbm: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "rbs", tuple(sorted(set(int(r) for r in self.rbs))))

    @property
    def power_w(self) -> float:
        return dbm_to_w(self.tx_power_dbm)


def _rb_index(allocations: Sequence[LinkAllocation]) -> dict[int, list[int]]:
    by_rb: dict[int, list[int]] = {}
    for j, a in enumerate(allocations):
        for r in a.rbs:
            by_rb.setdefault(r, []).append(j)
    return by_rb


def _sinr_with_index(
    i: int,
    allocations: Sequence[LinkAllocation],
    by_rb: Mapping[int, list[int]],
    channel: ChannelMatrix,
    noise_w: float,
    rb_gain: np.ndarray,
) -> np.ndarray:
    a = allocations[i]
    own = a.power_w * channel.g(a.link.device_id, a.link.cell_id)
    out = np.empty(len(a.rbs))
    for n, r in enumerate(a.rbs):
        interference = math.fsum(
            allocations[j].power_w * channel.g(allocations[j].link.device_id, a.link.cell_id)
            for j in by_rb[r]
            if j != i
        )
        out[n] = own * rb_gain[r] / (noise_w + interference * rb_gain[r])
    return out


def sinr(
    allocation: LinkAllocation,
    allocations: Sequence[LinkAllocation],
    channel: ChannelMatrix,
    config: RadioConfig,
) -> np.ndarray:
    """Linear SINR on each RB of ``allocation`` (in sorted RB order).

    Interference is the received power, at this link's serving cell, of
    every other allocation holding the same RB.
    """
    allocations = list(allocations)
    try:
        i = next(k for k, a in enumerate(allocations) if a is allocation or a == allocation)
    except StopIteration:
        raise ValueError("allocation is not part of the allocation set") from None
    return _sinr_with_index(
        i, allocations, _rb_index(allocations), channel, config.noise_power_w, config.rb_gain
    )


def spectral_efficiency(sinr_linear, cap: float | None = 9.6):
    """Shannon efficiency log2(1 + SINR) in bits/s/Hz, optionally capped."""
    s = np.asarray(sinr_linear, dtype=float)
    if np.any(s < 0) or np.any(np.isnan(s)):
        raise ValueError("SINR must be nonnegative")
    se = np.log2(1.0 + s)
    if cap is not None:
        se = np.minimum(se, cap)
    return float(se) if se.ndim == 0 else se


def link_throughput(se_per_rb, rb_bandwidth_hz: float) -> float:
    return float(rb_bandwidth_hz * np.sum(np.asarray(se_per_rb, dtype=float)))


def transmission_latency(packet_bits: float, throughput_bps: float, fixed_delay_s: float = 0.0) -> float:
    """Serialization time plus fixed processing delay; +inf when starved."""
    if not packet_bits > 0:
        raise ValueError("packet must carry a positive number of bits")
    if throughput_bps <= 0:
        return math.inf
    return packet_bits / throughput_bps + fixed_delay_s


@dataclass(frozen=True)
class QueuedMessage:
    message: Message
    remaining_bits: float
    ready_slot: int
    serialization_s: float = 0.0


@dataclass(frozen=True)
class Delivery:
    """Final outcome of one message."""

    message: Message
    outcome: str  # delivered | dropped | horizon
    slot: int
    finished_at: float
    queueing_s: float
    serialization_s: float
    latency_s: float  # +inf unless delivered


@dataclass
class StepMetrics:
    slot: int
    epoch: int
    link_id: str
    slice_id: SliceId
    rbs: tuple[int, ...]
    tx_power_dbm: float
    sinr: np.ndarray
    se: np.ndarray
    throughput_bps: float
    caused_w: np.ndarray  # interference this link put on each co-channel victim RB
    deliveries: list[Delivery] = field(default_factory=list)

    @property
    def sinr_db(self) -> float:
        if not len(self.sinr):
            return float("nan")
        with np.errstate(divide="ignore"):
            return float(np.mean(10.0 * np.log10(self.sinr)))

    @property
    def se_total(self) -> float:
        return float(np.sum(self.se))


@dataclass(frozen=True)
class EnvState:
    slot: int  # index of the slot the next step will simulate
    epoch: int
    channel: ChannelMatrix
    queues: Mapping[str, tuple[QueuedMessage, ...]]
    rx_power_w: Mapping[str, np.ndarray]  # per cell: received power per RB in the last slot
    own_rx_w: Mapping[str, np.ndarray]  # per link: own contribution to its cell's rx_power_w


class RadioEnv:
    """Discrete-slot uplink environment.

    Messages become eligible in the first slot starting at or after their
    creation time. A link with a grant serves its eligible queue FIFO at a
    constant rate for the slot, so several short messages may complete in one
    slot and a long one may span several.
    """

    def __init__(
        self,
        topology: Topology,
        config: RadioConfig,
        links: Sequence[Link],
        seed: int,
        slot_duration: float = 0.125e-3,
        fixed_delay: float = 0.0,
        pools: Mapping[SliceId, frozenset[int]] | None = None,
        drop_after: Mapping[SliceId, float] | None = None,
    ):
        self.topology = topology
        self.config = config
        self.links = {l.id: l for l in links}
        self.link_order = [l.id for l in links]
        self.seed = seed
        self.slot_duration = slot_duration
        self.fixed_delay = fixed_delay
        self.pools = dict(pools) if pools is not None else None
        self.drop_after = dict(drop_after or {})
        self.noise_w = config.noise_power_w
        self.rb_gain = config.rb_gain
        self.shadowing = ShadowingField(topology, config, seed)
        self._channel_cache: ChannelMatrix | None = None

    def channel(self, epoch: int) -> ChannelMatrix:
        if self._channel_cache is None or self._channel_cache.epoch != epoch:
            self._channel_cache = self.shadowing.realize(epoch)
        return self._channel_cache

    def initial_state(self, slot: int = 0) -> EnvState:
        epoch = slot // self.config.coherence_slots
        zeros = np.zeros(self.config.num_rbs)
        return EnvState(
            slot=slot,
            epoch=epoch,
            channel=self.channel(epoch),
            queues={l: () for l in self.link_order},
            rx_power_w={g.id: zeros.copy() for g in self.topology.gnodebs},
            own_rx_w={l: zeros.copy() for l in self.link_order},
        )

    def slot_start(self, slot: int) -> float:
        return slot * self.slot_duration

    def inject(self, state: EnvState, messages: Iterable[Message]) -> EnvState:
        t0 = self.slot_start(state.slot)
        added: dict[str, list[QueuedMessage]] = {}
        for m in messages:
            if m.source not in self.links:
                raise KeyError(f"message {m.id} targets unknown link {m.source!r}")
            ready = state.slot if m.created_at <= t0 + 1e-12 else state.slot + 1
            added.setdefault(m.source, []).append(QueuedMessage(m, float(m.bits), ready))
        if not added:
            return state
        queues = dict(state.queues)
        for link_id, extra in added.items():
            merged = list(queues[link_id]) + extra
            merged.sort(key=lambda q: (q.message.created_at, q.message.id))
            queues[link_id] = tuple(merged)
        return replace(state, queues=queues)

    def active_links(self, state: EnvState) -> list[str]:
        return [
            l for l in self.link_order
            if state.queues[l] and state.queues[l][0].ready_slot <= state.slot
        ]

    def interference_seen(self, state: EnvState, link_id: str) -> np.ndarray:
        """Co-channel power per RB at the link's cell in the last slot, excluding its own."""
        link = self.links[link_id]
        return np.maximum(state.rx_power_w[link.cell_id] - state.own_rx_w[link_id], 0.0)

    def _check(self, allocations: Sequence[LinkAllocation]) -> None:
        seen = set()
        for a in allocations:
            lid = a.link.id
            if lid not in self.links:
                raise KeyError(f"unknown link {lid!r}")
            if lid in seen:
                raise ValueError(f"link {lid} allocated twice in one slot")
            seen.add(lid)
            bad = [r for r in a.rbs if not 0 <= r < self.config.num_rbs]
            if bad:
                raise ValueError(f"link {lid}: RB indices {bad} outside [0, {self.config.num_rbs})")
            if self.pools is not None:
                outside = sorted(set(a.rbs) - self.pools[a.link.slice_id])
                if outside:
                    raise PolicyViolationError(
                        a.link.slice_id,
                        f"slice {a.link.slice_id.value}: link {lid} uses RBs {outside} "
                        f"outside its admissible pool",
                    )
            pmax = self.topology.device(a.link.device_id).max_tx_power_dbm
            if not self.config.min_power_dbm - 1e-9 <= a.tx_power_dbm <= pmax + 1e-9:
                raise ValueError(
                    f"link {lid}: power {a.tx_power_dbm} dBm outside "
                    f"[{self.config.min_power_dbm}, {pmax}]"
                )

    def step(
        self, state: EnvState, allocations: Iterable[LinkAllocation]
    ) -> tuple[EnvState, list[StepMetrics], list[Delivery]]:
        allocations = list(allocations)
        self._check(allocations)
        slot = state.slot
        t0 = self.slot_start(slot)
        ts = self.slot_duration
        channel = state.channel
        # idle links do not transmit
        allocations = [
            a for a in allocations
            if state.queues[a.link.id] and state.queues[a.link.id][0].ready_slot <= slot
        ]
        tx = [a for a in allocations if a.rbs]
        by_rb = _rb_index(tx)
        queues = dict(state.queues)
        metrics: list[StepMetrics] = []
        rx_power = {g.id: np.zeros(self.config.num_rbs) for g in self.topology.gnodebs}
        own_rx = {l: np.zeros(self.config.num_rbs) for l in self.link_order}

        tx_pos = {id(a): i for i, a in enumerate(tx)}
        for a in allocations:
            link = a.link
            if a.rbs:
                i = tx_pos[id(a)]
                s = _sinr_with_index(i, tx, by_rb, channel, self.noise_w, self.rb_gain)
                se = spectral_efficiency(s, self.config.se_cap)
                se = np.atleast_1d(se)
                rate = link_throughput(se, self.config.rb_bandwidth_hz)
                caused = []
                p_w = a.power_w
                for r in a.rbs:
                    for j in by_rb[r]:
                        if j != i:
                            caused.append(p_w * channel.g(link.device_id, tx[j].link.cell_id) * self.rb_gain[r])
                caused_arr = np.asarray(caused, dtype=float)
                own = p_w * channel.g(link.device_id, link.cell_id) * self.rb_gain[list(a.rbs)]
                own_rx[link.id][list(a.rbs)] = own
                rx_power[link.cell_id][list(a.rbs)] += own
                for g in self.topology.gnodebs:
                    if g.id != link.cell_id:
                        rx_power[g.id][list(a.rbs)] += (
                            p_w * channel.g(link.device_id, g.id) * self.rb_gain[list(a.rbs)]
                        )
            else:
                s = np.zeros(0)
                se = np.zeros(0)
                rate = 0.0
                caused_arr = np.zeros(0)
            queue, deliveries = self._serve(queues[link.id], slot, t0, ts, rate)
            queues[link.id] = queue
            metrics.append(
                StepMetrics(slot, state.epoch, link.id, link.slice_id, a.rbs, a.tx_power_dbm,
                            s, se, rate, caused_arr, deliveries)
            )

        drops: list[Delivery] = []
        t_end = t0 + ts
        for lid in self.link_order:
            q = queues[lid]
            if not q:
                continue
            limit = self.drop_after.get(self.links[lid].slice_id)
            if limit is None:
                continue
            keep = []
            for entry in q:
                age = t_end - entry.message.created_at
                if age > limit:
                    drops.append(
                        Delivery(entry.message, "dropped", slot, t_end,
                                 max(age - entry.serialization_s, 0.0), entry.serialization_s, math.inf)
                    )
                else:
                    keep.append(entry)
            if len(keep) != len(q):
                queues[lid] = tuple(keep)

        next_slot = slot + 1
        epoch = next_slot // self.config.coherence_slots
        new_state = EnvState(
            slot=next_slot,
            epoch=epoch,
            channel=self.channel(epoch),
            queues=queues,
            rx_power_w=rx_power,
            own_rx_w=own_rx,
        )
        return new_state, metrics, drops

    def _serve(
        self, queue: tuple[QueuedMessage, ...], slot: int, t0: float, ts: float, rate: float
    ) -> tuple[tuple[QueuedMessage, ...], list[Delivery]]:
        if rate <= 0 or not queue:
            return queue, []
        used = 0.0
        done: list[Delivery] = []
        rest = list(queue)
        while rest and rest[0].ready_slot <= slot and used < ts:
            entry = rest[0]
            need = entry.remaining_bits / rate
            if used + need <= ts:
                finish = t0 + used + need
                ser = entry.serialization_s + need
                latency = finish - entry.message.created_at + self.fixed_delay
                queueing = max(latency - self.fixed_delay - ser, 0.0)
                done.append(Delivery(entry.message, "delivered", slot, finish, queueing, ser, latency))
                used += need
                rest.pop(0)
            else:
                span = ts - used
                rest[0] = replace(
                    entry,
                    remaining_bits=entry.remaining_bits - rate * span,
                    serialization_s=entry.serialization_s + span,
                )
                used = ts
        return tuple(rest), done

    def flush(self, state: EnvState) -> tuple[EnvState, list[Delivery]]:
        """End an episode: every queued message leaves with outcome ``horizon``."""
        t = self.slot_start(state.slot)
        out = []
        for lid in self.link_order:
            for entry in state.queues[lid]:
                age = max(t - entry.message.created_at, 0.0)
                out.append(
                    Delivery(entry.message, "horizon", state.slot - 1, t,
                             max(age - entry.serialization_s, 0.0), entry.serialization_s, math.inf)
                )
        cleared = replace(state, queues={l: () for l in self.link_order})
        return cleared, out


def env_step(
    env: RadioEnv, state: EnvState, allocations: Iterable[LinkAllocation]
) -> tuple[EnvState, list[StepMetrics], list[Delivery]]:
    return env.step(state, allocations)
