"""Slice configuration and supervision: RANA delays, RIL pools, RSF tiling and
puncturing, and the RSM SLA monitor."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from .iec61850 import SLICE_ORDER, SliceId, SliceProfile


class ConfigurationError(ValueError):
    """Invalid slicing configuration. ``errors`` lists every problem found."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class RanaIndex(str, Enum):
    CENTRALIZED = "centralized"
    HYBRID = "hybrid"
    DISTRIBUTED = "distributed"


DEFAULT_RANA_DELAYS = {
    RanaIndex.CENTRALIZED: 1.0e-3,
    RanaIndex.HYBRID: 0.3e-3,
    RanaIndex.DISTRIBUTED: 0.05e-3,
}


@dataclass(frozen=True)
class RanaConfig:
    index: RanaIndex = RanaIndex.DISTRIBUTED
    processing_delay: Mapping[RanaIndex, float] = field(
        default_factory=lambda: dict(DEFAULT_RANA_DELAYS)
    )

    def __post_init__(self) -> None:
        d = {RanaIndex(k): float(v) for k, v in self.processing_delay.items()}
        object.__setattr__(self, "index", RanaIndex(self.index))
        object.__setattr__(self, "processing_delay", d)
        missing = [i.value for i in RanaIndex if i not in d]
        if missing:
            raise ConfigurationError([f"processing delay missing for {missing}"])
        c, h, s = (d[RanaIndex.CENTRALIZED], d[RanaIndex.HYBRID], d[RanaIndex.DISTRIBUTED])
        if not (c > h > s >= 0.0):
            raise ConfigurationError(
                ["processing delays must satisfy centralized > hybrid > distributed >= 0"]
            )


def resolve_rana(config: RanaConfig) -> float:
    """Fixed processing delay (seconds) added to every transmission."""
    return config.processing_delay[config.index]


class RilMode(str, Enum):
    DEDICATED = "dedicated"
    SHARED = "shared"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class RilPolicy:
    mode: RilMode
    guaranteed: Mapping[SliceId, int] = field(default_factory=dict)
    shareable: int | None = None  # hybrid only; None = every RB left after the cores

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", RilMode(self.mode))
        object.__setattr__(
            self, "guaranteed", {SliceId(k): int(v) for k, v in self.guaranteed.items()}
        )


def ril_errors(policy: RilPolicy, num_rbs: int, slices: Sequence[SliceId] = SLICE_ORDER) -> list[str]:
    errors = []
    negative = [s.value for s, n in policy.guaranteed.items() if n < 0]
    if negative:
        errors.append(f"negative guaranteed RB counts for {negative}")
    total = sum(policy.guaranteed.get(s, 0) for s in slices)
    if policy.mode is RilMode.DEDICATED:
        missing = [s.value for s in slices if policy.guaranteed.get(s, 0) <= 0]
        if missing:
            errors.append(f"dedicated mode needs a positive RB count for {missing}")
        if num_rbs < len(slices):
            errors.append(f"dedicated mode needs at least {len(slices)} RBs, have {num_rbs}")
        if total > num_rbs:
            errors.append(
                f"dedicated pools request {total} RBs but only {num_rbs} exist "
                f"(deficit of {total - num_rbs} RBs)"
            )
    elif policy.mode is RilMode.HYBRID:
        share = num_rbs - total if policy.shareable is None else policy.shareable
        if share < 0:
            errors.append(
                f"hybrid cores request {total} RBs but only {num_rbs} exist "
                f"(deficit of {total - num_rbs} RBs)"
            )
        elif total + share > num_rbs:
            errors.append(
                f"hybrid cores ({total}) plus shareable pool ({share}) need {total + share} RBs "
                f"but only {num_rbs} exist (deficit of {total + share - num_rbs} RBs)"
            )
    return errors


def partition_rbs(
    policy: RilPolicy, num_rbs: int, slices: Sequence[SliceId] = SLICE_ORDER
) -> dict[SliceId, frozenset[int]]:
    """Admissible RB set for every slice under the isolation policy.

    Dedicated and hybrid cores are laid out contiguously in slice order;
    the hybrid overflow pool follows the cores.
    """
    errors = ril_errors(policy, num_rbs, slices)
    if errors:
        raise ConfigurationError(errors)
    if policy.mode is RilMode.SHARED:
        everything = frozenset(range(num_rbs))
        return {s: everything for s in slices}
    cores: dict[SliceId, frozenset[int]] = {}
    start = 0
    for s in slices:
        n = policy.guaranteed.get(s, 0)
        cores[s] = frozenset(range(start, start + n))
        start += n
    if policy.mode is RilMode.DEDICATED:
        return cores
    share = num_rbs - start if policy.shareable is None else policy.shareable
    overflow = frozenset(range(start, start + share))
    return {s: cores[s] | overflow for s in slices}


@dataclass(frozen=True)
class Tile:
    slice_id: SliceId
    rb_start: int
    rb_stop: int  # exclusive
    slot_start: int = 0
    slot_stop: int | None = None  # exclusive; None = whole horizon

    def overlaps(self, other: "Tile") -> bool:
        if self.rb_stop <= other.rb_start or other.rb_stop <= self.rb_start:
            return False
        a_end = math.inf if self.slot_stop is None else self.slot_stop
        b_end = math.inf if other.slot_stop is None else other.slot_stop
        return self.slot_start < b_end and other.slot_start < a_end


@dataclass(frozen=True)
class RsfConfig:
    numerology: int = 3
    tiles: tuple[Tile, ...] = ()
    puncturing_enabled: bool = False
    puncturing_demand: int = 2
    urgent_slices: tuple[SliceId, ...] = (SliceId.GOOSE,)

    def __post_init__(self) -> None:
        if self.numerology not in (0, 1, 2, 3):
            raise ConfigurationError([f"numerology must be in 0..3, got {self.numerology}"])

    @property
    def slot_duration(self) -> float:
        return 1e-3 / (2**self.numerology)


def default_tiles(admissible: Mapping[SliceId, frozenset[int]]) -> tuple[Tile, ...]:
    """One frequency-contiguous tile per contiguous run of each slice's RBs."""
    tiles = []
    for s, rbs in admissible.items():
        run: list[int] = []
        for r in sorted(rbs):
            if run and r != run[-1] + 1:
                tiles.append(Tile(s, run[0], run[-1] + 1))
                run = []
            run.append(r)
        if run:
            tiles.append(Tile(s, run[0], run[-1] + 1))
    return tuple(tiles)


def tile_errors(tiles: Iterable[Tile], num_rbs: int, horizon_slots: int, mode: RilMode) -> list[str]:
    tiles = list(tiles)
    errors = []
    for t in tiles:
        if not (0 <= t.rb_start < t.rb_stop <= num_rbs):
            errors.append(f"tile {t} lies outside the RB grid [0, {num_rbs})")
        stop = horizon_slots if t.slot_stop is None else t.slot_stop
        if not (0 <= t.slot_start < stop <= horizon_slots):
            errors.append(f"tile {t} lies outside the slot horizon [0, {horizon_slots})")
    if mode is RilMode.DEDICATED:
        for i, a in enumerate(tiles):
            for b in tiles[i + 1:]:
                if a.slice_id != b.slice_id and a.overlaps(b):
                    errors.append(
                        f"tiles of {a.slice_id.value} and {b.slice_id.value} overlap in dedicated mode"
                    )
    return errors


# Extension point for customised baseband scheduling functions. Nothing is
# registered by default; the engine consults it only when a setup names one.
SCHEDULING_FUNCTIONS: dict[str, Callable] = {}


def register_scheduling_function(name: str):
    def deco(fn: Callable) -> Callable:
        if name in SCHEDULING_FUNCTIONS:
            raise ValueError(f"scheduling function {name!r} already registered")
        SCHEDULING_FUNCTIONS[name] = fn
        return fn

    return deco


@dataclass(frozen=True)
class PunctureEvent:
    rb: int
    from_link: str
    to_link: str


@dataclass
class PunctureResult:
    schedule: dict[str, frozenset[int]]
    events: list[PunctureEvent] = field(default_factory=list)
    preempted: list[str] = field(default_factory=list)  # holders left with no RBs
    starved: list[str] = field(default_factory=list)  # urgent links that got nothing


def puncture(
    schedule: Mapping[str, Iterable[int]],
    urgent: Sequence[str],
    priorities: Mapping[str, int],
    demand: int = 2,
    admissible: Mapping[str, Iterable[int]] | None = None,
) -> PunctureResult:
    """Reassign RBs from lower-priority holders to urgent links.

    ``schedule`` maps link -> RB set for one cell. Each urgent link (in the
    given order) first evicts lower-priority co-holders from the RBs it
    already holds, then takes RBs held only by lower-priority links, lowest
    priority first, until it holds ``demand`` RBs. Urgent links left with
    no RB at all are reported as starved.
    """
    sched = {k: set(v) for k, v in schedule.items()}
    allowed = None if admissible is None else {k: set(v) for k, v in admissible.items()}
    result = PunctureResult(schedule={})
    had_rbs = {k for k, v in sched.items() if v}

    def holders(rb: int) -> list[str]:
        return sorted(k for k, v in sched.items() if rb in v)

    for u in urgent:
        pu = priorities[u]
        own = sched.setdefault(u, set())
        for rb in sorted(own):
            for k in holders(rb):
                if k != u and priorities[k] > pu:
                    sched[k].discard(rb)
                    result.events.append(PunctureEvent(rb, k, u))
        while len(own) < demand:
            best = None
            for k in sorted(sched, key=lambda k: (-priorities[k], k)):
                if k == u or priorities[k] <= pu:
                    continue
                for rb in sorted(sched[k], reverse=True):
                    if rb in own or (allowed is not None and rb not in allowed.get(u, ())):
                        continue
                    if all(priorities[h] > pu for h in holders(rb)):
                        best = rb
                        break
                if best is not None:
                    break
            if best is None:
                break
            for k in holders(best):
                sched[k].discard(best)
                result.events.append(PunctureEvent(best, k, u))
            own.add(best)
        if not own:
            result.starved.append(u)
    result.schedule = {k: frozenset(v) for k, v in sched.items()}
    result.preempted = sorted(k for k in had_rbs if not sched[k])
    return result


def rsm_check(latency: float, profile: SliceProfile) -> bool:
    """True when the latency violates the slice SLA (strictly greater)."""
    if math.isnan(latency):
        raise ValueError("latency is NaN")
    return latency > profile.latency_sla


@dataclass(frozen=True)
class RsmSample:
    slot: int
    slice_id: SliceId
    latency: float
    violated: bool


@dataclass
class SlaRecord:
    slice_id: SliceId
    window: tuple[int, int]  # [start, stop) slots
    samples: list[float] = field(default_factory=list)
    violations: int = 0

    @property
    def violation_rate(self) -> float:
        return self.violations / max(1, len(self.samples))

    @property
    def no_data(self) -> bool:
        return not self.samples


class RsmMonitor:
    """Append-only SLA log fed by one simulation thread."""

    def __init__(self, profiles: Mapping[SliceId, SliceProfile]):
        self.profiles = dict(profiles)
        self.samples: list[RsmSample] = []

    def record(self, slot: int, slice_id: SliceId, latency: float) -> bool:
        if self.samples and slot < self.samples[-1].slot:
            raise ValueError("RSM samples must be appended in slot order")
        violated = rsm_check(latency, self.profiles[slice_id])
        self.samples.append(RsmSample(slot, slice_id, latency, violated))
        return violated


def rsm_violation_rate(
    records: Iterable[RsmSample],
    window: tuple[int, int],
    slices: Sequence[SliceId] = SLICE_ORDER,
) -> dict[SliceId, SlaRecord]:
    """Per-slice SLA record over slots ``[start, stop)``."""
    start, stop = window
    if stop <= start:
        raise ValueError("window must be nonempty")
    out = {s: SlaRecord(s, window) for s in slices}
    for rec in records:
        if start <= rec.slot < stop and rec.slice_id in out:
            r = out[rec.slice_id]
            r.samples.append(rec.latency)
            r.violations += int(rec.violated)
    return out
