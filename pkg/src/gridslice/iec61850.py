"""IEC 61850 service semantics: slice profiles, messages, traffic and fault scripts."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class SliceId(str, Enum):
    GOOSE = "GOOSE"
    SV = "SV"
    MMS = "MMS"


SLICE_ORDER = (SliceId.GOOSE, SliceId.SV, SliceId.MMS)
SST_NAMES = {1: "eMBB", 2: "uRLLC", 3: "mMTC"}


class UnclassifiedMessageError(KeyError):
    """The message class tag has no slice mapping."""


@dataclass(frozen=True)
class ArrivalModel:
    kind: str  # "periodic", "poisson" or "event"
    rate: float = 0.0  # messages per second
    phase: float = 0.0  # periodic only: offset of the first arrival

    def __post_init__(self) -> None:
        if self.kind not in ("periodic", "poisson", "event"):
            raise ValueError(f"unknown arrival model {self.kind!r}")
        if self.kind != "event" and not self.rate > 0:
            raise ValueError(f"{self.kind} arrivals need a positive rate, got {self.rate}")


@dataclass(frozen=True)
class SliceProfile:
    slice_id: SliceId
    sst: int
    latency_sla: float  # seconds
    reliability_target: float
    packet_bits: int
    priority: int  # lower = more urgent
    arrival: ArrivalModel

    def __post_init__(self) -> None:
        if self.sst not in SST_NAMES:
            raise ValueError(f"SST must be one of {sorted(SST_NAMES)}")
        if self.latency_sla <= 0 or self.packet_bits <= 0:
            raise ValueError("latency SLA and packet size must be positive")
        if not 0.0 < self.reliability_target <= 1.0:
            raise ValueError("reliability target must be a probability")


def default_profiles() -> dict[SliceId, SliceProfile]:
    return {
        SliceId.GOOSE: SliceProfile(
            SliceId.GOOSE, sst=2, latency_sla=0.3e-3, reliability_target=1 - 1e-5,
            packet_bits=1096, priority=0, arrival=ArrivalModel("periodic", 1.0),
        ),
        SliceId.SV: SliceProfile(
            SliceId.SV, sst=2, latency_sla=0.5e-3, reliability_target=1 - 1e-5,
            packet_bits=1120, priority=1, arrival=ArrivalModel("periodic", 4000.0),
        ),
        SliceId.MMS: SliceProfile(
            SliceId.MMS, sst=3, latency_sla=40e-3, reliability_target=1 - 1e-3,
            packet_bits=8000, priority=2, arrival=ArrivalModel("poisson", 10.0),
        ),
    }


@dataclass(frozen=True)
class Message:
    id: str
    slice_id: SliceId
    source: str  # link id the message is queued on
    created_at: float
    bits: int
    deadline: float

    def __post_init__(self) -> None:
        if self.bits <= 0:
            raise ValueError("message must carry at least one bit")
        if not self.deadline > self.created_at:
            raise ValueError("deadline must follow creation time")


def make_message(profile: SliceProfile, source: str, created_at: float, seq: int) -> Message:
    return Message(
        id=f"{source}#{seq}",
        slice_id=profile.slice_id,
        source=source,
        created_at=created_at,
        bits=profile.packet_bits,
        deadline=created_at + profile.latency_sla,
    )


def _first_index_at_or_after(t: float, phase: float, rate: float) -> int:
    k = math.ceil((t - phase) * rate)
    while phase + (k - 1) / rate >= t:
        k -= 1
    while phase + k / rate < t:
        k += 1
    return k


def generate_traffic(
    profile: SliceProfile,
    t0: float,
    t1: float,
    rng: np.random.Generator | None = None,
    source: str = "",
    seq_start: int = 0,
) -> list[Message]:
    """Messages of one source created in the window ``[t0, t1)``.

    Periodic arrivals sit on the grid ``phase + k / rate`` (so consecutive
    windows partition the grid exactly); Poisson arrivals use exponential
    gaps from ``t0``; event-driven slices produce nothing here.
    """
    if t1 < t0:
        raise ValueError("window end precedes its start")
    arrival = profile.arrival
    if arrival.kind != "event" and not arrival.rate > 0:
        raise ValueError("arrival rate must be positive")
    if t1 == t0 or arrival.kind == "event":
        return []
    times: list[float] = []
    if arrival.kind == "periodic":
        k_lo = _first_index_at_or_after(t0, arrival.phase, arrival.rate)
        k_hi = _first_index_at_or_after(t1, arrival.phase, arrival.rate)
        times = [arrival.phase + k / arrival.rate for k in range(k_lo, k_hi)]
    else:
        if rng is None:
            raise ValueError("poisson arrivals need a random stream")
        t = t0 + rng.exponential(1.0 / arrival.rate)
        while t < t1:
            times.append(t)
            t += rng.exponential(1.0 / arrival.rate)
    return [make_message(profile, source, t, seq_start + i) for i, t in enumerate(times)]


FAULT_EVENT_KINDS = ("fault_detected", "trip_command", "restore_command")


@dataclass(frozen=True)
class FaultEvent:
    time: float  # seconds from episode start
    kind: str
    source: str  # device id
    burst: int = 0

    def __post_init__(self) -> None:
        if self.kind not in FAULT_EVENT_KINDS:
            raise ValueError(f"unknown fault event kind {self.kind!r}")
        if self.burst < 0:
            raise ValueError("burst count cannot be negative")


@dataclass(frozen=True)
class FaultScript:
    events: tuple[FaultEvent, ...] = ()

    def __post_init__(self) -> None:
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ValueError("fault events must be time-ordered")
        kinds = [e.kind for e in self.events]
        for i, kind in enumerate(kinds):
            if kind == "restore_command" and "trip_command" not in kinds[:i]:
                raise ValueError("a restore command must follow a trip command")

    @property
    def total_burst(self) -> int:
        return sum(e.burst for e in self.events)


def default_fault_script(
    horizon: float,
    protecting_ssc: str,
    commanding_ied: str,
    fault_fraction: float = 0.2,
    restore_delay: float = 50e-3,
    burst: int = 3,
) -> FaultScript:
    t_fault = fault_fraction * horizon
    return FaultScript(
        (
            FaultEvent(t_fault, "fault_detected", protecting_ssc, 0),
            FaultEvent(t_fault, "trip_command", protecting_ssc, burst),
            FaultEvent(t_fault + restore_delay, "restore_command", commanding_ied, burst),
        )
    )


def apply_fault_script(
    script: FaultScript,
    t0: float,
    t1: float,
    goose: SliceProfile,
    link_for_device,
    offset: float = 0.0,
    seq_start: int = 0,
) -> list[Message]:
    """GOOSE burst messages for script events falling in ``[t0, t1)``.

    ``offset`` shifts the script (episode start time); ``link_for_device``
    maps a device id to the link the burst is queued on.
    """
    out: list[Message] = []
    seq = seq_start
    for ev in script.events:
        t = offset + ev.time
        if t0 <= t < t1:
            link = link_for_device(ev.source)
            for _ in range(ev.burst):
                out.append(
                    Message(
                        id=f"{link}#f{seq}",
                        slice_id=SliceId.GOOSE,
                        source=link,
                        created_at=t,
                        bits=goose.packet_bits,
                        deadline=t + goose.latency_sla,
                    )
                )
                seq += 1
    return out


_CLASS_MAP = {
    # protection trips and fast messages
    "type1": SliceId.GOOSE,
    "type1a": SliceId.GOOSE,
    "type1b": SliceId.GOOSE,
    "trip": SliceId.GOOSE,
    "goose": SliceId.GOOSE,
    # time synchronisation shares the uRLLC treatment of protection traffic
    "type6": SliceId.GOOSE,
    # raw sampled values
    "type4": SliceId.SV,
    "sv": SliceId.SV,
    "sampledvalues": SliceId.SV,
    # medium/low speed reports, commands and file transfer
    "type2": SliceId.MMS,
    "type3": SliceId.MMS,
    "type5": SliceId.MMS,
    "report": SliceId.MMS,
    "mediumspeedreport": SliceId.MMS,
    "filetransfer": SliceId.MMS,
    "mms": SliceId.MMS,
}


def classify_message(tag: str, profiles: dict[SliceId, SliceProfile] | None = None) -> tuple[SliceId, int]:
    """Map an IEC 61850 message class tag to ``(slice, SST)``."""
    key = "".join(ch for ch in tag.lower() if ch.isalnum())
    if key not in _CLASS_MAP:
        raise UnclassifiedMessageError(f"no slice mapping for message class {tag!r}")
    slice_id = _CLASS_MAP[key]
    profiles = profiles or default_profiles()
    return slice_id, profiles[slice_id].sst


@dataclass(frozen=True)
class ServiceCatalogEntry:
    category: str
    latency: str
    reliability: str
    bandwidth: str
    node_density: str
    priority: str
    sst: tuple[int, ...] = field(default_factory=tuple)


CATALOG_COLUMNS = (
    "category", "latency", "reliability", "bandwidth", "node_density", "priority", "sst",
)


def service_catalog() -> list[ServiceCatalogEntry]:
    return [
        ServiceCatalogEntry("Smart distribution automation", "Low", "High", "Low",
                            "Medium/Low", "High", (2,)),
        ServiceCatalogEntry("Wide-area monitoring, control, and protection", "Low/Medium",
                            "High/Medium", "Medium/Low", "Medium", "Medium/High", (1, 2, 3)),
        ServiceCatalogEntry("Metering data acquisition", "Medium/High", "Medium/Low",
                            "Medium/High", "High", "Low/Medium", (3,)),
        ServiceCatalogEntry("Distributed generation integration and microgrids", "Low/Medium",
                            "High", "Low", "Medium/High", "Medium/High", (2, 3)),
        ServiceCatalogEntry("Volume and price balancing", "Medium/High", "Medium/Low",
                            "Medium/High", "Medium/High", "Low", (1, 3)),
    ]


def catalog_to_csv(entries: Iterable[ServiceCatalogEntry]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CATALOG_COLUMNS)
    for e in entries:
        row = asdict(e)
        row["sst"] = ";".join(str(s) for s in e.sst)
        writer.writerow([row[c] for c in CATALOG_COLUMNS])
    return buf.getvalue()


def catalog_from_csv(text: str) -> list[ServiceCatalogEntry]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CATALOG_COLUMNS:
        raise ValueError(f"catalog CSV must have columns {CATALOG_COLUMNS}")
    entries = []
    for row in reader:
        sst = tuple(int(s) for s in row.pop("sst").split(";") if s)
        entries.append(ServiceCatalogEntry(sst=sst, **row))
    return entries


def sst_of(slice_id: SliceId, profiles: Sequence[SliceProfile] | dict | None = None) -> int:
    profiles = profiles or default_profiles()
    if isinstance(profiles, dict):
        return profiles[slice_id].sst
    return next(p.sst for p in profiles if p.slice_id == slice_id)
