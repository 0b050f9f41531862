"""Run logs on disk, windowed summaries, run comparison and flat export.

A log is a directory holding ``manifest.json`` plus one CSV per record
stream. Floats are written with ``repr`` so every value reads back exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .drl import LearningRecord
from .engine import LinkStepRecord, MessageRecord, PunctureRecord
from .iec61850 import SLICE_ORDER, SliceId
from .slicing import RsmSample, rsm_violation_rate

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
STREAMS: dict[str, tuple[str, ...]] = {
    "messages": (
        "message_id", "link_id", "slice_id", "episode", "created_at", "outcome", "slot",
        "finished_at", "queueing_s", "serialization_s", "latency_s", "violated", "counted",
    ),
    "link_steps": (
        "slot", "episode", "epoch", "link_id", "slice_id", "rbs", "tx_power_dbm", "sinr_db",
        "throughput_bps", "delivered", "latency_s", "violated",
    ),
    "learning": (
        "slot", "link_id", "reward", "dqn_loss", "actor_loss", "critic_loss", "temperature",
    ),
    "punctures": ("slot", "cell_id", "rb", "from_link", "to_link"),
}
INT_FIELDS = {"episode", "slot", "epoch", "delivered", "rb"}
BOOL_FIELDS = {"violated", "counted"}
STR_FIELDS = {"message_id", "link_id", "outcome", "cell_id", "from_link", "to_link"}


class LogIOError(OSError):
    """Reading or writing a log, summary or export failed; carries the path."""


class IncompleteLogError(RuntimeError):
    def __init__(self, path: Path, status: str):
        self.path = path
        self.status = status
        super().__init__(f"log {path} has status {status!r}; only complete logs can be summarized")


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, SliceId):
        return value.value
    if isinstance(value, tuple):
        return ";".join(str(v) for v in value)
    return str(value)


def _parse(name: str, text: str) -> Any:
    if name in INT_FIELDS:
        return int(text)
    if name in BOOL_FIELDS:
        return text == "1"
    if name in STR_FIELDS:
        return text
    if name == "slice_id":
        return SliceId(text)
    if name == "rbs":
        return tuple(int(v) for v in text.split(";") if v)
    return float(text)


def _dump_json(path: Path, data: Any) -> None:
    try:
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise LogIOError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _load_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LogIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise LogIOError(f"{path} is not valid JSON: {exc}") from exc


class MetricsLog:
    """Append-only writer. Acts as the simulation's record sink."""

    def __init__(self, directory: str | Path, run_info: Mapping[str, Any]):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise LogIOError(f"cannot create log directory {self.directory}: {exc.strerror or exc}") from exc
        self.run_info = dict(run_info)
        self._counts = {name: 0 for name in STREAMS}
        self._last_slot = {name: -1 for name in STREAMS}
        self._write_manifest("running")
        self._files = {}
        self._writers = {}
        for name, cols in STREAMS.items():
            path = self.directory / f"{name}.csv"
            try:
                fh = path.open("w", newline="", encoding="utf-8")
            except OSError as exc:
                raise LogIOError(f"cannot open {path}: {exc.strerror or exc}") from exc
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            self._files[name] = fh
            self._writers[name] = w

    def _write_manifest(self, status: str, extra: Mapping[str, Any] | None = None) -> None:
        data = {"schema_version": SCHEMA_VERSION, "run": self.run_info, "status": status}
        data.update(extra or {})
        _dump_json(self.directory / MANIFEST, data)

    def _append(self, name: str, rec) -> None:
        slot = getattr(rec, "slot")
        if slot < self._last_slot[name]:
            raise ValueError(f"{name} records must be time-ordered (slot {slot} after {self._last_slot[name]})")
        self._last_slot[name] = slot
        self._writers[name].writerow([_fmt(getattr(rec, c)) for c in STREAMS[name]])
        self._counts[name] += 1

    def message(self, rec: MessageRecord) -> None:
        self._append("messages", rec)

    def link_step(self, rec: LinkStepRecord) -> None:
        self._append("link_steps", rec)

    def learning(self, rec: LearningRecord) -> None:
        self._append("learning", rec)

    def puncture(self, rec: PunctureRecord) -> None:
        self._append("punctures", rec)

    def close(self, status: str = "complete", extra: Mapping[str, Any] | None = None) -> str:
        for fh in self._files.values():
            fh.close()
        digest = content_hash(self.directory)
        info = {"content_hash": digest, "record_counts": dict(self._counts)}
        info.update(extra or {})
        self._write_manifest(status, info)
        return digest


def content_hash(directory: str | Path) -> str:
    """sha256 over every stream file, in a fixed order."""
    h = hashlib.sha256()
    d = Path(directory)
    for name in STREAMS:
        path = d / f"{name}.csv"
        h.update(name.encode())
        try:
            h.update(path.read_bytes())
        except OSError as exc:
            raise LogIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return h.hexdigest()


@dataclass
class LoadedLog:
    path: Path
    manifest: dict[str, Any]

    @property
    def status(self) -> str:
        return self.manifest.get("status", "unknown")

    @property
    def run(self) -> dict[str, Any]:
        return self.manifest.get("run", {})

    def rows(self, stream: str) -> list[dict[str, Any]]:
        path = self.path / f"{stream}.csv"
        try:
            with path.open(newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                return [{k: _parse(k, v) for k, v in row.items()} for row in reader]
        except OSError as exc:
            raise LogIOError(f"cannot read {path}: {exc.strerror or exc}") from exc


def read_log(directory: str | Path) -> LoadedLog:
    d = Path(directory)
    return LoadedLog(d, _load_json(d / MANIFEST))


# summaries -------------------------------------------------------------------


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    n = len(sorted_values)
    if not n:
        return float("nan")
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[rank - 1])


def window_bounds(total_slots: int, window_count: int) -> list[tuple[int, int]]:
    if window_count <= 0 or total_slots < window_count:
        raise ValueError("need at least one slot per window")
    edges = [round(i * total_slots / window_count) for i in range(window_count + 1)]
    return list(zip(edges[:-1], edges[1:]))


@dataclass
class RunSummary:
    scenario_hash: str
    setup: str
    seed: int
    total_slots: int
    windows: list[tuple[int, int]]
    p50: dict[str, list[float]]
    p95: dict[str, list[float]]
    p99: dict[str, list[float]]
    samples: dict[str, list[int]]
    violations: dict[str, list[int]]
    reward_mean: list[float]
    schema_version: int = SCHEMA_VERSION

    def violation_rate(self, slice_id: SliceId | str, window: int = -1) -> float:
        s = SliceId(slice_id).value
        return self.violations[s][window] / max(1, self.samples[s][window])

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["windows"] = [list(w) for w in self.windows]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunSummary":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported summary schema version {d.get('schema_version')!r}")
        d = dict(d)
        d["windows"] = [tuple(w) for w in d["windows"]]
        return cls(**d)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RunSummary):
            return NotImplemented
        return _nan_equal(self.to_dict(), other.to_dict())


def _nan_equal(a: Any, b: Any) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_nan_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_nan_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


def summarize_records(
    samples: Iterable[RsmSample],
    rewards: Iterable[tuple[int, float]],
    total_slots: int,
    window_count: int,
    scenario_hash: str = "",
    setup: str = "",
    seed: int = 0,
) -> RunSummary:
    windows = window_bounds(total_slots, window_count)
    samples = list(samples)
    ordered = sorted(samples, key=lambda s: s.slot)
    slots = np.array([s.slot for s in ordered], dtype=np.int64)
    names = [s.value for s in SLICE_ORDER]
    out = {k: {n: [] for n in names} for k in ("p50", "p95", "p99", "samples", "violations")}
    for w in windows:
        lo, hi = np.searchsorted(slots, w[0]), np.searchsorted(slots, w[1])
        recs = rsm_violation_rate(ordered[lo:hi], w)
        for s in SLICE_ORDER:
            r = recs[s]
            lat = sorted(r.samples)
            out["p50"][s.value].append(nearest_rank(lat, 50))
            out["p95"][s.value].append(nearest_rank(lat, 95))
            out["p99"][s.value].append(nearest_rank(lat, 99))
            out["samples"][s.value].append(len(lat))
            out["violations"][s.value].append(r.violations)
    rw = sorted(rewards)
    rslots = np.array([r[0] for r in rw], dtype=np.int64)
    rvals = np.array([r[1] for r in rw], dtype=float)
    reward_mean = []
    for w in windows:
        lo, hi = np.searchsorted(rslots, w[0]), np.searchsorted(rslots, w[1])
        reward_mean.append(float(rvals[lo:hi].mean()) if hi > lo else float("nan"))
    return RunSummary(scenario_hash, setup, seed, total_slots, windows,
                      out["p50"], out["p95"], out["p99"], out["samples"], out["violations"], reward_mean)


def log_samples(log: LoadedLog) -> list[RsmSample]:
    return [
        RsmSample(r["slot"], r["slice_id"], r["latency_s"], r["violated"])
        for r in log.rows("messages") if r["counted"]
    ]


def summarize(log: LoadedLog | str | Path, window_count: int = 10) -> RunSummary:
    if not isinstance(log, LoadedLog):
        log = read_log(log)
    if log.status != "complete":
        raise IncompleteLogError(log.path, log.status)
    run = log.run
    rewards = [(r["slot"], r["reward"]) for r in log.rows("learning")]
    return summarize_records(
        log_samples(log), rewards, int(run["total_slots"]), window_count,
        run.get("scenario_hash", ""), run.get("setup", ""), int(run.get("seed", 0)),
    )


# comparison ------------------------------------------------------------------


@dataclass
class SliceComparison:
    slice_id: str
    p50_a: float
    p50_b: float
    p50_delta: float
    violation_a: float
    violation_b: float
    violation_delta: float
    latency_winner: str
    violation_winner: str


@dataclass
class ComparisonReport:
    scenario_hash: str
    setup_a: str
    setup_b: str
    slices: dict[str, SliceComparison] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _delta(a: float, b: float) -> float:
    if a == b or (math.isnan(a) and math.isnan(b)):
        return 0.0
    return a - b


def _winner(delta: float) -> str:
    if math.isnan(delta) or delta == 0:
        return "tie"
    return "a" if delta < 0 else "b"


def compare_runs(a: RunSummary, b: RunSummary) -> ComparisonReport:
    """Final-window deltas ``a - b``; a negative delta means ``a`` is better."""
    if a.scenario_hash != b.scenario_hash:
        raise ValueError(
            f"summaries come from different scenarios ({a.scenario_hash[:12]} vs {b.scenario_hash[:12]})"
        )
    report = ComparisonReport(a.scenario_hash, a.setup, b.setup)
    for s in SLICE_ORDER:
        k = s.value
        pa, pb = a.p50[k][-1], b.p50[k][-1]
        va, vb = a.violation_rate(s), b.violation_rate(s)
        dp, dv = _delta(pa, pb), _delta(va, vb)
        report.slices[k] = SliceComparison(k, pa, pb, dp, va, vb, dv, _winner(dp), _winner(dv))
    return report


# export ------------------------------------------------------------------------

SUMMARY_COLUMNS = (
    "window", "start", "stop", "slice_id", "samples", "violations", "violation_rate",
    "p50", "p95", "p99", "reward_mean",
)


def summary_to_csv(summary: RunSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["# schema_version", SCHEMA_VERSION, "scenario_hash", summary.scenario_hash,
                "setup", summary.setup, "seed", summary.seed, "total_slots", summary.total_slots])
    w.writerow(SUMMARY_COLUMNS)
    for i, (start, stop) in enumerate(summary.windows):
        for s in SLICE_ORDER:
            k = s.value
            n, v = summary.samples[k][i], summary.violations[k][i]
            w.writerow([i, start, stop, k, n, v, repr(v / max(1, n)), repr(summary.p50[k][i]),
                        repr(summary.p95[k][i]), repr(summary.p99[k][i]), repr(summary.reward_mean[i])])
    return buf.getvalue()


def summary_from_csv(text: str) -> RunSummary:
    rows = list(csv.reader(io.StringIO(text)))
    meta = rows[0]
    if meta[:2] != ["# schema_version", str(SCHEMA_VERSION)]:
        raise ValueError("not a summary CSV of a supported schema version")
    if tuple(rows[1]) != SUMMARY_COLUMNS:
        raise ValueError(f"summary CSV must have columns {SUMMARY_COLUMNS}")
    names = [s.value for s in SLICE_ORDER]
    out = {k: {n: [] for n in names} for k in ("p50", "p95", "p99", "samples", "violations")}
    windows, rewards = [], []
    for row in rows[2:]:
        rec = dict(zip(SUMMARY_COLUMNS, row))
        i = int(rec["window"])
        if i == len(windows):
            windows.append((int(rec["start"]), int(rec["stop"])))
            rewards.append(float(rec["reward_mean"]))
        k = rec["slice_id"]
        out["samples"][k].append(int(rec["samples"]))
        out["violations"][k].append(int(rec["violations"]))
        for p in ("p50", "p95", "p99"):
            out[p][k].append(float(rec[p]))
    return RunSummary(meta[3], meta[5], int(meta[7]), int(meta[9]), windows,
                      out["p50"], out["p95"], out["p99"], out["samples"], out["violations"], rewards)


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise LogIOError(f"cannot write {path}: {exc.strerror or exc}") from exc


def export_summary(summary: RunSummary, fmt: str, path: str | Path) -> None:
    path = Path(path)
    if fmt == "json":
        _write(path, json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        _write(path, summary_to_csv(summary))
    else:
        raise ValueError(f"unknown export format {fmt!r}")


def import_summary(path: str | Path) -> RunSummary:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LogIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if path.suffix == ".csv":
        return summary_from_csv(text)
    return RunSummary.from_dict(json.loads(text))


def export_log(log: LoadedLog | str | Path, fmt: str, path: str | Path, window_count: int = 100) -> list[Path]:
    """Flat export of a run log.

    ``json``: one document with the manifest and every stream.
    ``csv``: the per-message table at ``path`` plus a windowed per-slice
    latency series next to it (``<stem>_windows.csv``).
    """
    if not isinstance(log, LoadedLog):
        log = read_log(log)
    path = Path(path)
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION, "manifest": log.manifest,
               "streams": {name: [{k: _fmt(v) for k, v in r.items()} for r in log.rows(name)]
                           for name in STREAMS}}
        _write(path, json.dumps(doc, sort_keys=True) + "\n")
        return [path]
    if fmt != "csv":
        raise ValueError(f"unknown export format {fmt!r}")
    src = log.path / "messages.csv"
    try:
        _write(path, src.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LogIOError(f"cannot read {src}: {exc.strerror or exc}") from exc
    written = [path]
    if log.status == "complete":
        total = int(log.run["total_slots"])
        summary = summarize(log, min(window_count, total))
        series = path.with_name(f"{path.stem}_windows.csv")
        _write(series, summary_to_csv(summary))
        written.append(series)
    return written
