"""Per-round transfer records, CSV persistence and latency summaries."""

from __future__ import annotations

import csv
import io
import json
import math
import threading
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

CSV_COLUMNS = (
    "round", "worker_id", "direction", "latency_s", "passes", "tolerance",
    "clr_active", "burst", "chunks_total", "chunks_received",
)


class EmptyRecords(ValueError):
    pass


class Direction(str, Enum):
    W2S = "W2S"
    S2W = "S2W"


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    worker_id: int
    direction: Direction
    send_latency: float
    passes: int
    tolerance: float
    clr_active: bool
    burst_round: bool
    chunks_total: int
    chunks_received: int

    def row(self) -> list[str]:
        return [
            str(self.round), str(self.worker_id), self.direction.value, repr(float(self.send_latency)),
            str(self.passes), repr(float(self.tolerance)), str(int(self.clr_active)),
            str(int(self.burst_round)), str(self.chunks_total), str(self.chunks_received),
        ]

    @classmethod
    def from_row(cls, row: dict) -> RoundMetrics:
        return cls(
            int(row["round"]), int(row["worker_id"]), Direction(row["direction"]), float(row["latency_s"]),
            int(row["passes"]), float(row["tolerance"]), row["clr_active"] == "1", row["burst"] == "1",
            int(row["chunks_total"]), int(row["chunks_received"]),
        )


class MetricsCollector:
    """Serialized sink for records appended by concurrent handlers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[RoundMetrics] = []

    def append(self, rec: RoundMetrics) -> None:
        with self._lock:
            self._records.append(rec)

    @property
    def records(self) -> list[RoundMetrics]:
        with self._lock:
            return sorted(self._records, key=lambda r: (r.round, r.direction.value != "W2S", r.worker_id))


def to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def write_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        f.write(to_csv(records))


def read_csv(path) -> list[RoundMetrics]:
    with open(path, newline="") as f:
        return [RoundMetrics.from_row(row) for row in csv.DictReader(f)]


@dataclass
class LatencySummary:
    count: int
    average: float
    tail: float
    p99: float
    bursts: dict[int, float] = field(default_factory=dict)
    speedups: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bursts"] = {str(k): v for k, v in self.bursts.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self, label: str = "") -> str:
        lines = [f"{label} send latency over {self.count} transfers".strip(),
                 f"  average  {self.average:.6f} s",
                 f"  tail     {self.tail:.6f} s",
                 f"  p99      {self.p99:.6f} s"]
        for r, v in sorted(self.bursts.items()):
            lines.append(f"  burst@{r:<4d} {v:.6f} s")
        for k, v in self.speedups.items():
            lines.append(f"  speedup {k}: {v:.2f}x")
        return "\n".join(lines)


def _per_burst(records) -> dict[int, float]:
    out: dict[int, float] = {}
    for r in records:
        if r.burst_round:
            out[r.round] = max(out.get(r.round, 0.0), r.send_latency)
    return out


def summarize(records, comparison_records=None) -> LatencySummary:
    """Average, tail (max) and p99 of send latency, plus speedups vs a comparison run.

    Speedups are ``comparison / self`` for the average, the tail and each
    burst round present in both runs.
    """
    records = list(records)
    if not records:
        raise EmptyRecords("no records to summarize")
    lat = np.sort(np.array([r.send_latency for r in records], dtype=np.float64))
    s = LatencySummary(
        count=len(lat),
        average=float(math.fsum(lat) / len(lat)),
        tail=float(lat[-1]),
        p99=float(np.percentile(lat, 99)),
        bursts=_per_burst(records),
    )
    if comparison_records is not None:
        other = summarize(comparison_records)
        s.speedups["average"] = other.average / s.average
        s.speedups["tail"] = other.tail / s.tail
        for rnd, v in s.bursts.items():
            if rnd in other.bursts:
                s.speedups[f"burst@{rnd}"] = other.bursts[rnd] / v
    return s


def cdf(records) -> list[tuple[float, float]]:
    """Empirical CDF as ``(latency, k/n)`` points, one per distinct latency."""
    lat = sorted(r.send_latency if isinstance(r, RoundMetrics) else float(r) for r in records)
    if not lat:
        raise EmptyRecords("no records for a CDF")
    n = len(lat)
    pts = []
    for k, v in enumerate(lat, 1):
        if pts and pts[-1][0] == v:
            pts[-1] = (v, k / n)
        else:
            pts.append((v, k / n))
    return pts
