"""Measurement records and their on-disk formats.

One record per benchmark run, including failed runs: a run that could not
be measured produces a failure record with the error and a capped stderr
tail, never a silent omission.  Records append to a JSON-lines log (one
self-contained object per line) and export to CSV with a fixed column
contract for the analysis stages.  Power and core-usage figures are
derived properties, recomputed from the stored joules, wall time, and
task-clock, so the product identities hold exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .counters import Domain

#: Fixed CSV export contract, in order.
CSV_COLUMNS = (
    "benchmark",
    "language_impl",
    "repetition",
    "wall_time_s",
    "pkg_joules",
    "dram_joules",
    "pkg_watts",
    "dram_watts",
    "avg_cores",
    "llc_misses",
    "task_clock_ns",
    "exit_status",
)

STDERR_TAIL_LIMIT = 8192  # bytes kept from a failing run's stderr


class RecordError(ValueError):
    """A record or record file is malformed."""


@dataclass(frozen=True)
class EnvironmentFingerprint:
    """Read-only snapshot of measurement-relevant machine state.

    ``controlled`` is True only when the frequency is pinned and turbo is
    off; None means the platform state could not be determined.
    """

    governor: str | None = None
    turbo_enabled: bool | None = None
    frequency_pinned: bool | None = None
    cpu_count: int | None = None
    machine_id: str | None = None
    load_1m: float | None = None
    process_count: int | None = None

    @property
    def controlled(self) -> bool | None:
        if self.turbo_enabled is None or self.frequency_pinned is None:
            return None
        return self.frequency_pinned and not self.turbo_enabled


@dataclass(frozen=True)
class MeasurementRecord:
    """Everything measured or observed in one benchmark run."""

    benchmark: str
    language_impl: str
    repetition: int
    in_process_iterations: int = 1
    wall_time_s: float | None = None
    pkg_joules: float | None = None
    dram_joules: float | None = None
    per_package_joules: dict[str, float] = field(default_factory=dict)
    task_clock_ns: int | None = None
    llc_misses: int | None = None
    llc_references: int | None = None
    perf_source: str | None = None
    multiplexed: bool = False
    exit_status: int | None = None
    error: str | None = None
    stderr_tail: str | None = None
    cpuset: tuple[int, ...] | None = None
    started_at_unix: float | None = None
    backend: str | None = None
    sampling_period_s: float | None = None
    environment: EnvironmentFingerprint | None = None
    caveats: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.repetition < 0:
            raise RecordError(f"negative repetition {self.repetition}")
        if self.in_process_iterations < 1:
            raise RecordError("in_process_iterations must be >= 1")
        if self.wall_time_s is not None and not self.wall_time_s > 0:
            raise RecordError(f"wall_time_s must be positive, got {self.wall_time_s}")

    @property
    def record_id(self) -> str:
        return (
            f"{self.benchmark}/{self.language_impl}"
            f"#r{self.repetition}n{self.in_process_iterations}"
        )

    @property
    def ok(self) -> bool:
        return self.error is None and self.exit_status == 0

    def _watts(self, joules: float | None) -> float | None:
        if joules is None or self.wall_time_s is None:
            return None
        return joules / self.wall_time_s

    @property
    def pkg_watts(self) -> float | None:
        return self._watts(self.pkg_joules)

    @property
    def dram_watts(self) -> float | None:
        return self._watts(self.dram_joules)

    @property
    def avg_cores(self) -> float | None:
        if self.task_clock_ns is None or not self.wall_time_s:
            return None
        return self.task_clock_ns / (self.wall_time_s * 1e9)

    @property
    def memory_activity(self) -> float | None:
        """LLC misses per second, when cache events were measured."""
        if self.llc_misses is None or not self.wall_time_s:
            return None
        return self.llc_misses / self.wall_time_s

    def joules_for(self, domain: Domain) -> float | None:
        return self.pkg_joules if domain == Domain.PKG else self.dram_joules

    def watts_for(self, domain: Domain) -> float | None:
        return self.pkg_watts if domain == Domain.PKG else self.dram_watts

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["cpuset"] = list(self.cpuset) if self.cpuset is not None else None
        data["caveats"] = list(self.caveats)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "MeasurementRecord":
        data = dict(data)
        if data.get("environment") is not None:
            data["environment"] = EnvironmentFingerprint(**data["environment"])
        if data.get("cpuset") is not None:
            data["cpuset"] = tuple(data["cpuset"])
        data["caveats"] = tuple(data.get("caveats", ()))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise RecordError(f"unknown record fields: {sorted(unknown)}")
        return cls(**data)


def write_records(records: Iterable[MeasurementRecord], path: str | Path) -> None:
    """Append records to a JSON-lines log."""
    path = Path(path)
    with path.open("a") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def iter_records(path: str | Path) -> Iterator[MeasurementRecord]:
    """Yield records from a JSON-lines log."""
    path = Path(path)
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield MeasurementRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError, RecordError) as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from exc


def _cell(value: object) -> str:
    return "" if value is None else str(value)


def export_csv(records: Iterable[MeasurementRecord], path: str | Path) -> None:
    """Write the fixed-column CSV export."""
    import csv

    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.benchmark,
                    r.language_impl,
                    r.repetition,
                    _cell(r.wall_time_s),
                    _cell(r.pkg_joules),
                    _cell(r.dram_joules),
                    _cell(r.pkg_watts),
                    _cell(r.dram_watts),
                    _cell(r.avg_cores),
                    _cell(r.llc_misses),
                    _cell(r.task_clock_ns),
                    _cell(r.exit_status),
                ]
            )


def _parse(cell: str, kind: type) -> object | None:
    if cell == "":
        return None
    return kind(cell)


def records_from_csv(path: str | Path) -> list[MeasurementRecord]:
    """Rebuild partial records from a CSV export.

    The CSV carries the analysis columns only; fields like iteration counts
    and environment fingerprints are absent, so confound checks that need
    them report "not evaluated" instead of guessing.
    """
    import csv

    records = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise RecordError(f"{path}: missing CSV columns {sorted(missing)}")
        for row in reader:
            wall = _parse(row["wall_time_s"], float)
            task_clock = _parse(row["task_clock_ns"], int)
            avg_cores = _parse(row["avg_cores"], float)
            if task_clock is None and avg_cores is not None and wall:
                task_clock = round(avg_cores * wall * 1e9)
            records.append(
                MeasurementRecord(
                    benchmark=row["benchmark"],
                    language_impl=row["language_impl"],
                    repetition=int(row["repetition"]),
                    wall_time_s=wall,
                    pkg_joules=_parse(row["pkg_joules"], float),
                    dram_joules=_parse(row["dram_joules"], float),
                    task_clock_ns=task_clock,
                    llc_misses=_parse(row["llc_misses"], int),
                    exit_status=_parse(row["exit_status"], int),
                )
            )
    return records
