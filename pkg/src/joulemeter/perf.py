"""Performance-counter collection: average active cores and memory activity.

Two metrics feed the power models: the task-clock software event (CPU
nanoseconds aggregated across all cores, divided by wall time to get
average active cores) and last-level-cache misses (misses per second as
the memory-activity proxy).  Counters are 64-bit and cannot plausibly
wrap, so each is read once at attach and once at the end; no sampling.

Counters are opened with the ``perf_event_open`` syscall directly (there
is no portable stdlib wrapper) with ``inherit`` set, so children of the
target are included.  Machines or containers without a PMU still get
task-clock numbers through the rusage fallback; records then carry the
counter source so nothing is silently fabricated.  Event codes are
configuration: the generic last-level cache-miss event is only a default.

Privilege and event requirements are listed in ``docs/PLATFORM.md``.
"""

from __future__ import annotations

import ctypes
import os
import platform
import struct
from dataclasses import dataclass, field

PERF_TYPE_HARDWARE = 0
PERF_TYPE_SOFTWARE = 1

PERF_COUNT_HW_CACHE_REFERENCES = 2
PERF_COUNT_HW_CACHE_MISSES = 3
PERF_COUNT_SW_TASK_CLOCK = 0

PERF_FORMAT_TOTAL_TIME_ENABLED = 1 << 0
PERF_FORMAT_TOTAL_TIME_RUNNING = 1 << 1

_SYSCALL_NR = {
    "x86_64": 298,
    "aarch64": 241,
    "arm": 364,
    "ppc64le": 319,
    "riscv64": 241,
}

_FLAG_DISABLED = 1 << 0
_FLAG_INHERIT = 1 << 1
_FLAG_EXCLUDE_KERNEL = 1 << 5

_NS_PER_S = 10**9


class PerfError(RuntimeError):
    """Counter setup or read failure."""


class PrivilegeError(PerfError):
    """The kernel denied the event; the message says what to change."""


class EventUnavailableError(PerfError):
    """This machine (or container) does not provide the event."""


@dataclass(frozen=True)
class EventSpec:
    """One perf event: kernel type/config pair plus a readable name."""

    type: int
    config: int
    name: str


TASK_CLOCK = EventSpec(PERF_TYPE_SOFTWARE, PERF_COUNT_SW_TASK_CLOCK, "task-clock")
LLC_MISSES = EventSpec(PERF_TYPE_HARDWARE, PERF_COUNT_HW_CACHE_MISSES, "llc-misses")
LLC_REFERENCES = EventSpec(
    PERF_TYPE_HARDWARE, PERF_COUNT_HW_CACHE_REFERENCES, "llc-references"
)

# Task-clock is mandatory; the cache events degrade to "not measured" where
# the PMU is absent.  Kept at three events so the kernel never multiplexes.
DEFAULT_EVENTS = (TASK_CLOCK, LLC_MISSES, LLC_REFERENCES)


@dataclass(frozen=True)
class PerfCounters:
    """Raw counter values for one run, with measurement caveats.

    ``llc_misses``/``llc_references`` are None when the platform could not
    provide the event; ``multiplexed`` is True when the kernel timeshared a
    counter (values are then an accuracy caveat, never silently rescaled).
    """

    task_clock_ns: int
    llc_misses: int | None = None
    llc_references: int | None = None
    multiplexed: bool = False
    source: str = "perf"
    caveats: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.task_clock_ns < 0:
            raise PerfError(f"negative task-clock {self.task_clock_ns}")
        if (
            self.llc_misses is not None
            and self.llc_references is not None
            and self.llc_misses > self.llc_references
        ):
            raise PerfError(
                f"llc_misses {self.llc_misses} exceeds llc_references "
                f"{self.llc_references}"
            )


@dataclass(frozen=True)
class UsageSummary:
    """Derived usage metrics: average active cores and memory activity."""

    avg_active_cores: float
    memory_activity: float | None  # LLC misses per second


def average_active_cores(task_clock_ns: int, wall_time_ns: int) -> float:
    """Average number of active cores: task-clock over wall time."""
    if wall_time_ns <= 0:
        raise PerfError(f"wall time must be positive, got {wall_time_ns} ns")
    return task_clock_ns / wall_time_ns


def memory_activity(llc_misses: int, wall_time_s: float) -> float:
    """Memory activity proxy: LLC misses per second."""
    if wall_time_s <= 0:
        raise PerfError(f"wall time must be positive, got {wall_time_s} s")
    return llc_misses / wall_time_s


def summarize(counters: PerfCounters, wall_time_s: float) -> UsageSummary:
    return UsageSummary(
        avg_active_cores=average_active_cores(
            counters.task_clock_ns, round(wall_time_s * _NS_PER_S)
        ),
        memory_activity=(
            memory_activity(counters.llc_misses, wall_time_s)
            if counters.llc_misses is not None
            else None
        ),
    )


def counters_from_rusage(utime_s: float, stime_s: float) -> PerfCounters:
    """Degraded counter source from child rusage (no PMU required).

    CPU time of the waited-for child tree stands in for task-clock; cache
    events are unavailable on this path.
    """
    return PerfCounters(
        task_clock_ns=round((utime_s + stime_s) * _NS_PER_S),
        source="rusage",
        caveats=("cache events unavailable: counters derived from rusage",),
    )


# ---------------------------------------------------------------------------
# perf_event_open plumbing


class _perf_event_attr(ctypes.Structure):
    _fields_ = [
        ("type", ctypes.c_uint32),
        ("size", ctypes.c_uint32),
        ("config", ctypes.c_uint64),
        ("sample_period", ctypes.c_uint64),
        ("sample_type", ctypes.c_uint64),
        ("read_format", ctypes.c_uint64),
        ("flags", ctypes.c_uint64),
        ("wakeup_events", ctypes.c_uint32),
        ("bp_type", ctypes.c_uint32),
        ("bp_addr", ctypes.c_uint64),
        ("bp_len", ctypes.c_uint64),
        ("reserved", ctypes.c_uint64 * 4),
    ]


_libc = ctypes.CDLL(None, use_errno=True)


def _perf_event_open(attr: _perf_event_attr, pid: int) -> int:
    nr = _SYSCALL_NR.get(platform.machine())
    if nr is None:
        raise EventUnavailableError(
            f"perf_event_open syscall number unknown for {platform.machine()}"
        )
    ctypes.set_errno(0)
    fd = _libc.syscall(nr, ctypes.byref(attr), pid, -1, -1, 0)
    if fd >= 0:
        return fd
    err = ctypes.get_errno()
    if err in (13, 1):  # EACCES, EPERM
        raise PrivilegeError(
            "perf_event_open denied; lower kernel.perf_event_paranoid to <= 2, "
            "or run with CAP_PERFMON / as root"
        )
    if err in (2, 19, 95):  # ENOENT, ENODEV, EOPNOTSUPP
        raise EventUnavailableError(
            f"event not provided by this machine (errno {err}: {os.strerror(err)})"
        )
    raise PerfError(f"perf_event_open failed: {os.strerror(err)}")


def _open_event(event: EventSpec, pid: int) -> int:
    attr = _perf_event_attr()
    attr.type = event.type
    attr.size = ctypes.sizeof(attr)
    attr.config = event.config
    attr.read_format = PERF_FORMAT_TOTAL_TIME_ENABLED | PERF_FORMAT_TOTAL_TIME_RUNNING
    attr.flags = _FLAG_INHERIT
    try:
        return _perf_event_open(attr, pid)
    except PrivilegeError:
        # Retry excluding kernel counts; permitted under stricter paranoid
        # settings.  The exclusion is recorded as a caveat by the caller.
        attr.flags = _FLAG_INHERIT | _FLAG_EXCLUDE_KERNEL
        return _perf_event_open(attr, pid)


def events_available(events: tuple[EventSpec, ...] = (TASK_CLOCK,)) -> bool:
    """Probe whether the given events can be opened on this process."""
    try:
        for event in events:
            os.close(_open_event(event, 0))
        return True
    except PerfError:
        return False


class CounterGroup:
    """Per-target counter handles, attached before the workload executes.

    ``inherit`` makes the counts cover the target and all its children.
    Attach while the target is stopped pre-exec so no work is missed.
    """

    def __init__(self, fds: dict[str, int], missing: tuple[str, ...]):
        self._fds = fds
        self._missing = missing
        self._closed = False

    @classmethod
    def attach(
        cls, pid: int, events: tuple[EventSpec, ...] = DEFAULT_EVENTS
    ) -> "CounterGroup":
        """Open counters on ``pid``; optional cache events may be missing.

        Raises :class:`PrivilegeError` if the kernel refuses outright, and
        :class:`EventUnavailableError` if even task-clock does not exist.
        """
        fds: dict[str, int] = {}
        missing: list[str] = []
        try:
            for event in events:
                try:
                    fds[event.name] = _open_event(event, pid)
                except EventUnavailableError:
                    if event.name == TASK_CLOCK.name:
                        raise
                    missing.append(event.name)
        except PerfError:
            for fd in fds.values():
                os.close(fd)
            raise
        return cls(fds, tuple(missing))

    def _read_fd(self, fd: int) -> tuple[int, int, int]:
        data = os.read(fd, 24)
        if len(data) != 24:
            raise PerfError("short perf counter read")
        return struct.unpack("QQQ", data)  # value, time_enabled, time_running

    def read(self) -> PerfCounters:
        """Read all counters once, detecting multiplexing."""
        if self._closed:
            raise PerfError("counter group already closed")
        values: dict[str, int] = {}
        multiplexed = False
        caveats = [f"{name} event unavailable on this machine" for name in self._missing]
        for name, fd in self._fds.items():
            value, enabled, running = self._read_fd(fd)
            values[name] = value
            if running < enabled:
                multiplexed = True
                caveats.append(f"{name} was multiplexed ({running}/{enabled} ns live)")
        misses = values.get(LLC_MISSES.name)
        references = values.get(LLC_REFERENCES.name)
        if misses is not None and references is not None and misses > references:
            caveats.append(
                f"dropped llc_references ({references} < {misses} misses; "
                "multiplexing artifact)"
            )
            references = None
        return PerfCounters(
            task_clock_ns=values[TASK_CLOCK.name],
            llc_misses=misses,
            llc_references=references,
            multiplexed=multiplexed,
            caveats=tuple(caveats),
        )

    def close(self) -> None:
        if not self._closed:
            for fd in self._fds.values():
                try:
                    os.close(fd)
                except OSError:
                    pass
            self._closed = True

    def __enter__(self) -> "CounterGroup":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()
