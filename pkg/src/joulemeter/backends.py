"""Counter sources: privileged MSR reads and a deterministic simulator.

Both backends expose the same surface: 64-bit register reads addressed by
(domain, package) plus topology enumeration.  The hardware backend reads
model-specific registers through ``/dev/cpu/*/msr`` (the raw register path;
the kernel's sysfs energy files pre-scale values, which would change the
arithmetic under test).  The simulated backend integrates a declared
piecewise-constant power schedule exactly, so tests can be written in watts
and seconds and still assert integer-tick equality.

Register addresses and required privileges are documented in
``docs/PLATFORM.md``.
"""

from __future__ import annotations

import abc
import glob
import os
import struct
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import yaml

from .counters import (
    COUNTER_MODULUS,
    UNIT_FIELD_OFFSET,
    CounterError,
    Domain,
    EnergyUnit,
    decode_unit,
)

MSR_RAPL_POWER_UNIT = 0x606
MSR_PKG_ENERGY_STATUS = 0x611
MSR_DRAM_ENERGY_STATUS = 0x619

_REGISTER_BY_DOMAIN = {
    Domain.POWER_UNIT: MSR_RAPL_POWER_UNIT,
    Domain.PKG: MSR_PKG_ENERGY_STATUS,
    Domain.DRAM: MSR_DRAM_ENERGY_STATUS,
}

TRAJECTORY_FORMAT = "joulemeter-trajectory/1"

_NS_PER_S = 10**9


class BackendError(RuntimeError):
    """Base class for counter-source failures."""


class PrivilegeError(BackendError):
    """The OS denied access; the message names the required capability."""


class UnsupportedPlatformError(BackendError):
    """No usable RAPL support was detected on this machine."""


class UnsupportedDomainError(BackendError):
    """The requested counter does not exist here (not a read failure)."""


class ReadError(BackendError):
    """A read of a counter that should exist failed."""


class TrajectoryError(BackendError):
    """A simulated trajectory config is malformed."""


@dataclass(frozen=True)
class CounterAddress:
    """Names one readable register: a domain on one package."""

    domain: Domain
    package_index: int

    def __post_init__(self) -> None:
        if self.package_index < 0:
            raise ValueError(f"negative package index {self.package_index}")

    def __str__(self) -> str:
        return f"{self.domain.value}:{self.package_index}"


class Backend(abc.ABC):
    """A source of raw 64-bit counter register values."""

    @abc.abstractmethod
    def read(self, address: CounterAddress, at_ns: int) -> int:
        """Return the raw 64-bit register value for ``address``.

        ``at_ns`` is the session-relative monotonic timestamp of the read;
        hardware ignores it, the simulator evaluates its trajectory there.
        Energy-status values must still be masked by the caller.
        """

    @abc.abstractmethod
    def enumerate_topology(self) -> tuple[CounterAddress, ...]:
        """Stable list of available energy-counter addresses."""

    def close(self) -> None:
        pass

    def __enter__(self) -> "Backend":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


# ---------------------------------------------------------------------------
# Simulated backend


@dataclass(frozen=True)
class PowerSegment:
    """Constant power draw from ``start_ns`` until the next segment."""

    start_ns: int
    watts: float


@dataclass(frozen=True)
class StreamTrajectory:
    """Power schedule for one (domain, package) stream.

    ``start_offset_ticks`` models a counter that has been running since
    boot, so wraparound positions can be placed anywhere in a test.
    """

    domain: Domain
    package_index: int
    segments: tuple[PowerSegment, ...]
    start_offset_ticks: int = 0

    def __post_init__(self) -> None:
        if self.domain == Domain.POWER_UNIT:
            raise TrajectoryError("a trajectory stream must be an energy domain")
        if not self.segments:
            raise TrajectoryError(f"stream {self.domain.value}:{self.package_index} has no segments")
        if self.segments[0].start_ns != 0:
            raise TrajectoryError("the first power segment must start at t=0")
        prev = -1
        for segment in self.segments:
            if segment.start_ns <= prev:
                raise TrajectoryError("power segments must have strictly increasing start times")
            if not segment.watts >= 0:
                raise TrajectoryError(f"negative or non-finite power {segment.watts} W")
            prev = segment.start_ns
        if self.start_offset_ticks < 0:
            raise TrajectoryError("start_offset_ticks must be non-negative")


@dataclass(frozen=True)
class SimulatedTrajectory:
    """Full declarative description of a simulated machine."""

    unit_exponent: int
    streams: tuple[StreamTrajectory, ...]
    read_latency_ns: int = 0

    def __post_init__(self) -> None:
        EnergyUnit(self.unit_exponent)  # validates plausibility
        if not any(s.domain == Domain.PKG for s in self.streams):
            raise TrajectoryError("a trajectory must declare at least one PKG stream")
        seen = set()
        for stream in self.streams:
            key = (stream.domain, stream.package_index)
            if key in seen:
                raise TrajectoryError(f"duplicate stream {stream.domain.value}:{stream.package_index}")
            seen.add(key)
        if self.read_latency_ns < 0:
            raise TrajectoryError("read_latency_ns must be non-negative")


def _ticks_at(stream: StreamTrajectory, at_ns: int, unit_exponent: int) -> int:
    """Exact tick count of the simulated 64-bit counter at ``at_ns``.

    floor(integral of watts dt / 2^-E), evaluated in rational arithmetic so
    identical read times always give identical values.
    """
    if at_ns <= 0:
        return 0
    energy = Fraction(0)
    segments = stream.segments
    for i, segment in enumerate(segments):
        if segment.start_ns >= at_ns:
            break
        end_ns = segments[i + 1].start_ns if i + 1 < len(segments) else at_ns
        end_ns = min(end_ns, at_ns)
        energy += Fraction(segment.watts) * Fraction(end_ns - segment.start_ns, _NS_PER_S)
    return int(energy * (1 << unit_exponent))  # Fraction floor via int()


class SimulatedBackend(Backend):
    """Deterministic counter source driven by a declared power trajectory.

    Reads are pure functions of the trajectory and the read time: the
    underlying 64-bit counter is monotone and never wraps; only the low 32
    bits emulate the hardware counter, so callers mask exactly as they do
    for hardware.
    """

    def __init__(self, trajectory: SimulatedTrajectory):
        self.trajectory = trajectory
        self._streams = {
            (s.domain, s.package_index): s for s in trajectory.streams
        }
        self._topology = tuple(
            CounterAddress(s.domain, s.package_index)
            for s in sorted(
                trajectory.streams, key=lambda s: (s.domain.value, s.package_index)
            )
        )

    def read(self, address: CounterAddress, at_ns: int) -> int:
        if self.trajectory.read_latency_ns:
            time.sleep(self.trajectory.read_latency_ns / _NS_PER_S)
        if address.domain == Domain.POWER_UNIT:
            return self.trajectory.unit_exponent << UNIT_FIELD_OFFSET
        stream = self._streams.get((address.domain, address.package_index))
        if stream is None:
            raise UnsupportedDomainError(
                f"simulated machine has no {address} counter"
            )
        value = stream.start_offset_ticks + _ticks_at(
            stream, at_ns, self.trajectory.unit_exponent
        )
        return value % (1 << 64)

    def enumerate_topology(self) -> tuple[CounterAddress, ...]:
        return self._topology


def load_trajectory(path: str | Path) -> SimulatedTrajectory:
    """Load a simulated trajectory from its YAML config file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise TrajectoryError(f"cannot read trajectory file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise TrajectoryError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise TrajectoryError(f"{path}: top level must be a mapping")
    if raw.get("format") != TRAJECTORY_FORMAT:
        raise TrajectoryError(
            f"{path}: expected 'format: {TRAJECTORY_FORMAT}', got {raw.get('format')!r}"
        )
    try:
        streams = tuple(_parse_stream(entry) for entry in raw["streams"])
        return SimulatedTrajectory(
            unit_exponent=int(raw["unit_exponent"]),
            streams=streams,
            read_latency_ns=int(raw.get("read_latency_ns", 0)),
        )
    except (KeyError, TypeError, ValueError, CounterError) as exc:
        raise TrajectoryError(f"{path}: {exc}") from exc


def _parse_stream(entry: dict) -> StreamTrajectory:
    segments = []
    for seg in entry["power"]:
        if "at_ns" in seg:
            start_ns = int(seg["at_ns"])
        else:
            start_ns = round(float(seg["at_s"]) * _NS_PER_S)
        segments.append(PowerSegment(start_ns=start_ns, watts=float(seg["watts"])))
    return StreamTrajectory(
        domain=Domain(entry["domain"]),
        package_index=int(entry.get("package", 0)),
        segments=tuple(segments),
        start_offset_ticks=int(entry.get("start_offset_ticks", 0)),
    )


# ---------------------------------------------------------------------------
# Hardware backend


def _discover_packages(cpu_sysfs: str) -> dict[int, int]:
    """Map package id -> lowest cpu id in that package."""
    packages: dict[int, int] = {}
    for topo in glob.glob(os.path.join(cpu_sysfs, "cpu[0-9]*/topology/physical_package_id")):
        try:
            package = int(Path(topo).read_text())
            cpu = int(Path(topo).parent.parent.name[len("cpu"):])
        except (OSError, ValueError):
            continue
        if package not in packages or cpu < packages[package]:
            packages[package] = cpu
    return packages


class MsrBackend(Backend):
    """Raw register reads through the msr device files, one per package.

    Requires root or ``CAP_SYS_RAWIO`` plus the ``msr`` kernel module.
    DRAM counters are probed per package at open; a missing DRAM counter is
    reported as :class:`UnsupportedDomainError` rather than a read failure.
    """

    def __init__(
        self,
        msr_path_template: str = "/dev/cpu/{cpu}/msr",
        cpu_sysfs: str = "/sys/devices/system/cpu",
    ):
        self._fds: dict[int, int] = {}
        packages = _discover_packages(cpu_sysfs)
        if not packages:
            packages = {0: 0}  # single unnumbered package fallback
        for package, cpu in sorted(packages.items()):
            msr_path = msr_path_template.format(cpu=cpu)
            try:
                self._fds[package] = os.open(msr_path, os.O_RDONLY)
            except FileNotFoundError:
                raise UnsupportedPlatformError(
                    f"{msr_path} does not exist; load the msr kernel module "
                    "(modprobe msr) on an Intel RAPL-capable machine"
                ) from None
            except PermissionError:
                self.close()
                raise PrivilegeError(
                    f"permission denied opening {msr_path}; reading model-specific "
                    "registers requires root or CAP_SYS_RAWIO"
                ) from None

        # A machine without a plausible energy unit has no usable RAPL.
        try:
            unit_raw = self._read_register(min(self._fds), MSR_RAPL_POWER_UNIT)
            decode_unit(unit_raw)
        except (ReadError, CounterError) as exc:
            self.close()
            raise UnsupportedPlatformError(
                f"no usable RAPL power-unit register: {exc}"
            ) from exc

        self._topology = tuple(self._probe_topology())

    def _probe_topology(self) -> list[CounterAddress]:
        addresses = []
        for package in sorted(self._fds):
            try:
                self._read_register(package, MSR_PKG_ENERGY_STATUS)
            except ReadError as exc:
                self.close()
                raise UnsupportedPlatformError(
                    f"package {package} has no readable PKG energy counter: {exc}"
                ) from exc
            addresses.append(CounterAddress(Domain.PKG, package))
        for package in sorted(self._fds):
            try:
                self._read_register(package, MSR_DRAM_ENERGY_STATUS)
            except ReadError:
                continue  # DRAM domain absent on this package
            addresses.append(CounterAddress(Domain.DRAM, package))
        return addresses

    def _read_register(self, package: int, register: int) -> int:
        fd = self._fds.get(package)
        if fd is None:
            raise UnsupportedDomainError(f"no package {package} on this machine")
        try:
            data = os.pread(fd, 8, register)
        except PermissionError:
            raise PrivilegeError(
                "permission denied reading MSR; requires root or CAP_SYS_RAWIO"
            ) from None
        except OSError as exc:
            raise ReadError(f"reading MSR {register:#x} on package {package}: {exc}") from exc
        if len(data) != 8:
            raise ReadError(f"short read of MSR {register:#x} on package {package}")
        return struct.unpack("<Q", data)[0]

    def read(self, address: CounterAddress, at_ns: int) -> int:
        if address.domain != Domain.POWER_UNIT and address not in self._topology:
            raise UnsupportedDomainError(f"no {address} counter on this machine")
        return self._read_register(address.package_index, _REGISTER_BY_DOMAIN[address.domain])

    def enumerate_topology(self) -> tuple[CounterAddress, ...]:
        return self._topology

    def close(self) -> None:
        for fd in self._fds.values():
            try:
                os.close(fd)
            except OSError:
                pass
        self._fds = {}


def open_backend(selector: str) -> Backend:
    """Open a backend from a selector string.

    Accepted forms: ``hardware`` or ``simulated:<trajectory-file>``.
    """
    if selector == "hardware":
        return MsrBackend()
    if selector.startswith("simulated:"):
        return SimulatedBackend(load_trajectory(selector[len("simulated:"):]))
    raise BackendError(
        f"unknown backend selector {selector!r}; "
        "use 'hardware' or 'simulated:<trajectory-file>'"
    )
