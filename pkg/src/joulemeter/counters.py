"""Overflow-safe arithmetic for RAPL energy-status counters.

Energy-status counters are 32-bit tick counts embedded in the low bits of a
64-bit register; the upper bits are reserved and must be discarded.  All
accounting here stays in integer ticks: deltas between consecutive readings
are taken modulo 2^32 (so a single wraparound between readings is handled
correctly), tick deltas are summed as unsigned 64-bit totals, and the tick
total is converted to joules exactly once at the end.  Nothing in this
module touches hardware; it is pure value arithmetic, safe from any thread.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping

COUNTER_BITS = 32
COUNTER_MASK = (1 << COUNTER_BITS) - 1
COUNTER_MODULUS = 1 << COUNTER_BITS

# Energy-status-unit bit field within the power-unit register.  Offset 8,
# width 5 matches the documented register layout on every RAPL generation to
# date, but stays overridable so simulated or future layouts can differ.
UNIT_FIELD_OFFSET = 8
UNIT_FIELD_WIDTH = 5


class CounterError(ValueError):
    """A counter-stream precondition was violated."""


class Domain(enum.Enum):
    """Counter addresses: the two energy domains plus the unit register."""

    PKG = "pkg"
    DRAM = "dram"
    POWER_UNIT = "power_unit"

    def __str__(self) -> str:
        return self.value


#: Domains that carry an energy-status counter (POWER_UNIT does not).
ENERGY_DOMAINS = (Domain.PKG, Domain.DRAM)

#: One sample stream is identified by (domain, package_index).
StreamKey = tuple[Domain, int]


def mask_register(raw_register: int) -> int:
    """Keep only the low 32 bits of a raw 64-bit register read.

    The upper bits of an energy-status register are reserved and carry no
    count information; including them corrupts the accounting.
    """
    return raw_register & COUNTER_MASK


def tick_delta(prev: int, curr: int) -> int:
    """Wraparound-correct difference between two consecutive 32-bit readings.

    Returns ``(curr - prev) mod 2^32``, always in ``[0, 2^32)``.  Correct
    whenever at most one wraparound occurred between the readings; the
    sampler's period bound is responsible for that precondition, not this
    function.
    """
    return (curr - prev) % COUNTER_MODULUS


@dataclass(frozen=True)
class EnergyUnit:
    """Energy scale of one counter tick: ``2^(-raw_unit_field)`` joules.

    ``joules_per_tick`` is derived, never stored, so the power-of-two
    relationship holds exactly by construction.
    """

    raw_unit_field: int

    def __post_init__(self) -> None:
        if not 1 <= self.raw_unit_field <= 30:
            raise CounterError(
                f"implausible energy-status unit exponent {self.raw_unit_field}: "
                f"one tick would be 2^-{self.raw_unit_field} J; plausible hardware "
                "units lie strictly between 2^-31 J and 1 J"
            )

    @property
    def joules_per_tick(self) -> float:
        return 2.0 ** -self.raw_unit_field


def decode_unit(
    raw_power_unit_register: int,
    *,
    field_offset: int = UNIT_FIELD_OFFSET,
    field_width: int = UNIT_FIELD_WIDTH,
) -> EnergyUnit:
    """Extract the energy-status unit from a raw power-unit register value.

    The bit position of the unit field is a hardware contract, so it is
    taken as configuration rather than hardcoded.  Raises
    :class:`CounterError` if the decoded exponent implies an implausible
    tick size (>= 1 J or <= 2^-31 J).
    """
    exponent = (raw_power_unit_register >> field_offset) & ((1 << field_width) - 1)
    return EnergyUnit(exponent)


@dataclass(frozen=True)
class EnergySample:
    """One timestamped raw 32-bit reading from one counter stream.

    ``timestamp_ns`` is monotonic nanoseconds since session start; ``raw``
    is the masked 32-bit tick count.
    """

    timestamp_ns: int
    domain: Domain
    package_index: int
    raw: int

    def __post_init__(self) -> None:
        if self.domain not in ENERGY_DOMAINS:
            raise CounterError(f"{self.domain} is not an energy domain")
        if self.package_index < 0:
            raise CounterError(f"negative package index {self.package_index}")
        if not 0 <= self.raw <= COUNTER_MASK:
            raise CounterError(f"raw value {self.raw:#x} does not fit in 32 bits")

    @property
    def stream(self) -> StreamKey:
        return (self.domain, self.package_index)


@dataclass(frozen=True)
class EnergyTotal:
    """Accumulated energy of one stream or one domain.

    ``joules`` is ``ticks * joules_per_tick``, computed exactly once from
    the integer tick total; it can never be negative.
    """

    domain: Domain
    ticks: int
    joules: float

    def __post_init__(self) -> None:
        if self.ticks < 0:
            raise CounterError(f"negative tick total {self.ticks}")
        if self.joules < 0:
            raise CounterError(f"negative energy {self.joules} J")


def _stream_name(stream: StreamKey) -> str:
    domain, package = stream
    return f"{domain.value}:{package}"


def accumulate(
    samples: Iterable[EnergySample], unit: EnergyUnit
) -> dict[StreamKey, EnergyTotal]:
    """Accumulate sample streams into per-(domain, package) energy totals.

    Consecutive raw readings are differenced with :func:`tick_delta` and the
    deltas summed as integers; the float conversion to joules happens once
    per stream at the end.  Integer summation is associative, so chunked
    accumulation over sub-ranges sharing boundary samples equals one-shot
    accumulation.

    Raises :class:`CounterError` for a stream with fewer than two samples or
    with non-increasing timestamps, naming the offending stream.
    """
    streams: dict[StreamKey, list[EnergySample]] = {}
    for sample in samples:
        streams.setdefault(sample.stream, []).append(sample)

    totals: dict[StreamKey, EnergyTotal] = {}
    for stream, stream_samples in streams.items():
        if len(stream_samples) < 2:
            raise CounterError(
                f"stream {_stream_name(stream)} has {len(stream_samples)} sample(s); "
                "at least 2 are required to form a delta"
            )
        ticks = 0
        prev = stream_samples[0]
        for curr in stream_samples[1:]:
            if curr.timestamp_ns <= prev.timestamp_ns:
                raise CounterError(
                    f"stream {_stream_name(stream)} timestamps are not strictly "
                    f"increasing: {prev.timestamp_ns} then {curr.timestamp_ns}"
                )
            ticks += tick_delta(prev.raw, curr.raw)
            prev = curr
        totals[stream] = EnergyTotal(stream[0], ticks, ticks * unit.joules_per_tick)
    return totals


def domain_totals(
    stream_totals: Mapping[StreamKey, EnergyTotal], unit: EnergyUnit
) -> dict[Domain, EnergyTotal]:
    """Sum per-stream totals across packages within each domain.

    Joules are recomputed from the summed integer ticks so the single float
    conversion per total is preserved.  Domains are never summed together;
    PKG and DRAM remain separate quantities.
    """
    ticks_by_domain: dict[Domain, int] = {}
    for (domain, _package), total in stream_totals.items():
        ticks_by_domain[domain] = ticks_by_domain.get(domain, 0) + total.ticks
    return {
        domain: EnergyTotal(domain, ticks, ticks * unit.joules_per_tick)
        for domain, ticks in ticks_by_domain.items()
    }
