"""Measurement sessions: periodic counter sampling around a workload.

A session samples every configured stream once at start, then periodically
from a dedicated thread, then once more at stop, so every stream always has
at least two samples.  The period is validated at start against the
anti-wraparound bound: with a credible peak power of P_max, per-interval
tick advances stay below 2^32 whenever
``P_max * period / joules_per_tick < 2^32``, which is exactly the
precondition the counter arithmetic needs.  The sampling thread does
nothing per tick beyond the counter reads and a list append.

When a run is driven against the simulated backend, :meth:`Session.run_virtual`
walks the same sampling schedule synchronously on the virtual timeline, so a
300 s measurement completes in milliseconds with identical arithmetic.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from .backends import Backend, CounterAddress
from .counters import (
    COUNTER_MODULUS,
    Domain,
    EnergySample,
    EnergyTotal,
    EnergyUnit,
    StreamKey,
    accumulate,
    decode_unit,
    domain_totals,
    mask_register,
)

logger = logging.getLogger(__name__)

_NS_PER_S = 10**9


class SessionError(RuntimeError):
    """Session lifecycle misuse or start-time configuration failure."""


@dataclass(frozen=True)
class SessionConfig:
    """Sampling parameters for one measurement session.

    ``domains=None`` records every energy domain the backend reports.
    ``max_power_w`` is the credible peak power used for the anti-wraparound
    bound; the generous 10 kW default keeps the 1 s period valid on any
    plausible unit exponent while still rejecting nonsense configurations.
    """

    period_s: float = 1.0
    domains: tuple[Domain, ...] | None = None
    max_power_w: float = 10_000.0

    def __post_init__(self) -> None:
        if not self.period_s > 0:
            raise SessionError(f"sampling period must be positive, got {self.period_s}")
        if not self.max_power_w > 0:
            raise SessionError(f"max power must be positive, got {self.max_power_w}")


@dataclass(frozen=True)
class SessionResult:
    """Immutable outcome of one session: raw streams plus timing."""

    streams: dict[StreamKey, tuple[EnergySample, ...]]
    unit: EnergyUnit
    start_ns: int
    end_ns: int

    @property
    def wall_time_s(self) -> float:
        return (self.end_ns - self.start_ns) / _NS_PER_S

    def energy(self) -> dict[StreamKey, EnergyTotal]:
        """Per-(domain, package) accumulated energy."""
        all_samples = [s for stream in self.streams.values() for s in stream]
        return accumulate(all_samples, self.unit)

    def energy_by_domain(self) -> dict[Domain, EnergyTotal]:
        """Per-domain machine totals (packages summed, domains kept apart)."""
        return domain_totals(self.energy(), self.unit)


class Session:
    """One measurement session over one backend.

    Use either ``start()``/``stop()`` around a real workload, or
    ``run_virtual(duration_s)`` to drive the whole schedule synchronously
    on a simulated timeline.  A session object is single-use.
    """

    def __init__(self, backend: Backend, config: SessionConfig | None = None):
        self.backend = backend
        self.config = config or SessionConfig()
        self._samples: dict[StreamKey, list[EnergySample]] = {}
        self._addresses: tuple[CounterAddress, ...] = ()
        self._unit: EnergyUnit | None = None
        self._thread: threading.Thread | None = None
        self._stop_event = threading.Event()
        self._thread_error: BaseException | None = None
        self._started = False
        self._stopped = False
        self._start_monotonic_ns = 0

    def _prepare(self) -> None:
        unit_raw = self.backend.read(CounterAddress(Domain.POWER_UNIT, 0), 0)
        self._unit = decode_unit(unit_raw)

        # Anti-wraparound bound, checked here so a bad period fails loudly
        # at start instead of corrupting totals later.
        max_interval_ticks = (
            self.config.max_power_w * self.config.period_s / self._unit.joules_per_tick
        )
        if max_interval_ticks >= COUNTER_MODULUS:
            capacity_j = COUNTER_MODULUS * self._unit.joules_per_tick
            raise SessionError(
                f"period {self.config.period_s} s can wrap the 32-bit counter at "
                f"{self.config.max_power_w} W (counter capacity {capacity_j:.0f} J "
                f"at unit 2^-{self._unit.raw_unit_field} J/tick); shorten the period "
                "or lower max_power_w"
            )

        topology = self.backend.enumerate_topology()
        if self.config.domains is None:
            self._addresses = topology
        else:
            self._addresses = tuple(
                a for a in topology if a.domain in self.config.domains
            )
            missing = set(self.config.domains) - {a.domain for a in self._addresses}
            if missing:
                names = ", ".join(sorted(d.value for d in missing))
                raise SessionError(f"requested domain(s) not available: {names}")
        self._samples = {(a.domain, a.package_index): [] for a in self._addresses}

    def _sample_all(self, at_ns: int) -> None:
        for address in self._addresses:
            raw = mask_register(self.backend.read(address, at_ns))
            self._samples[(address.domain, address.package_index)].append(
                EnergySample(at_ns, address.domain, address.package_index, raw)
            )

    # -- real-time path ----------------------------------------------------

    def start(self) -> "Session":
        """Take the t=0 samples and launch the periodic sampling thread."""
        if self._started:
            raise SessionError("session already started")
        self._prepare()
        self._started = True
        self._start_monotonic_ns = time.monotonic_ns()
        self._sample_all(0)
        self._thread = threading.Thread(
            target=self._run_periodic, name="joulemeter-sampler", daemon=True
        )
        self._thread.start()
        return self

    def _now_ns(self) -> int:
        return time.monotonic_ns() - self._start_monotonic_ns

    def _run_periodic(self) -> None:
        period_ns = round(self.config.period_s * _NS_PER_S)
        deadline = period_ns
        last = 0
        try:
            while True:
                wait_s = max(0, deadline - self._now_ns()) / _NS_PER_S
                if self._stop_event.wait(wait_s):
                    return
                now = self._now_ns()
                # Late wakeups sample immediately rather than skipping, so
                # intervals stay bounded; anything past 2x the period is
                # worth knowing about.
                if now - last > 2 * period_ns:
                    logger.warning(
                        "sampling interval %.3f s exceeded 2x the %.3f s period",
                        (now - last) / _NS_PER_S,
                        self.config.period_s,
                    )
                self._sample_all(now)
                last = now
                deadline += period_ns
        except BaseException as exc:  # surface at stop(), never lose samples silently
            self._thread_error = exc

    def stop(self) -> SessionResult:
        """Cease sampling, take the final samples, and freeze the result."""
        if not self._started:
            raise SessionError("session was never started")
        if self._stopped:
            raise SessionError("session already stopped")
        self._stop_event.set()
        assert self._thread is not None
        self._thread.join()
        if self._thread_error is not None:
            raise SessionError("sampling thread failed") from self._thread_error
        end_ns = self._now_ns()
        last_ts = max((s[-1].timestamp_ns for s in self._samples.values() if s), default=-1)
        if end_ns <= last_ts:
            end_ns = last_ts + 1
        self._sample_all(end_ns)
        self._stopped = True
        return self._freeze(end_ns)

    # -- virtual path --------------------------------------------------------

    def run_virtual(self, duration_s: float) -> SessionResult:
        """Drive the full sampling schedule on a virtual timeline.

        Samples fall at t = 0, period, 2*period, ... strictly before the
        duration, plus the final stop sample exactly at the duration.  No
        real time passes; reads are evaluated at the scheduled timestamps.
        """
        if self._started:
            raise SessionError("session already started")
        if not duration_s > 0:
            raise SessionError(f"duration must be positive, got {duration_s}")
        self._prepare()
        self._started = True
        duration_ns = round(duration_s * _NS_PER_S)
        period_ns = round(self.config.period_s * _NS_PER_S)
        t = 0
        while t < duration_ns:
            self._sample_all(t)
            t += period_ns
        self._sample_all(duration_ns)
        self._stopped = True
        return self._freeze(duration_ns)

    def _freeze(self, end_ns: int) -> SessionResult:
        assert self._unit is not None
        return SessionResult(
            streams={key: tuple(samples) for key, samples in self._samples.items()},
            unit=self._unit,
            start_ns=0,
            end_ns=end_ns,
        )
