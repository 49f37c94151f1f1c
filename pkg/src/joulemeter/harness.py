"""Benchmark orchestration under controlled conditions.

Runs declared benchmark commands one at a time (whole-machine energy makes
concurrent runs meaningless), each wrapped in the same protocol: spawn the
child stopped before exec, pin it to its cpuset, attach performance
counters, start the energy sampler, release the child, wait, stop, read.
Every spec x repetition yields a record; failures yield failure records
with a capped stderr tail rather than silent skips.

The environment check reports governor, turbo state, and frequency pinning
so every record carries the conditions it was measured under.  It never
mutates machine state: pinning frequencies and disabling services is the
operator's job, recorded here, not enforced.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import perf
from .backends import Backend, SimulatedBackend
from .counters import Domain
from .records import (
    STDERR_TAIL_LIMIT,
    EnvironmentFingerprint,
    MeasurementRecord,
    write_records,
)
from .sampler import Session, SessionConfig

logger = logging.getLogger(__name__)

SUITE_FORMAT = "joulemeter-suite/1"
ITERATIONS_PLACEHOLDER = "{iterations}"

_NS_PER_S = 10**9


class HarnessError(RuntimeError):
    """Suite configuration or orchestration failure."""


@dataclass(frozen=True)
class SimulatedWorkload:
    """Declared measurement outcome for fully deterministic suite runs.

    With the simulated backend, the command still executes (exit status and
    output digest stay real) but the measurement window and counters come
    from these declarations, so repeated runs produce identical records.
    ``task_clock_ns`` defaults to one active core for the whole duration.
    """

    duration_s: float
    task_clock_ns: int | None = None
    llc_misses: int | None = None
    llc_references: int | None = None

    def __post_init__(self) -> None:
        if not self.duration_s > 0:
            raise HarnessError("simulated duration_s must be positive")

    def counters(self) -> perf.PerfCounters:
        task_clock = self.task_clock_ns
        if task_clock is None:
            task_clock = round(self.duration_s * _NS_PER_S)
        return perf.PerfCounters(
            task_clock_ns=task_clock,
            llc_misses=self.llc_misses,
            llc_references=self.llc_references,
            source="declared",
        )


@dataclass(frozen=True)
class ContainerConfig:
    """Optional container isolation via an external runtime."""

    image: str
    runtime: str = "docker"
    extra_args: tuple[str, ...] = ()


@dataclass(frozen=True)
class BenchmarkSpec:
    """One benchmark command and the controls it runs under.

    ``language_impl`` identifies the implementation (interpreter or
    compiler plus version), not the language: different versions are
    different implementations.  A ``{iterations}`` placeholder in the
    command is rendered from ``in_process_iterations``; declaring it is
    what makes a spec eligible for iteration wrapping and sweeps.
    """

    name: str
    language_impl: str
    command: tuple[str, ...]
    stdin_file: str | None = None
    working_dir: str | None = None
    env: dict[str, str] = field(default_factory=dict)
    in_process_iterations: int = 1
    external_repetitions: int = 1
    iteration_sweep: tuple[int, ...] | None = None
    cpuset: tuple[int, ...] | None = None
    expected_output_digest: str | None = None
    simulated: SimulatedWorkload | None = None
    container: ContainerConfig | None = None

    def __post_init__(self) -> None:
        if not self.command:
            raise HarnessError(f"benchmark {self.name!r} has an empty command")
        if self.in_process_iterations < 1:
            raise HarnessError("in_process_iterations must be >= 1")
        if self.external_repetitions < 1:
            raise HarnessError("external_repetitions must be >= 1")
        if self.iteration_sweep is not None:
            if not self.iteration_sweep or min(self.iteration_sweep) < 1:
                raise HarnessError("iteration_sweep entries must be >= 1")
            if not self.supports_iterations:
                raise HarnessError(
                    f"benchmark {self.name!r} declares an iteration sweep without "
                    f"an {ITERATIONS_PLACEHOLDER} placeholder in its command"
                )
        if self.cpuset is not None and not self.cpuset:
            raise HarnessError("cpuset, when given, must not be empty")

    @property
    def supports_iterations(self) -> bool:
        return any(ITERATIONS_PLACEHOLDER in part for part in self.command)

    def rendered_command(self) -> list[str]:
        n = str(self.in_process_iterations)
        return [part.replace(ITERATIONS_PLACEHOLDER, n) for part in self.command]


def wrap_iterations(spec: BenchmarkSpec, n: int) -> BenchmarkSpec:
    """Derive a spec running the workload ``n`` times in one process.

    Requires the spec to declare an iteration-count parameter via the
    ``{iterations}`` placeholder; records from the derived spec carry ``n``
    so analysis can compute per-iteration times.
    """
    if n < 1:
        raise HarnessError(f"iteration count must be >= 1, got {n}")
    if not spec.supports_iterations:
        raise HarnessError(
            f"benchmark {spec.name!r} does not declare an iteration-count "
            f"parameter ({ITERATIONS_PLACEHOLDER} placeholder)"
        )
    return dataclasses.replace(spec, in_process_iterations=n, iteration_sweep=None)


@dataclass(frozen=True)
class SuiteConfig:
    """A declarative measurement campaign."""

    specs: tuple[BenchmarkSpec, ...]
    output: str | None = None
    backend: str | None = None
    period_s: float = 1.0
    env: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen = set()
        for spec in self.specs:
            key = (spec.name, spec.language_impl)
            if key in seen:
                raise HarnessError(
                    f"duplicate benchmark {key[0]!r} for implementation {key[1]!r}"
                )
            seen.add(key)
        if not self.period_s > 0:
            raise HarnessError("period_s must be positive")


def load_suite(path: str | Path) -> SuiteConfig:
    """Load a suite config from its YAML file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise HarnessError(f"cannot read suite file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise HarnessError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise HarnessError(f"{path}: top level must be a mapping")
    if raw.get("format") != SUITE_FORMAT:
        raise HarnessError(
            f"{path}: expected 'format: {SUITE_FORMAT}', got {raw.get('format')!r}"
        )
    try:
        specs = tuple(_parse_spec(entry) for entry in raw.get("benchmarks", []))
        return SuiteConfig(
            specs=specs,
            output=raw.get("output"),
            backend=raw.get("backend"),
            period_s=float(raw.get("period_s", 1.0)),
            env={str(k): str(v) for k, v in (raw.get("env") or {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise HarnessError(f"{path}: {exc}") from exc


def _parse_spec(entry: dict) -> BenchmarkSpec:
    simulated = None
    if entry.get("simulated") is not None:
        sim = entry["simulated"]
        simulated = SimulatedWorkload(
            duration_s=float(sim["duration_s"]),
            task_clock_ns=None if sim.get("task_clock_ns") is None else int(sim["task_clock_ns"]),
            llc_misses=None if sim.get("llc_misses") is None else int(sim["llc_misses"]),
            llc_references=None if sim.get("llc_references") is None else int(sim["llc_references"]),
        )
    container = None
    if entry.get("container") is not None:
        cont = entry["container"]
        container = ContainerConfig(
            image=str(cont["image"]),
            runtime=str(cont.get("runtime", "docker")),
            extra_args=tuple(str(a) for a in cont.get("extra_args", ())),
        )
    return BenchmarkSpec(
        name=str(entry["name"]),
        language_impl=str(entry["language_impl"]),
        command=tuple(str(part) for part in entry["command"]),
        stdin_file=entry.get("stdin"),
        working_dir=entry.get("working_dir"),
        env={str(k): str(v) for k, v in (entry.get("env") or {}).items()},
        in_process_iterations=int(entry.get("iterations", 1)),
        external_repetitions=int(entry.get("repetitions", 1)),
        iteration_sweep=(
            tuple(int(n) for n in entry["iteration_sweep"])
            if entry.get("iteration_sweep")
            else None
        ),
        cpuset=tuple(int(c) for c in entry["cpuset"]) if entry.get("cpuset") else None,
        expected_output_digest=entry.get("expected_sha256"),
        simulated=simulated,
        container=container,
    )


# ---------------------------------------------------------------------------
# Environment fingerprint


def _read_sysfs(path: Path) -> str | None:
    try:
        return path.read_text().strip()
    except OSError:
        return None


def environment_check(
    cpu_sysfs: str = "/sys/devices/system/cpu",
    machine_id_path: str = "/etc/machine-id",
    proc: str = "/proc",
) -> EnvironmentFingerprint:
    """Snapshot the machine state that affects power measurements.

    Unreadable entries become None fields with a warning; the check never
    blocks a run and never writes anywhere.
    """
    sysfs = Path(cpu_sysfs)
    governor = _read_sysfs(sysfs / "cpu0/cpufreq/scaling_governor")

    min_freq = _read_sysfs(sysfs / "cpu0/cpufreq/scaling_min_freq")
    max_freq = _read_sysfs(sysfs / "cpu0/cpufreq/scaling_max_freq")
    frequency_pinned = None
    if min_freq is not None and max_freq is not None:
        frequency_pinned = min_freq == max_freq

    no_turbo = _read_sysfs(sysfs / "intel_pstate/no_turbo")
    boost = _read_sysfs(sysfs / "cpufreq/boost")
    if no_turbo is not None:
        turbo_enabled = no_turbo == "0"
    elif boost is not None:
        turbo_enabled = boost == "1"
    else:
        turbo_enabled = None

    try:
        load_1m = os.getloadavg()[0]
    except OSError:
        load_1m = None
    try:
        process_count = sum(1 for entry in os.listdir(proc) if entry.isdigit())
    except OSError:
        process_count = None

    fingerprint = EnvironmentFingerprint(
        governor=governor,
        turbo_enabled=turbo_enabled,
        frequency_pinned=frequency_pinned,
        cpu_count=os.cpu_count(),
        machine_id=_read_sysfs(Path(machine_id_path)),
        load_1m=load_1m,
        process_count=process_count,
    )
    if fingerprint.controlled is None:
        logger.warning("machine state unreadable; environment marked unknown")
    elif not fingerprint.controlled:
        logger.warning(
            "environment not controlled (governor=%s, turbo_enabled=%s, "
            "frequency_pinned=%s); power readings will be noisier",
            governor,
            turbo_enabled,
            frequency_pinned,
        )
    return fingerprint


# ---------------------------------------------------------------------------
# Gated spawn

# subprocess.Popen cannot gate a child before exec (its constructor blocks
# until the exec happens), so the spawn is hand-rolled: fork, set affinity,
# block on the gate pipe, then exec.  Counters attach while the child sits
# at the gate, so they cover exec and the entire workload.


class GatedProcess:
    """A forked child blocked before exec, with captured stdio."""

    def __init__(
        self,
        argv: list[str],
        *,
        cwd: str | None,
        env: dict[str, str],
        stdin_file: str | None,
        cpuset: tuple[int, ...] | None,
    ):
        gate_read, gate_write = os.pipe()
        err_read, err_write = os.pipe()
        stdout_read, stdout_write = os.pipe()
        stderr_read, stderr_write = os.pipe()
        stdin_fd = os.open(stdin_file or os.devnull, os.O_RDONLY)

        pid = os.fork()
        if pid == 0:
            # Child: nothing here may touch locks held by parent threads;
            # stick to raw os calls until exec.
            try:
                os.close(gate_write)
                os.close(err_read)
                os.close(stdout_read)
                os.close(stderr_read)
                os.dup2(stdin_fd, 0)
                os.dup2(stdout_write, 1)
                os.dup2(stderr_write, 2)
                for fd in (stdin_fd, stdout_write, stderr_write):
                    if fd > 2:
                        os.close(fd)
                if cpuset is not None:
                    os.sched_setaffinity(0, set(cpuset))
                if cwd is not None:
                    os.chdir(cwd)
                os.read(gate_read, 1)
                os.close(gate_read)
                # err_write is close-on-exec: it vanishes on success and
                # carries the failure message otherwise.
                os.execvpe(argv[0], argv, env)
            except BaseException as exc:
                try:
                    os.write(err_write, str(exc).encode("utf-8", "replace")[:512])
                finally:
                    os._exit(127)

        os.close(gate_read)
        os.close(err_write)
        os.close(stdout_write)
        os.close(stderr_write)
        os.close(stdin_fd)
        self.pid = pid
        self._gate_write = gate_write
        self._err_read = err_read
        self.stdout = os.fdopen(stdout_read, "rb")
        self.stderr = os.fdopen(stderr_read, "rb")

    def release(self) -> None:
        os.write(self._gate_write, b"g")
        os.close(self._gate_write)

    def wait(self) -> tuple[int, "os.struct_rusage"]:
        """Reap the child, returning (exit code, its rusage)."""
        _, status, rusage = os.wait4(self.pid, 0)
        return os.waitstatus_to_exitcode(status), rusage

    def exec_error(self) -> str | None:
        """Message written by the child if setup or exec failed."""
        message = b""
        while True:
            chunk = os.read(self._err_read, 512)
            if not chunk:
                break
            message += chunk
        os.close(self._err_read)
        return message.decode("utf-8", "replace") or None


class _OutputReader(threading.Thread):
    """Drains one pipe: hashes the stream and keeps a bounded tail."""

    def __init__(self, stream):
        super().__init__(daemon=True)
        self.stream = stream
        self.digest = hashlib.sha256()
        self.byte_count = 0
        self.tail = b""
        self.start()

    def run(self) -> None:
        while True:
            chunk = self.stream.read(65536)
            if not chunk:
                break
            self.byte_count += len(chunk)
            self.digest.update(chunk)
            self.tail = (self.tail + chunk)[-STDERR_TAIL_LIMIT:]
        self.stream.close()


# ---------------------------------------------------------------------------
# Run protocol


def build_container_argv(spec: BenchmarkSpec, command: list[str]) -> list[str]:
    """Container-runtime invocation wrapping a rendered benchmark command."""
    assert spec.container is not None
    argv = [spec.container.runtime, "run", "--rm", "-i"]
    if spec.cpuset:
        argv.append("--cpuset-cpus=" + ",".join(str(c) for c in spec.cpuset))
    for key, value in spec.env.items():
        argv += ["-e", f"{key}={value}"]
    if spec.working_dir:
        argv += ["-w", spec.working_dir]
    argv += list(spec.container.extra_args)
    argv.append(spec.container.image)
    argv += command
    return argv


def _check_digest(expected: str, actual_hex: str) -> bool:
    return expected.removeprefix("sha256:") == actual_hex


def _validate_cpusets(suite: SuiteConfig) -> None:
    allowed = os.sched_getaffinity(0)
    for spec in suite.specs:
        if spec.cpuset and spec.container is None:
            bad = set(spec.cpuset) - allowed
            if bad:
                raise HarnessError(
                    f"benchmark {spec.name!r} pins to unavailable cpu(s) {sorted(bad)}; "
                    f"this machine offers {sorted(allowed)}"
                )


def _energy_fields(session_result) -> tuple[float | None, float | None, dict[str, float]]:
    by_domain = session_result.energy_by_domain()
    per_stream = session_result.energy()
    per_package = {
        f"{domain.value}:{package}": total.joules
        for (domain, package), total in sorted(
            per_stream.items(), key=lambda item: (item[0][0].value, item[0][1])
        )
    }
    pkg = by_domain.get(Domain.PKG)
    dram = by_domain.get(Domain.DRAM)
    return (
        pkg.joules if pkg else None,
        dram.joules if dram else None,
        per_package,
    )


def _failure_tail(raw: bytes) -> str | None:
    return raw.decode("utf-8", "replace") if raw else None


def run_suite(
    suite: SuiteConfig,
    backend: Backend,
    *,
    backend_name: str = "unknown",
    output_path: str | Path | None = None,
    use_perf: bool | None = None,
) -> list[MeasurementRecord]:
    """Run every spec x repetition, appending records as they complete."""
    _validate_cpusets(suite)
    if use_perf is None:
        use_perf = perf.events_available()
    fingerprint = environment_check()

    expanded: list[BenchmarkSpec] = []
    for spec in suite.specs:
        if spec.iteration_sweep:
            expanded.extend(wrap_iterations(spec, n) for n in spec.iteration_sweep)
        else:
            expanded.append(spec)

    records: list[MeasurementRecord] = []
    for spec in expanded:
        for repetition in range(spec.external_repetitions):
            record = _run_once(
                spec,
                repetition,
                backend,
                suite,
                backend_name=backend_name,
                use_perf=use_perf,
                fingerprint=fingerprint,
            )
            records.append(record)
            if output_path is not None:
                write_records([record], output_path)
            if record.error:
                logger.warning("run %s failed: %s", record.record_id, record.error)
    return records


def _run_once(
    spec: BenchmarkSpec,
    repetition: int,
    backend: Backend,
    suite: SuiteConfig,
    *,
    backend_name: str,
    use_perf: bool,
    fingerprint: EnvironmentFingerprint,
) -> MeasurementRecord:
    base = dict(
        benchmark=spec.name,
        language_impl=spec.language_impl,
        repetition=repetition,
        in_process_iterations=spec.in_process_iterations,
        cpuset=spec.cpuset,
        started_at_unix=time.time(),
        backend=backend_name,
        sampling_period_s=suite.period_s,
        environment=fingerprint,
    )
    command = spec.rendered_command()
    if spec.container is not None:
        command = build_container_argv(spec, command)
    env = dict(os.environ)
    env.update(suite.env)
    if spec.container is None:
        env.update(spec.env)  # containers receive these via -e flags instead

    if spec.simulated is not None:
        if not isinstance(backend, SimulatedBackend):
            raise HarnessError(
                f"benchmark {spec.name!r} declares a simulated workload, which "
                "requires the simulated backend"
            )
        return _run_simulated(spec, command, env, backend, suite, base)
    return _run_real(spec, command, env, backend, suite, base, use_perf)


def _run_simulated(
    spec: BenchmarkSpec,
    command: list[str],
    env: dict[str, str],
    backend: Backend,
    suite: SuiteConfig,
    base: dict,
) -> MeasurementRecord:
    assert spec.simulated is not None
    stdin = subprocess.DEVNULL
    if spec.stdin_file is not None:
        stdin = open(spec.stdin_file, "rb")
    try:
        completed = subprocess.run(
            command,
            cwd=spec.working_dir,
            env=env,
            stdin=stdin,
            capture_output=True,
        )
    except OSError as exc:
        return MeasurementRecord(**base, error=f"spawn-failure: {exc}")
    finally:
        if stdin is not subprocess.DEVNULL:
            stdin.close()

    session = Session(backend, SessionConfig(period_s=suite.period_s))
    result = session.run_virtual(spec.simulated.duration_s)
    pkg_joules, dram_joules, per_package = _energy_fields(result)
    counters = spec.simulated.counters()

    error = None
    if completed.returncode != 0:
        error = f"nonzero-exit: status {completed.returncode}"
    elif spec.expected_output_digest is not None:
        actual = hashlib.sha256(completed.stdout).hexdigest()
        if not _check_digest(spec.expected_output_digest, actual):
            error = f"output-digest-mismatch: sha256:{actual}"

    return MeasurementRecord(
        **base,
        wall_time_s=spec.simulated.duration_s,
        pkg_joules=pkg_joules,
        dram_joules=dram_joules,
        per_package_joules=per_package,
        task_clock_ns=counters.task_clock_ns,
        llc_misses=counters.llc_misses,
        llc_references=counters.llc_references,
        perf_source=counters.source,
        exit_status=completed.returncode,
        error=error,
        stderr_tail=(
            _failure_tail(completed.stderr[-STDERR_TAIL_LIMIT:]) if error else None
        ),
        caveats=("measurement simulated from declared workload",),
    )


def _run_real(
    spec: BenchmarkSpec,
    command: list[str],
    env: dict[str, str],
    backend: Backend,
    suite: SuiteConfig,
    base: dict,
    use_perf: bool,
) -> MeasurementRecord:
    caveats: list[str] = []

    resolved = shutil.which(command[0], path=env.get("PATH", os.defpath))
    if resolved is None and not os.path.exists(command[0]):
        return MeasurementRecord(**base, error=f"command-not-found: {command[0]}")

    try:
        child = GatedProcess(
            command,
            cwd=spec.working_dir,
            env=env,
            stdin_file=spec.stdin_file,
            cpuset=None if spec.container else spec.cpuset,
        )
    except OSError as exc:
        return MeasurementRecord(**base, error=f"spawn-failure: {exc}")

    stdout_reader = _OutputReader(child.stdout)
    stderr_reader = _OutputReader(child.stderr)

    group: perf.CounterGroup | None = None
    if use_perf:
        try:
            group = perf.CounterGroup.attach(child.pid)
        except perf.PerfError as exc:
            caveats.append(f"perf attach failed, falling back to rusage: {exc}")
    if spec.container is not None and group is not None:
        caveats.append(
            "perf counters cover the container client process, not the "
            "containerized workload; prefer bare cpuset pinning for counters"
        )

    try:
        session = Session(backend, SessionConfig(period_s=suite.period_s)).start()
    except Exception:
        child.release()
        child.wait()
        if group:
            group.close()
        raise

    child.release()
    start_ns = time.monotonic_ns()
    exit_status, rusage = child.wait()
    wall_time_s = (time.monotonic_ns() - start_ns) / _NS_PER_S
    result = session.stop()
    stdout_reader.join()
    stderr_reader.join()

    if group is not None:
        counters = group.read()
        group.close()
    else:
        counters = perf.counters_from_rusage(rusage.ru_utime, rusage.ru_stime)
    caveats.extend(counters.caveats)

    pkg_joules, dram_joules, per_package = _energy_fields(result)

    error = None
    exec_error = child.exec_error()
    if exec_error is not None:
        error = f"spawn-failure: {exec_error}"
    elif exit_status != 0:
        error = f"nonzero-exit: status {exit_status}"
    elif spec.expected_output_digest is not None:
        actual = stdout_reader.digest.hexdigest()
        if not _check_digest(spec.expected_output_digest, actual):
            error = f"output-digest-mismatch: sha256:{actual}"

    return MeasurementRecord(
        **base,
        wall_time_s=wall_time_s,
        pkg_joules=pkg_joules,
        dram_joules=dram_joules,
        per_package_joules=per_package,
        task_clock_ns=counters.task_clock_ns,
        llc_misses=counters.llc_misses,
        llc_references=counters.llc_references,
        perf_source=counters.source,
        multiplexed=counters.multiplexed,
        exit_status=exit_status,
        error=error,
        stderr_tail=_failure_tail(stderr_reader.tail) if error else None,
        caveats=tuple(caveats),
    )
