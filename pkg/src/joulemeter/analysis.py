"""Power models, normalization tables, and measurement-confound checks.

Two regressions summarize what drives power draw: package watts against
the base-2 logarithm of average active cores (so the slope reads directly
as watts per doubling of cores), and DRAM watts against LLC misses per
second.  From the log model follow the doubling law (doubling active
cores adds exactly the slope in watts) and the break-even throughput gain
(the minimum speedup at which doubling cores does not cost energy).

Confound detection flags comparisons the causal model says are unfair:
implementations of the same benchmark using very different core counts,
first-iteration warmup skew, and pinned fixed-frequency record sets whose
power draw is not actually equal.  Every flag cites the records it was
derived from, and a single pass is made over the data: no outliers are
removed, anomalies are flagged instead.
"""

from __future__ import annotations

import enum
import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .counters import Domain
from .records import MeasurementRecord


class AnalysisError(ValueError):
    """Invalid input to an analysis operation."""


class DegenerateFitError(AnalysisError):
    """All predictor values identical; no line can be fitted."""


class ModelKind(enum.Enum):
    LOG_CORES = "log_cores"
    LINEAR_MEMORY = "linear_memory"


@dataclass(frozen=True)
class PowerModel:
    """Fitted regression: watts = slope * f(x) + intercept.

    f is log2 for LOG_CORES and identity for LINEAR_MEMORY.  ``r_squared``
    is the standard coefficient of determination, None when the response
    has no variance (R^2 undefined).
    """

    kind: ModelKind
    slope: float
    intercept: float
    r_squared: float | None
    n_points: int

    def __post_init__(self) -> None:
        if self.n_points < 2:
            raise AnalysisError(f"a fit needs >= 2 points, got {self.n_points}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "n_points": self.n_points,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PowerModel":
        return cls(
            kind=ModelKind(data["kind"]),
            slope=float(data["slope"]),
            intercept=float(data["intercept"]),
            r_squared=None if data.get("r_squared") is None else float(data["r_squared"]),
            n_points=int(data["n_points"]),
        )


@dataclass(frozen=True)
class WorkloadDescriptor:
    """A hypothetical workload for forward power/energy prediction."""

    avg_active_cores: float
    memory_activity: float  # LLC misses per second
    duration_s: float

    def __post_init__(self) -> None:
        if not self.avg_active_cores > 0:
            raise AnalysisError("avg_active_cores must be positive")
        if self.memory_activity < 0:
            raise AnalysisError("memory_activity must be non-negative")
        if not self.duration_s > 0:
            raise AnalysisError("duration_s must be positive")


@dataclass(frozen=True)
class PowerPrediction:
    watts: float
    joules: float


def _least_squares(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float | None]:
    """Ordinary least squares on mean-centered data; returns (a, b, R^2)."""
    n = len(xs)
    x_mean = math.fsum(xs) / n
    y_mean = math.fsum(ys) / n
    sxx = math.fsum((x - x_mean) ** 2 for x in xs)
    if sxx == 0.0:
        raise DegenerateFitError(
            "all predictor values are identical; the fit is degenerate"
        )
    sxy = math.fsum((x - x_mean) * (y - y_mean) for x, y in zip(xs, ys))
    slope = sxy / sxx
    intercept = y_mean - slope * x_mean
    ss_tot = math.fsum((y - y_mean) ** 2 for y in ys)
    if ss_tot == 0.0:
        return slope, intercept, None  # no response variance: R^2 undefined
    ss_res = math.fsum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    return slope, intercept, 1.0 - ss_res / ss_tot


def fit_log_cores(points: Sequence[tuple[float, float]]) -> PowerModel:
    """Fit package watts = a * log2(avg cores) + b.

    Plain linear regression on log-transformed core counts; base 2 keeps
    the slope interpretable as watts per doubling.
    """
    if len(points) < 2:
        raise AnalysisError(f"need >= 2 points, got {len(points)}")
    for cores, _watts in points:
        if not cores > 0:
            raise AnalysisError(f"core count must be positive, got {cores}")
    xs = [math.log2(cores) for cores, _ in points]
    ys = [watts for _, watts in points]
    slope, intercept, r_squared = _least_squares(xs, ys)
    return PowerModel(ModelKind.LOG_CORES, slope, intercept, r_squared, len(points))


def fit_linear_memory(points: Sequence[tuple[float, float]]) -> PowerModel:
    """Fit DRAM watts = a * (LLC misses per second) + b."""
    if len(points) < 2:
        raise AnalysisError(f"need >= 2 points, got {len(points)}")
    for rate, _watts in points:
        if rate < 0:
            raise AnalysisError(f"miss rate must be non-negative, got {rate}")
    xs = [rate for rate, _ in points]
    ys = [watts for _, watts in points]
    slope, intercept, r_squared = _least_squares(xs, ys)
    return PowerModel(ModelKind.LINEAR_MEMORY, slope, intercept, r_squared, len(points))


def _require_kind(model: PowerModel, kind: ModelKind, op: str) -> None:
    if model.kind != kind:
        raise AnalysisError(f"{op} requires a {kind.value} model, got {model.kind.value}")


def power_doubling_increment(model: PowerModel) -> float:
    """Watts added by doubling active cores: exactly the log-model slope.

    Power(2x) = a*log2(2x) + b = Power(x) + a for every x, so the increment
    is the slope itself.
    """
    _require_kind(model, ModelKind.LOG_CORES, "power_doubling_increment")
    return model.slope


def breakeven_throughput_gain(model: PowerModel, cores: float) -> float:
    """Minimum throughput multiplier at which doubling cores breaks even.

    Energy = Power * Time, so doubling cores leaves energy unchanged when
    throughput grows by Power(2x)/Power(x); any larger speedup is an
    energy win.
    """
    _require_kind(model, ModelKind.LOG_CORES, "breakeven_throughput_gain")
    if cores < 1:
        raise AnalysisError(f"core count must be >= 1, got {cores}")
    power_x = model.slope * math.log2(cores) + model.intercept
    if not power_x > 0:
        raise AnalysisError(f"model predicts non-positive power {power_x} W at x={cores}")
    power_2x = model.slope * math.log2(2 * cores) + model.intercept
    return power_2x / power_x


def predict_power(model: PowerModel, workload: WorkloadDescriptor) -> PowerPrediction:
    """Forward prediction: watts for the workload, energy over its duration."""
    if model.kind == ModelKind.LOG_CORES:
        watts = model.slope * math.log2(workload.avg_active_cores) + model.intercept
    else:
        watts = model.slope * workload.memory_activity + model.intercept
    return PowerPrediction(watts=watts, joules=watts * workload.duration_s)


# ---------------------------------------------------------------------------
# Normalization


@dataclass(frozen=True)
class NormalizedRow:
    language_impl: str
    normalized_time: float
    normalized_energy: float
    n_benchmarks: int

    def __post_init__(self) -> None:
        if not (self.normalized_time > 0 and self.normalized_energy > 0):
            raise AnalysisError("normalized entries must be positive")


@dataclass(frozen=True)
class NormalizedTable:
    baseline_impl: str
    energy_domain: Domain
    aggregate: str  # "geometric" or "arithmetic"
    rows: tuple[NormalizedRow, ...]
    notes: tuple[str, ...] = ()


def _geometric_mean(values: Sequence[float]) -> float:
    return math.exp(math.fsum(math.log(v) for v in values) / len(values))


def _group_means(
    records: Iterable[MeasurementRecord], energy_domain: Domain
) -> dict[tuple[str, str], tuple[float, float]]:
    """Mean (time, energy) per (benchmark, impl) over successful records."""
    groups: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for record in records:
        if not record.ok:
            continue
        energy = record.joules_for(energy_domain)
        if record.wall_time_s is None or energy is None:
            continue
        groups.setdefault((record.benchmark, record.language_impl), []).append(
            (record.wall_time_s, energy)
        )
    return {
        key: (
            statistics.fmean(t for t, _ in values),
            statistics.fmean(e for _, e in values),
        )
        for key, values in groups.items()
    }


def normalize(
    records: Iterable[MeasurementRecord],
    baseline_impl: str,
    *,
    energy_domain: Domain = Domain.PKG,
    aggregate: str = "geometric",
) -> NormalizedTable:
    """Per-implementation time/energy normalized to a baseline implementation.

    Per benchmark, each implementation's mean time and energy are divided
    by the baseline's; ratios are then aggregated across benchmarks with
    the geometric mean (arithmetic available for comparison experiments).
    Benchmarks without a successful baseline record are excluded with an
    explicit note; the baseline row is exactly (1.00, 1.00) by definition.
    """
    if aggregate not in ("geometric", "arithmetic"):
        raise AnalysisError(f"unknown aggregate {aggregate!r}")
    means = _group_means(records, energy_domain)
    if not means:
        raise AnalysisError("no successful records to normalize")

    baseline_by_benchmark = {
        benchmark: value
        for (benchmark, impl), value in means.items()
        if impl == baseline_impl
    }
    if not baseline_by_benchmark:
        raise AnalysisError(f"baseline implementation {baseline_impl!r} has no successful records")

    notes = []
    all_benchmarks = {benchmark for benchmark, _ in means}
    for benchmark in sorted(all_benchmarks - set(baseline_by_benchmark)):
        notes.append(f"benchmark {benchmark!r} excluded: no successful baseline record")

    ratios: dict[str, list[tuple[float, float]]] = {}
    for (benchmark, impl), (time_mean, energy_mean) in means.items():
        baseline = baseline_by_benchmark.get(benchmark)
        if baseline is None:
            continue
        ratios.setdefault(impl, []).append(
            (time_mean / baseline[0], energy_mean / baseline[1])
        )

    mean_fn = _geometric_mean if aggregate == "geometric" else statistics.fmean
    rows = []
    for impl, impl_ratios in ratios.items():
        if impl == baseline_impl:
            rows.append(NormalizedRow(impl, 1.0, 1.0, len(impl_ratios)))
            continue
        rows.append(
            NormalizedRow(
                impl,
                mean_fn([t for t, _ in impl_ratios]),
                mean_fn([e for _, e in impl_ratios]),
                len(impl_ratios),
            )
        )
    rows.sort(key=lambda row: (row.normalized_time, row.language_impl))
    return NormalizedTable(
        baseline_impl=baseline_impl,
        energy_domain=energy_domain,
        aggregate=aggregate,
        rows=tuple(rows),
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# Confound detection


@dataclass(frozen=True)
class ConfoundThresholds:
    """Detection defaults, all overridable per campaign.

    ``power_band_w`` is the paper-machine-scale +/- band for the pinned
    equal-power check; ``warmup_ratio`` flags first-iteration skew beyond
    ordinary run-to-run noise.
    """

    parallelism_ratio: float = 2.0
    power_band_w: float = 0.5
    warmup_ratio: float = 1.2


@dataclass(frozen=True)
class ConfoundFlag:
    """One evaluated check: what fired (or could not be evaluated) and why."""

    kind: str
    subject: str
    fired: bool | None  # None: not evaluated
    value: float | None
    threshold: float | None
    records: tuple[str, ...]
    note: str = ""


@dataclass(frozen=True)
class ConfoundReport:
    thresholds: ConfoundThresholds
    flags: tuple[ConfoundFlag, ...]

    def of_kind(self, kind: str) -> tuple[ConfoundFlag, ...]:
        return tuple(flag for flag in self.flags if flag.kind == kind)

    @property
    def fired(self) -> tuple[ConfoundFlag, ...]:
        return tuple(flag for flag in self.flags if flag.fired)


def _parallelism_flags(
    records: list[MeasurementRecord], thresholds: ConfoundThresholds
) -> list[ConfoundFlag]:
    by_benchmark: dict[str, dict[str, list[MeasurementRecord]]] = {}
    for record in records:
        if record.avg_cores is None:
            continue
        by_benchmark.setdefault(record.benchmark, {}).setdefault(
            record.language_impl, []
        ).append(record)

    flags = []
    for benchmark in sorted(by_benchmark):
        impls = by_benchmark[benchmark]
        if len(impls) < 2:
            flags.append(
                ConfoundFlag(
                    kind="parallelism_mismatch",
                    subject=benchmark,
                    fired=None,
                    value=None,
                    threshold=thresholds.parallelism_ratio,
                    records=tuple(
                        sorted(r.record_id for rs in impls.values() for r in rs)
                    ),
                    note="not evaluated: fewer than 2 implementations with core usage",
                )
            )
            continue
        impl_cores = {
            impl: statistics.fmean(r.avg_cores for r in impl_records)
            for impl, impl_records in sorted(impls.items())
        }
        lo_impl = min(impl_cores, key=lambda i: (impl_cores[i], i))
        hi_impl = max(impl_cores, key=lambda i: (impl_cores[i], i))
        ratio = impl_cores[hi_impl] / impl_cores[lo_impl]
        cited = tuple(
            r.record_id
            for impl in sorted(impls)
            for r in sorted(impls[impl], key=lambda r: r.record_id)
        )
        flags.append(
            ConfoundFlag(
                kind="parallelism_mismatch",
                subject=benchmark,
                fired=ratio > thresholds.parallelism_ratio,
                value=ratio,
                threshold=thresholds.parallelism_ratio,
                records=cited,
                note=(
                    f"{hi_impl} averages {impl_cores[hi_impl]:.2f} cores vs "
                    f"{impl_cores[lo_impl]:.2f} for {lo_impl}"
                ),
            )
        )
    return flags


def _warmup_flags(
    records: list[MeasurementRecord], thresholds: ConfoundThresholds
) -> list[ConfoundFlag]:
    by_group: dict[tuple[str, str], dict[int, list[MeasurementRecord]]] = {}
    for record in records:
        if not record.ok or record.wall_time_s is None:
            continue
        by_group.setdefault((record.benchmark, record.language_impl), {}).setdefault(
            record.in_process_iterations, []
        ).append(record)

    flags = []
    for (benchmark, impl) in sorted(by_group):
        sweeps = by_group[(benchmark, impl)]
        if len(sweeps) < 2:
            continue  # no iteration sweep for this pair; nothing to evaluate
        subject = f"{benchmark}/{impl}"
        if 1 not in sweeps:
            flags.append(
                ConfoundFlag(
                    kind="warmup_skew",
                    subject=subject,
                    fired=None,
                    value=None,
                    threshold=thresholds.warmup_ratio,
                    records=tuple(
                        sorted(r.record_id for rs in sweeps.values() for r in rs)
                    ),
                    note="not evaluated: sweep lacks a single-iteration run",
                )
            )
            continue
        steady_n = max(sweeps)
        first = statistics.fmean(r.wall_time_s for r in sweeps[1])
        steady = statistics.fmean(r.wall_time_s / steady_n for r in sweeps[steady_n])
        skew = first / steady
        flags.append(
            ConfoundFlag(
                kind="warmup_skew",
                subject=subject,
                fired=skew > thresholds.warmup_ratio,
                value=skew,
                threshold=thresholds.warmup_ratio,
                records=tuple(
                    r.record_id
                    for n in sorted(sweeps)
                    for r in sorted(sweeps[n], key=lambda r: r.record_id)
                ),
                note=(
                    f"first iteration {skew:.2f}x the per-iteration time at "
                    f"n={steady_n}"
                ),
            )
        )
    return flags


def _power_equality_flag(
    records: list[MeasurementRecord], thresholds: ConfoundThresholds
) -> ConfoundFlag:
    eligible = [
        r
        for r in records
        if r.ok
        and r.pkg_watts is not None
        and r.cpuset is not None
        and len(r.cpuset) == 1
        and r.environment is not None
        and r.environment.controlled is True
    ]
    if len(eligible) < 2:
        return ConfoundFlag(
            kind="power_equality",
            subject="single-core pinned, fixed-frequency records",
            fired=None,
            value=None,
            threshold=thresholds.power_band_w,
            records=tuple(r.record_id for r in eligible),
            note="not evaluated: fewer than 2 pinned fixed-frequency records",
        )
    eligible.sort(key=lambda r: r.record_id)
    watts = [r.pkg_watts for r in eligible]
    mean = statistics.fmean(watts)
    deviation = max(abs(w - mean) for w in watts)
    worst = eligible[max(range(len(watts)), key=lambda i: abs(watts[i] - mean))]
    return ConfoundFlag(
        kind="power_equality",
        subject="single-core pinned, fixed-frequency records",
        fired=deviation > thresholds.power_band_w,
        value=deviation,
        threshold=thresholds.power_band_w,
        records=tuple(r.record_id for r in eligible),
        note=(
            f"mean {mean:.1f} W, max deviation {deviation:.2f} W ({worst.record_id})"
        ),
    )


def detect_confounds(
    records: Iterable[MeasurementRecord],
    thresholds: ConfoundThresholds | None = None,
) -> ConfoundReport:
    """Flag comparisons the causal model marks as unfair.

    Order-insensitive: records are grouped and sorted internally, so any
    permutation of the input yields the same report.
    """
    thresholds = thresholds or ConfoundThresholds()
    record_list = list(records)
    flags: list[ConfoundFlag] = []
    flags.extend(_parallelism_flags(record_list, thresholds))
    flags.extend(_warmup_flags(record_list, thresholds))
    flags.append(_power_equality_flag(record_list, thresholds))
    return ConfoundReport(thresholds=thresholds, flags=tuple(flags))


# ---------------------------------------------------------------------------
# Rendering


def render_model(model: PowerModel) -> str:
    x = "log2(cores)" if model.kind == ModelKind.LOG_CORES else "misses/s"
    r2 = "undefined" if model.r_squared is None else f"{model.r_squared:.4f}"
    return (
        f"{model.kind.value}: watts = {model.slope:.6g} * {x} + {model.intercept:.6g}"
        f"  (R^2 = {r2}, n = {model.n_points})"
    )


def render_table(table: NormalizedTable) -> str:
    lines = [
        f"normalized to {table.baseline_impl} "
        f"({table.energy_domain.value} energy, {table.aggregate} mean)",
        f"{'implementation':<24} {'time':>8} {'energy':>8} {'benchmarks':>11}",
    ]
    for row in table.rows:
        lines.append(
            f"{row.language_impl:<24} {row.normalized_time:>8.2f} "
            f"{row.normalized_energy:>8.2f} {row.n_benchmarks:>11}"
        )
    lines.extend(f"note: {note}" for note in table.notes)
    return "\n".join(lines)


def render_confound_report(report: ConfoundReport) -> str:
    lines = []
    for flag in report.flags:
        if flag.fired is None:
            status = "not evaluated"
        else:
            status = "FLAGGED" if flag.fired else "ok"
        value = "" if flag.value is None else f" value={flag.value:.3g}"
        threshold = "" if flag.threshold is None else f" threshold={flag.threshold:.3g}"
        lines.append(f"[{status}] {flag.kind}: {flag.subject}{value}{threshold}")
        if flag.note:
            lines.append(f"    {flag.note}")
        if flag.records:
            lines.append(f"    records: {', '.join(flag.records)}")
    return "\n".join(lines)


def plot_model(
    points: Sequence[tuple[float, float]], model: PowerModel, path: str
) -> None:
    """Scatter of measured points with the fitted curve overlaid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [x for x, _ in points]
    ys = [y for _, y in points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(xs, ys, s=12, alpha=0.6, label="runs")
    lo, hi = min(xs), max(xs)
    if model.kind == ModelKind.LOG_CORES:
        grid = [lo * (hi / lo) ** (i / 199) for i in range(200)] if lo > 0 else xs
        fit = [model.slope * math.log2(x) + model.intercept for x in grid]
        ax.set_xscale("log", base=2)
        ax.set_xlabel("average active cores")
        ax.set_ylabel("PKG power (W)")
    else:
        grid = [lo + (hi - lo) * i / 199 for i in range(200)]
        fit = [model.slope * x + model.intercept for x in grid]
        ax.set_xlabel("LLC misses per second")
        ax.set_ylabel("DRAM power (W)")
    ax.plot(grid, fit, color="tab:red", label=render_model(model))
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
