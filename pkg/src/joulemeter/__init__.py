"""Energy measurement and analysis toolkit.

Overflow-safe RAPL counter accounting, performance-counter collection,
a confound-controlled benchmark harness, and the power-model analysis
pipeline, wired together by the ``joulemeter`` command-line tool.
"""

from .analysis import (
    ConfoundReport,
    ConfoundThresholds,
    NormalizedTable,
    PowerModel,
    WorkloadDescriptor,
    breakeven_throughput_gain,
    detect_confounds,
    fit_linear_memory,
    fit_log_cores,
    normalize,
    power_doubling_increment,
    predict_power,
)
from .backends import (
    CounterAddress,
    MsrBackend,
    SimulatedBackend,
    SimulatedTrajectory,
    load_trajectory,
    open_backend,
)
from .counters import (
    Domain,
    EnergySample,
    EnergyTotal,
    EnergyUnit,
    accumulate,
    decode_unit,
    mask_register,
    tick_delta,
)
from .harness import (
    BenchmarkSpec,
    SuiteConfig,
    environment_check,
    load_suite,
    run_suite,
    wrap_iterations,
)
from .perf import (
    CounterGroup,
    PerfCounters,
    UsageSummary,
    average_active_cores,
    memory_activity,
)
from .records import MeasurementRecord, export_csv, iter_records, write_records
from .sampler import Session, SessionConfig, SessionResult

__version__ = "0.1.0"
