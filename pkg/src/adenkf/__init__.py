"""Ensemble Kalman and square-root filters with adaptive covariance
inflation, and a Lorenz-96 twin-experiment harness."""

__version__ = "0.1.0"

from .benchmarks import (
    BenchmarkResult,
    Climatology,
    DivergedClimatologyRun,
    benchmark_error,
    estimate_climatology,
    trivial_benchmark,
)
from .filters import (
    AnalysisOutput,
    Ensemble,
    FilterState,
    InflationDiagnostics,
    InflationPolicy,
    NonFiniteStatistics,
    assimilation_step,
    compute_statistics,
    eakf_adjustment,
    eakf_analysis,
    enkf_analysis,
    etkf_analysis,
    etkf_transform,
    forecast,
    inflation_strength,
)
from .harness import (
    BatchSummary,
    ExperimentConfig,
    FILTER_VARIANTS,
    TrialRecord,
    parse_variant,
    pattern_correlation,
    rmse,
    run_batch,
    run_trial,
    run_trials,
    statistics_histograms,
    sweep,
    trial_rng,
    write_trial_jsonl,
)
from .integrators import ImplicitSolveFailed, IntegratorSpec, integrate_interval
from .models import (
    CholeskyFailed,
    ModelSpec,
    advance_signal,
    discrete_noise_from_diffusion,
    drift,
    drift_jacobian,
    flow_map,
    sample_system_noise,
)
from .observations import (
    Observation,
    ObservationOperator,
    SingularGamma,
    build_operator,
    observe,
)
from .stability import (
    BoundViolated,
    DivergenceVerdict,
    EnergyFunctional,
    EnergyParams,
    assert_innovation_bound,
    detect_divergence,
    ergodicity_probe,
    innovation_bound,
    track_energy,
)

__all__ = [name for name in dir() if not name.startswith("_")]
