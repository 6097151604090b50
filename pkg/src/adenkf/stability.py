"""Runtime stability monitors: innovation bound, energy functional,
divergence detection, and the initialization-forgetting probe.

The adaptive filters come with two theorem-backed guarantees that these
monitors make observable: an almost-sure bound on every post-analysis
member innovation, and a Lyapunov drift of the weighted signal-ensemble
energy whose consequence is a time-uniform second-moment bound. The drift
involves conditional expectations, so it is checked statistically over
trials, never per step; the innovation bound is algebraic and is checked on
every member of every step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .filters import AnalysisOutput, Ensemble, InflationPolicy
from .observations import ObservationOperator

__all__ = [
    "EnergyParams",
    "EnergyFunctional",
    "DivergenceVerdict",
    "BoundViolated",
    "innovation_bound",
    "assert_innovation_bound",
    "track_energy",
    "detect_divergence",
    "ergodicity_probe",
    "NON_FINITE_ENSEMBLE",
    "NON_FINITE_TRUTH",
    "SOLVER_FAILURE",
]

NON_FINITE_ENSEMBLE = "non_finite_ensemble"
NON_FINITE_TRUTH = "non_finite_truth"
SOLVER_FAILURE = "solver_failure"

_MAGNITUDE_CAP = 1e300


class BoundViolated(AssertionError):
    """A member innovation exceeded the theorem bound (implementation bug)."""

    def __init__(self, member: int, ratio: float):
        self.member = member
        self.ratio = ratio
        super().__init__(f"member {member} at {ratio:.6f} x bound")


@dataclass(frozen=True)
class EnergyParams:
    """Energy-dissipation constants of the signal model.

    Estimates used only for monitoring weights, never for filtering.
    """

    beta_h: float
    k_h: float

    def __post_init__(self) -> None:
        if not 0.0 < self.beta_h < 1.0:
            raise ValueError("beta_h must lie in (0, 1)")
        if self.k_h <= 0:
            raise ValueError("k_h must be positive")

    @classmethod
    def lorenz96_default(cls, forcing: float, h: float) -> "EnergyParams":
        """Constants from the dissipation inequality of the cyclic model,
        via the one-interval Gronwall bound."""
        return cls(beta_h=1.0 - math.exp(-h), k_h=10.0 * forcing**2 * h)


@dataclass(frozen=True)
class EnergyFunctional:
    """Weighted signal-ensemble energy ``w |U|^2 + sum_k |V_k|^2``."""

    value: float
    weight: float


@dataclass(frozen=True)
class DivergenceVerdict:
    diverged: bool
    first_step: int | None = None
    cause: str | None = None


def innovation_bound(
    ensemble_size: int, m1: float, rho0: float, c_phi: float
) -> float:
    """The almost-sure bound ``sqrt(K) * max(m1, 1/(rho0 c_phi))``."""
    return math.sqrt(ensemble_size) * max(m1, 1.0 / (rho0 * c_phi))


def assert_innovation_bound(
    output: AnalysisOutput,
    policy: InflationPolicy,
    op: ObservationOperator,
    ensemble_size: int,
    slack: float = 1e-8,
) -> float:
    """Check every member innovation of one adaptive analysis step.

    Returns the maximum ratio attained against the bound; raises
    :class:`BoundViolated` when any member exceeds bound + slack. Only
    meaningful for the perturbed-observation filter with adaptive
    inflation on.
    """
    if not policy.adaptive:
        raise ValueError("the innovation bound holds for adaptive policies only")
    norms = np.atleast_1d(np.asarray(output.innovation_norms, dtype=float))
    bound = innovation_bound(ensemble_size, policy.m1, op.rho0, policy.c_phi)
    ratios = norms / bound
    worst = int(np.argmax(ratios))
    if norms[worst] > bound + slack:
        raise BoundViolated(worst, float(ratios[worst]))
    return float(ratios[worst])


def energy_weight(
    params: EnergyParams, op: ObservationOperator, ensemble_size: int
) -> float:
    return 4.0 * ensemble_size * op.norm**2 / (op.rho0 * params.beta_h)


def track_energy(
    truth: np.ndarray,
    ensemble: Ensemble,
    params: EnergyParams,
    op: ObservationOperator,
) -> EnergyFunctional:
    """Evaluate the energy functional for one signal-ensemble state."""
    w = energy_weight(params, op, ensemble.size)
    value = w * float(truth @ truth) + float(
        np.einsum("kd,kd->", ensemble.members, ensemble.members)
    )
    return EnergyFunctional(value=value, weight=w)


def _nonfinite(arr: np.ndarray) -> np.ndarray:
    """Entrywise test: NaN, +-inf, or magnitude above 1e300."""
    with np.errstate(invalid="ignore"):
        return ~(np.abs(arr) <= _MAGNITUDE_CAP)


def detect_divergence(trajectory) -> DivergenceVerdict:
    """Scan a trajectory of ensembles for catastrophic divergence.

    Accepts an (n_steps, K, d) array or a sequence of :class:`Ensemble`.
    A trial is diverged when any member entry is non-finite (NaN, infinity,
    or magnitude above 1e300); the first offending step is recorded.
    """
    if len(trajectory) == 0:
        return DivergenceVerdict(diverged=False)
    if isinstance(trajectory[0], Ensemble):
        arr = np.stack([e.members for e in trajectory])
    else:
        arr = np.asarray(trajectory, dtype=float)
    bad = _nonfinite(arr).any(axis=(1, 2))
    if not bad.any():
        return DivergenceVerdict(diverged=False)
    return DivergenceVerdict(
        diverged=True,
        first_step=int(np.argmax(bad)),
        cause=NON_FINITE_ENSEMBLE,
    )


def ergodicity_probe(
    config,
    variant: str,
    trial_index: int = 0,
    alternate_role: int | None = None,
) -> np.ndarray:
    """Distance between two filter runs that differ only in initialization.

    Runs the same trial twice with the same observation and noise
    realizations but independent initial-ensemble draws, and returns the
    per-step distance between the posterior means. Under the forgetting
    property the second-half average should fall below the first-half
    average in most trials.
    """
    from . import harness  # runtime import: harness builds on this module

    role = harness.ROLE_INIT_ALT if alternate_role is None else alternate_role
    rec_a = harness.run_trial(config, variant, trial_index)
    rec_b = harness.run_trial(config, variant, trial_index, init_role=role)
    return np.linalg.norm(rec_a.mean_trajectory - rec_b.mean_trajectory, axis=1)
