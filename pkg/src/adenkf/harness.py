"""Twin-experiment orchestration: trials, batches, metrics, and sweeps.

A trial synthesizes a truth trajectory and its observations, then runs one
or more filter variants against them. All noise realizations (initial
draws, observation noise, perturbations, system noise) come from per-trial
counter-based substreams keyed by (base seed, trial index, stream role), so

* every variant of a trial consumes identical realizations (common random
  numbers), and
* any subset of trials can be re-run, in any partitioning, with identical
  results.

For speed, all trials of a variant advance in lockstep as one numpy batch;
trials whose ensemble goes non-finite are frozen and recorded as diverged
(equivalent to the final-time NaN check, since the analysis cannot recover
a non-finite member). Every batched kernel is bit-identical to its
single-trial slice, so ``run_trial(i)`` reproduces record ``i`` of a batch
exactly.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .benchmarks import Climatology
from .filters import (
    InflationPolicy,
    _enkf_update,
    _esrf_update,
    _lambda_batch,
    _moments,
    _theta_batch,
    _xi_batch,
)
from .integrators import IntegratorSpec
from .models import ModelSpec, flow_batch, noise_factor
from .observations import ObservationOperator
from .stability import (
    NON_FINITE_ENSEMBLE,
    NON_FINITE_TRUTH,
    SOLVER_FAILURE,
    DivergenceVerdict,
    EnergyParams,
    energy_weight,
    innovation_bound,
)

__all__ = [
    "ExperimentConfig",
    "TrialRecord",
    "BatchSummary",
    "FILTER_VARIANTS",
    "parse_variant",
    "trial_rng",
    "run_trial",
    "run_trials",
    "run_batch",
    "rmse",
    "pattern_correlation",
    "sweep",
    "statistics_histograms",
    "write_trial_jsonl",
    "ROLE_TRUTH_INIT",
    "ROLE_OBS",
    "ROLE_PERT",
    "ROLE_SYS_TRUTH",
    "ROLE_SYS_ENS",
    "ROLE_INIT",
    "ROLE_INIT_ALT",
]

ROLE_TRUTH_INIT = 0
ROLE_OBS = 1
ROLE_PERT = 2
ROLE_SYS_TRUTH = 3
ROLE_SYS_ENS = 4
ROLE_INIT = 5
ROLE_INIT_ALT = 6

_FAMILIES = ("enkf", "etkf", "eakf")
_SUFFIXES = ("", "ai", "ci", "cai")
FILTER_VARIANTS = tuple(
    fam if not suf else f"{fam}-{suf}" for fam in _FAMILIES for suf in _SUFFIXES
)

_MAGNITUDE_CAP = 1e300


def parse_variant(name: str) -> tuple[str, str]:
    """Split a variant name like ``"enkf-cai"`` into (family, suffix)."""
    parts = name.lower().split("-")
    family, suffix = parts[0], "-".join(parts[1:])
    if family not in _FAMILIES or suffix not in _SUFFIXES:
        raise ValueError(
            f"unknown filter variant {name!r}; expected one of {FILTER_VARIANTS}"
        )
    return family, suffix


def trial_rng(base_seed: int, trial: int, role: int) -> np.random.Generator:
    """Counter-based generator for one (trial, role) substream."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(trial, role))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one twin-experiment batch needs.

    ``m1``/``m2`` are the adaptive trigger thresholds (derived from the
    benchmark machinery upstream); they are required only when an adaptive
    variant is run. ``variant_integrators`` optionally overrides the
    forecast integrator per variant; the truth is always generated by
    ``truth_integrator``.
    """

    model: ModelSpec
    operator: ObservationOperator
    climatology: Climatology
    variants: tuple[str, ...] = ("enkf", "enkf-ai", "enkf-ci", "enkf-cai")
    integrator: IntegratorSpec = field(
        default_factory=lambda: IntegratorSpec.explicit_euler(1e-4)
    )
    truth_integrator: IntegratorSpec | None = None
    variant_integrators: dict | None = None
    ensemble_size: int = 6
    h: float = 0.05
    total_time: float = 100.0
    record_start: float | None = None
    trials: int = 100
    base_seed: int = 2357
    rho: float = 0.1
    multiplicative: bool = False
    c_phi: float = 1.0
    m1: float | None = None
    m2: float | None = None
    monitor: bool = True
    esrf_literal_theta: bool = False
    energy_params: EnergyParams | None = None

    def __post_init__(self) -> None:
        for v in self.variants:
            parse_variant(v)
        n = self.n_steps
        if abs(n * self.h - self.total_time) > 1e-9 * self.total_time:
            raise ValueError("h must divide total_time")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.total_time / self.h)))

    @property
    def window_start_step(self) -> int:
        start = self.total_time / 2 if self.record_start is None else self.record_start
        return max(1, int(round(start / self.h)))

    def truth_spec(self) -> IntegratorSpec:
        return self.truth_integrator or self.integrator

    def integrator_for(self, variant: str) -> IntegratorSpec:
        if self.variant_integrators and variant in self.variant_integrators:
            return self.variant_integrators[variant]
        return self.integrator

    def policy_for(self, variant: str) -> InflationPolicy:
        _, suffix = parse_variant(variant)
        if suffix == "":
            return InflationPolicy.none()
        if suffix == "ci":
            return InflationPolicy.constant(self.rho, self.multiplicative)
        if self.m1 is None or self.m2 is None:
            raise ValueError(
                f"variant {variant!r} needs thresholds m1, m2 (derive them first)"
            )
        rho = self.rho if suffix == "cai" else 0.0
        return InflationPolicy.adaptive_inflation(
            self.c_phi, self.m1, self.m2, rho=rho, multiplicative=self.multiplicative
        )

    def energy(self) -> EnergyParams:
        if self.energy_params is not None:
            return self.energy_params
        if self.model.kind == "lorenz96":
            return EnergyParams.lorenz96_default(self.model.forcing, self.h)
        return EnergyParams(beta_h=0.5, k_h=1.0)


@dataclass
class TrialRecord:
    """Per-step diagnostics of one filter on one trial.

    Arrays have one slot per analysis step (step n lives at index n-1 and
    time n*h); entries from the divergence step onward are NaN and
    ``truncated_at`` holds that step, or None for a clean trial.
    """

    trial: int
    variant: str
    h: float
    total_time: float
    record_start: float
    error: np.ndarray
    theta: np.ndarray
    xi: np.ndarray
    lam: np.ndarray
    triggered: np.ndarray
    energy: np.ndarray
    innovation_ratio: np.ndarray
    forecast_trace: np.ndarray
    mean_trajectory: np.ndarray
    truth_trajectory: np.ndarray
    verdict: DivergenceVerdict
    truncated_at: int | None
    trigger_count: int
    first_trigger: int | None
    bound_violations: int
    solver_warnings: int = 0
    wall_time: float = 0.0

    @property
    def n_steps(self) -> int:
        return self.error.shape[0]


@dataclass(frozen=True)
class BatchSummary:
    """Aggregate of one variant over a batch of trials."""

    variant: str
    trials: int
    diverged: int
    divergence_fraction: float
    rmse: float
    pattern_correlation: float
    trials_triggered: int
    mean_triggers_per_triggered_trial: float
    mean_triggers_per_trial: float
    theta_stats: dict
    xi_stats: dict
    bound_violations: int
    solver_warnings: int
    avg_wall_per_trial: float


# ---------------------------------------------------------------------------
# shared per-trial realizations


@dataclass
class _SharedDraws:
    indices: tuple[int, ...]
    truth: np.ndarray  # (B, n+1, d), original frame
    truth_bad: np.ndarray  # (B,) first bad step (1-based), -1 if clean
    z: np.ndarray  # (B, n, q) whitened observations
    z_pert: np.ndarray  # (B, n, K, q)
    members0: np.ndarray  # (B, K, d) original frame
    sys_ens: np.ndarray | None  # (B, n, K, d) standard-normal draws


def _nonfinite_rows(arr: np.ndarray, axes) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return ~(np.abs(arr) <= _MAGNITUDE_CAP).all(axis=axes)


def shared_draws(
    config: ExperimentConfig, indices, init_role: int = ROLE_INIT
) -> _SharedDraws:
    """Draw and precompute everything the variants share for these trials."""
    indices = tuple(int(i) for i in indices)
    model, op, clim = config.model, config.operator, config.climatology
    B, K, d, q, n = len(indices), config.ensemble_size, model.dimension, op.q, config.n_steps
    Lc = clim.factor()
    # The truth and the filter ensemble are initialized from independent
    # substreams so an alternate-initialization run (the forgetting probe)
    # re-draws only the ensemble while keeping the same truth realization.
    init_truth = np.empty((B, d))
    init_members = np.empty((B, K, d))
    z_noise = np.empty((B, n, q))
    pert = np.empty((B, n, K, q))
    for b, t in enumerate(indices):
        init_truth[b] = trial_rng(config.base_seed, t, ROLE_TRUTH_INIT).standard_normal(d)
        init_members[b] = trial_rng(config.base_seed, t, init_role).standard_normal((K, d))
        z_noise[b] = trial_rng(config.base_seed, t, ROLE_OBS).standard_normal((n, q))
        pert[b] = trial_rng(config.base_seed, t, ROLE_PERT).standard_normal((n, K, q))
    # einsum keeps the contraction order independent of the batch size, so a
    # re-run of any subset of trials is bit-identical
    truth0 = clim.mean + np.einsum("bd,ed->be", init_truth, Lc)
    members0 = clim.mean + np.einsum("bkd,ed->bke", init_members, Lc)

    L = noise_factor(model)
    sys_truth = sys_ens = None
    if L is not None:
        sys_truth = np.empty((B, n, d))
        sys_ens = np.empty((B, n, K, d))
        for b, t in enumerate(indices):
            sys_truth[b] = trial_rng(config.base_seed, t, ROLE_SYS_TRUTH).standard_normal((n, d))
            sys_ens[b] = trial_rng(config.base_seed, t, ROLE_SYS_ENS).standard_normal((n, K, d))

    truth = np.empty((B, n + 1, d))
    truth[:, 0] = truth0
    truth_bad = np.full(B, -1)
    x = truth0.copy()
    tspec = config.truth_spec()
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, n + 1):
            x, _ = flow_batch(model, tspec, x, config.h)
            if L is not None:
                x = x + np.einsum("bd,ed->be", sys_truth[:, step - 1], L)
            bad = _nonfinite_rows(x, axes=1)
            fresh = bad & (truth_bad < 0)
            truth_bad[fresh] = step
            truth[:, step] = x
        z = op.project(op.rotate(truth[:, 1:])) + z_noise
        z_pert = z[:, :, None, :] + pert
    return _SharedDraws(
        indices=indices,
        truth=truth,
        truth_bad=truth_bad,
        z=z,
        z_pert=z_pert,
        members0=members0,
        sys_ens=sys_ens,
    )


# ---------------------------------------------------------------------------
# the lockstep engine


def _run_variant(
    config: ExperimentConfig, variant: str, shared: _SharedDraws
) -> list[TrialRecord]:
    family, _ = parse_variant(variant)
    policy = config.policy_for(variant)
    ispec = config.integrator_for(variant)
    model, op = config.model, config.operator
    h0, q, d, K = op.h0, op.q, op.d, config.ensemble_size
    n = config.n_steps
    B = len(shared.indices)
    rotate = not op.rotation_is_identity
    L = noise_factor(model)
    w_energy = energy_weight(config.energy(), op, K)
    # The bound ratio is recorded for every perturbed-observation variant so
    # runs of the plain filter can demonstrate that only adaptive inflation
    # keeps innovations below the bound value.
    monitored = (
        config.monitor
        and family == "enkf"
        and config.m1 is not None
        and config.m2 is not None
    )
    bound = (
        innovation_bound(K, config.m1, op.rho0, config.c_phi) if monitored else np.nan
    )

    rec = {
        name: np.full((B, n), np.nan)
        for name in ("error", "theta", "xi", "lam", "energy", "ratio", "trace")
    }
    trig = np.zeros((B, n), bool)
    mean_traj = np.full((B, n, d), np.nan)
    first_bad = np.full(B, -1)
    cause = [None] * B
    violations = np.zeros(B, int)
    warnings_ = np.zeros(B, int)

    V = op.rotate(shared.members0) if rotate else shared.members0.copy()
    alive = np.arange(B)
    truth_sq = np.einsum("bnd,bnd->bn", shared.truth, shared.truth)

    def kill(rows: np.ndarray, step: int, why: str) -> None:
        # rows index into the current alive array
        nonlocal alive, V
        for r in alive[rows]:
            first_bad[r] = step
            cause[r] = why
        keep = np.ones(len(alive), bool)
        keep[rows] = False
        alive = alive[keep]
        V = V[keep]

    t0 = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for step in range(1, n + 1):
            if alive.size == 0:
                break
            tb = shared.truth_bad[alive]
            hit = np.flatnonzero((tb > 0) & (tb <= step))
            if hit.size:
                for r in alive[hit]:
                    first_bad[r] = int(shared.truth_bad[r])
                    cause[r] = NON_FINITE_TRUTH
                keep = np.ones(len(alive), bool)
                keep[hit] = False
                alive, V = alive[keep], V[keep]
                if alive.size == 0:
                    break
            A = alive.size

            # forecast in the original frame
            states = op.unrotate(V) if rotate else V
            flat, ok = flow_batch(model, ispec, states.reshape(A * K, d), config.h)
            if L is not None:
                flat = flat + np.einsum(
                    "bd,ed->be", shared.sys_ens[alive, step - 1].reshape(A * K, d), L
                )
            fcst = flat.reshape(A, K, d)
            if rotate:
                fcst = op.rotate(fcst)
            okrow = ok.reshape(A, K).all(axis=1)
            finite = ~_nonfinite_rows(fcst, axes=(1, 2))
            # A non-converged implicit solve carries its best iterate and is
            # only a warning; trials die when a state actually goes
            # non-finite (cause tells whether a failed solve was involved).
            warnings_[alive[~okrow]] += 1
            dead = np.flatnonzero(~finite)
            if dead.size:
                fcst = fcst[finite]
                for r, was_ok in zip(alive[dead], okrow[dead]):
                    first_bad[r] = step
                    cause[r] = NON_FINITE_ENSEMBLE if was_ok else SOLVER_FAILURE
                keep = np.ones(len(alive), bool)
                keep[dead] = False
                alive, V = alive[keep], V[keep]
                if alive.size == 0:
                    break
                A = alive.size

            vbar, S, cov = _moments(fcst)
            hv = fcst[..., :q] * h0
            zp = shared.z_pert[alive, step - 1]
            z = shared.z[alive, step - 1]
            if family == "enkf":
                theta = _theta_batch(hv, zp, True)
            else:
                theta = _theta_batch(
                    hv, z, False, sqrt_form=not config.esrf_literal_theta
                )
            xi = _xi_batch(cov, q)
            stat_bad = np.flatnonzero(~(np.isfinite(theta) & np.isfinite(xi)))
            if stat_bad.size:
                keep = np.ones(A, bool)
                keep[stat_bad] = False
                kill(stat_bad, step, NON_FINITE_ENSEMBLE)
                fcst, vbar, S, cov = fcst[keep], vbar[keep], S[keep], cov[keep]
                hv, zp, z = hv[keep], zp[keep], z[keep]
                theta, xi = theta[keep], xi[keep]
                if alive.size == 0:
                    break
                A = alive.size
            lam, trg = _lambda_batch(policy, theta, xi)

            if family == "enkf":
                post = _enkf_update(fcst, cov, policy, lam, zp, h0)
                mean_post = post.mean(axis=1)
            else:
                post, mean_post = _esrf_update(
                    fcst, vbar, S, cov, policy, lam, z, h0, family
                )

            bad_post = np.flatnonzero(_nonfinite_rows(post, axes=(1, 2)))
            if bad_post.size:
                keep = np.ones(A, bool)
                keep[bad_post] = False
                kill(bad_post, step, NON_FINITE_ENSEMBLE)
                post, mean_post = post[keep], mean_post[keep]
                fcst, cov = fcst[keep], cov[keep]
                theta, xi, lam, trg = theta[keep], xi[keep], lam[keep], trg[keep]
                zp = zp[keep]
                if alive.size == 0:
                    break
                A = alive.size
            V = post

            i = step - 1
            mean_orig = op.unrotate(mean_post) if rotate else mean_post
            diff = mean_orig - shared.truth[alive, step]
            rec["error"][alive, i] = np.sqrt(np.einsum("ad,ad->a", diff, diff))
            rec["theta"][alive, i] = theta
            rec["xi"][alive, i] = xi
            rec["lam"][alive, i] = lam
            trig[alive, i] = trg
            rec["trace"][alive, i] = np.trace(cov, axis1=1, axis2=2)
            rec["energy"][alive, i] = w_energy * truth_sq[alive, step] + np.einsum(
                "akd,akd->a", post, post
            )
            mean_traj[alive, i] = mean_orig
            if monitored:
                innov = post[..., :q] * h0 - zp
                norms = np.sqrt(np.einsum("akq,akq->ak", innov, innov))
                worst = norms.max(axis=1)
                rec["ratio"][alive, i] = worst / bound
                violations[alive] += worst > bound + 1e-8
    elapsed = time.perf_counter() - t0

    records = []
    for b, t in enumerate(shared.indices):
        trunc = int(first_bad[b]) if first_bad[b] > 0 else None
        trg_steps = np.flatnonzero(trig[b])
        verdict = DivergenceVerdict(
            diverged=trunc is not None,
            first_step=trunc,
            cause=cause[b],
        )
        records.append(
            TrialRecord(
                trial=t,
                variant=variant,
                h=config.h,
                total_time=config.total_time,
                record_start=(
                    config.total_time / 2
                    if config.record_start is None
                    else config.record_start
                ),
                error=rec["error"][b],
                theta=rec["theta"][b],
                xi=rec["xi"][b],
                lam=rec["lam"][b],
                triggered=trig[b],
                energy=rec["energy"][b],
                innovation_ratio=rec["ratio"][b],
                forecast_trace=rec["trace"][b],
                mean_trajectory=mean_traj[b],
                truth_trajectory=shared.truth[b, 1:],
                verdict=verdict,
                truncated_at=trunc,
                trigger_count=int(trig[b].sum()),
                first_trigger=int(trg_steps[0]) + 1 if trg_steps.size else None,
                bound_violations=int(violations[b]),
                solver_warnings=int(warnings_[b]),
                wall_time=elapsed / B,
            )
        )
    return records


# ---------------------------------------------------------------------------
# public operations


def run_trial(
    config: ExperimentConfig,
    variant: str,
    trial_index: int,
    init_role: int = ROLE_INIT,
) -> TrialRecord:
    """Run one variant on one trial; bit-identical to its batch slice."""
    shared = shared_draws(config, [trial_index], init_role)
    return _run_variant(config, variant, shared)[0]


def run_trials(
    config: ExperimentConfig,
    variant: str,
    indices,
    shared: _SharedDraws | None = None,
    init_role: int = ROLE_INIT,
    jobs: int = 1,
) -> list[TrialRecord]:
    """Run one variant on a set of trials (lockstep, optionally chunked)."""
    indices = list(indices)
    if jobs > 1 and len(indices) > 1 and shared is None:
        from concurrent.futures import ProcessPoolExecutor

        chunks = [list(c) for c in np.array_split(indices, min(jobs, len(indices)))]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(run_trials, config, variant, chunk) for chunk in chunks
            ]
            out: list[TrialRecord] = []
            for f in futures:
                out.extend(f.result())
        return out
    if shared is None:
        shared = shared_draws(config, indices, init_role)
    return _run_variant(config, variant, shared)


def rmse(
    record: TrialRecord,
    h: float | None = None,
    total_time: float | None = None,
    record_start: float | None = None,
    literal: bool = False,
) -> float:
    """Posterior-mean error over the recorded window.

    Default is the root of the mean squared error over the window's
    analysis steps; ``literal`` instead normalizes the sum by T/2 (the
    sum-per-time form, which scales with 1/h).
    """
    if record.verdict.diverged:
        return math.nan
    h = record.h if h is None else h
    total_time = record.total_time if total_time is None else total_time
    record_start = record.record_start if record_start is None else record_start
    start = max(1, int(round(record_start / h)))
    window = record.error[start - 1 :]
    if literal:
        return float(np.sqrt(np.sum(window**2) * 2.0 / total_time))
    return float(np.sqrt(np.mean(window**2)))


def pattern_correlation(
    record: TrialRecord,
    climatology: Climatology,
    record_start: float | None = None,
) -> float:
    """Mean cosine similarity of the mean/truth deviations from climatology.

    Steps where either deviation has zero norm are skipped.
    """
    if record.verdict.diverged:
        return math.nan
    record_start = record.record_start if record_start is None else record_start
    start = max(1, int(round(record_start / record.h)))
    vdev = record.mean_trajectory[start - 1 :] - climatology.mean
    udev = record.truth_trajectory[start - 1 :] - climatology.mean
    num = np.einsum("nd,nd->n", vdev, udev)
    den = np.linalg.norm(vdev, axis=1) * np.linalg.norm(udev, axis=1)
    ok = den > 0
    if not ok.any():
        return math.nan
    return float(np.mean(num[ok] / den[ok]))


def statistics_histograms(
    records: list[TrialRecord],
    m1: float | None = None,
    m2: float | None = None,
    bins: int = 60,
    recorded_window_only: bool = True,
) -> dict:
    """Pooled theta/xi distributions over the analysis steps of all trials.

    By default pooling starts at each record's recording window (the
    second half of the run), matching the convention that transients are
    not part of the collected statistics; pass
    ``recorded_window_only=False`` to pool every step. Counts are also
    provided log-scaled (log10(1 + count)) for plotting. Exceedance
    probabilities are computed against m1/m2 when given.
    """
    out = {}
    for name, thr in (("theta", m1), ("xi", m2)):
        series = []
        for r in records:
            start = (
                max(1, int(round(r.record_start / r.h))) - 1
                if recorded_window_only
                else 0
            )
            series.append(getattr(r, name)[start:])
        pooled = np.concatenate(series)
        pooled = pooled[np.isfinite(pooled)]
        if pooled.size == 0:
            out[name] = {"count": 0}
            continue
        hi = max(float(pooled.max()), thr or 0.0)
        counts, edges = np.histogram(pooled, bins=bins, range=(0.0, hi * 1.001))
        entry = {
            "count": int(pooled.size),
            "mean": float(pooled.mean()),
            "edges": edges.tolist(),
            "counts": counts.tolist(),
            "log_counts": np.log10(1.0 + counts).tolist(),
        }
        if thr is not None:
            entry["threshold"] = float(thr)
            entry["exceedance"] = float(np.mean(pooled > thr))
        out[name] = entry
    return out


def _summarize(
    config: ExperimentConfig, variant: str, records: list[TrialRecord]
) -> BatchSummary:
    n_div = sum(r.verdict.diverged for r in records)
    if n_div:
        batch_rmse = math.nan
        batch_cor = math.nan
    else:
        batch_rmse = float(np.mean([rmse(r) for r in records]))
        batch_cor = float(
            np.mean([pattern_correlation(r, config.climatology) for r in records])
        )
    trig_counts = np.array([r.trigger_count for r in records])
    n_trig = int((trig_counts > 0).sum())
    hists = statistics_histograms(records, config.m1, config.m2)
    return BatchSummary(
        variant=variant,
        trials=len(records),
        diverged=n_div,
        divergence_fraction=n_div / len(records),
        rmse=batch_rmse,
        pattern_correlation=batch_cor,
        trials_triggered=n_trig,
        mean_triggers_per_triggered_trial=(
            float(trig_counts[trig_counts > 0].mean()) if n_trig else 0.0
        ),
        mean_triggers_per_trial=float(trig_counts.mean()),
        theta_stats=hists["theta"],
        xi_stats=hists["xi"],
        bound_violations=int(sum(r.bound_violations for r in records)),
        solver_warnings=int(sum(r.solver_warnings for r in records)),
        avg_wall_per_trial=float(np.mean([r.wall_time for r in records])),
    )


def run_batch(
    config: ExperimentConfig, jobs: int = 1, with_records: bool = False
):
    """Run every configured variant over the trial batch.

    Returns ``{variant: BatchSummary}``, or ``(summaries, records)`` with
    ``with_records``. Observation and noise realizations are shared across
    variants; aggregation folds in trial order, so results are independent
    of parallel scheduling.
    """
    indices = list(range(config.trials))
    summaries: dict[str, BatchSummary] = {}
    all_records: dict[str, list[TrialRecord]] = {}
    shared = None
    if jobs <= 1:
        shared = shared_draws(config, indices)
    for variant in config.variants:
        recs = run_trials(config, variant, indices, shared=shared, jobs=jobs)
        summaries[variant] = _summarize(config, variant, recs)
        if with_records:
            all_records[variant] = recs
    if with_records:
        return summaries, all_records
    return summaries


def sweep(
    config: ExperimentConfig, axis: str, values, jobs: int = 1
) -> list[dict]:
    """Re-run the batch along a one-parameter grid with shared seeds.

    ``axis`` is one of ``"rho"``, ``"h"``, ``"integrator"``. Returns one
    row per (value, variant) carrying the batch summary.
    """
    if axis not in ("rho", "h", "integrator"):
        raise ValueError("axis must be 'rho', 'h', or 'integrator'")
    rows = []
    for value in values:
        if axis == "rho":
            cfg = replace(config, rho=float(value))
            label = f"{value:g}"
        elif axis == "h":
            cfg = replace(config, h=float(value))
            label = f"{value:g}"
        else:
            cfg = replace(config, integrator=value)
            label = getattr(value, "scheme", str(value))
        summaries = run_batch(cfg, jobs=jobs)
        for variant, summary in summaries.items():
            rows.append(
                {
                    "axis": axis,
                    "value": label,
                    "variant": variant,
                    "divergence_fraction": summary.divergence_fraction,
                    "rmse": summary.rmse,
                    "pattern_correlation": summary.pattern_correlation,
                    "avg_wall_per_trial": summary.avg_wall_per_trial,
                }
            )
    return rows


def write_trial_jsonl(record: TrialRecord, path: str | Path, append: bool = False) -> None:
    """Stream one trial's per-step diagnostics as JSON lines."""
    stop = (
        record.truncated_at - 1 if record.truncated_at is not None else record.n_steps
    )
    mode = "a" if append else "w"
    with open(path, mode) as fh:
        for i in range(stop):
            fh.write(
                json.dumps(
                    {
                        "trial": record.trial,
                        "n": i + 1,
                        "error": record.error[i],
                        "theta": record.theta[i],
                        "xi": record.xi[i],
                        "lambda": record.lam[i],
                        "triggered": bool(record.triggered[i]),
                    }
                )
                + "\n"
            )
