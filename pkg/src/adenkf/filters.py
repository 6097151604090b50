"""Ensemble filters and the adaptive inflation machinery.

Two analysis families operate in the whitened observation frame:

* the stochastic filter updates every member against its own perturbed
  observation through the Kalman gain built from the (possibly inflated)
  forecast covariance;
* the square-root filters update the mean the same way but rebuild the
  posterior spread deterministically, either by a K x K transform applied on
  the member axis or by a d x d adjustment applied on the state axis, so the
  exact prior-posterior covariance relation holds without perturbations.

Inflation enlarges the covariance used in the *mean/member* update: a
constant term (additive or multiplicative) plus an adaptive term
``lam = c_phi * theta * (1 + xi)`` that switches on only when the innovation
statistic theta or the observed-unobserved cross-covariance statistic xi
exceeds its threshold. The square-root spread is always rebuilt from the
uninflated covariance, since additive inflation would raise its rank beyond
what K members can represent.

All analysis kernels are vectorized over a leading batch axis; the public
single-ensemble operations wrap the same kernels with a batch of one, so a
standalone call is bit-identical to the corresponding slice of a batched
run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import ModelSpec, noise_factor
from .integrators import IntegratorSpec
from .observations import Observation, ObservationOperator

__all__ = [
    "Ensemble",
    "InflationPolicy",
    "InflationDiagnostics",
    "AnalysisOutput",
    "FilterState",
    "NonFiniteStatistics",
    "forecast",
    "compute_statistics",
    "inflation_strength",
    "enkf_analysis",
    "etkf_analysis",
    "eakf_analysis",
    "assimilation_step",
    "etkf_transform",
    "eakf_adjustment",
]

_SV_RTOL = 1e-10  # pseudo-inverse cutoff for spread singular values


class NonFiniteStatistics(RuntimeError):
    """Theta or xi is NaN/inf: divergence has already occurred."""


@dataclass(frozen=True)
class Ensemble:
    """K state vectors stored as rows of a (K, d) array."""

    members: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.members, dtype=float)
        if m.ndim != 2 or m.shape[0] < 2:
            raise ValueError("an ensemble needs a (K, d) array with K >= 2")
        object.__setattr__(self, "members", m)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dimension(self) -> int:
        return self.members.shape[1]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def anomalies(self) -> np.ndarray:
        return self.members - self.mean()

    def covariance(self) -> np.ndarray:
        S = self.anomalies()
        return np.einsum("ki,kj->ij", S, S) / (self.size - 1)


@dataclass(frozen=True)
class InflationPolicy:
    """Constant and/or adaptive covariance inflation.

    ``rho`` is the constant strength (additive unless ``multiplicative``);
    the adaptive part is parameterized by ``c_phi`` and the trigger
    thresholds ``m1`` (on theta) and ``m2`` (on xi). Strict inequalities:
    a statistic exactly at its threshold does not trigger.
    """

    rho: float = 0.0
    multiplicative: bool = False
    adaptive: bool = False
    c_phi: float = 1.0
    m1: float = math.inf
    m2: float = math.inf

    def __post_init__(self) -> None:
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.adaptive and (self.c_phi <= 0 or self.m1 <= 0 or self.m2 <= 0):
            raise ValueError("adaptive inflation needs c_phi, m1, m2 > 0")

    @classmethod
    def none(cls) -> "InflationPolicy":
        return cls()

    @classmethod
    def constant(cls, rho: float, multiplicative: bool = False) -> "InflationPolicy":
        return cls(rho=rho, multiplicative=multiplicative)

    @classmethod
    def adaptive_inflation(
        cls,
        c_phi: float,
        m1: float,
        m2: float,
        rho: float = 0.0,
        multiplicative: bool = False,
    ) -> "InflationPolicy":
        return cls(
            rho=rho,
            multiplicative=multiplicative,
            adaptive=True,
            c_phi=c_phi,
            m1=m1,
            m2=m2,
        )


@dataclass(frozen=True)
class InflationDiagnostics:
    theta: float
    xi: float
    lam: float
    triggered: bool


@dataclass(frozen=True)
class AnalysisOutput:
    """Posterior ensemble plus the per-step diagnostics of one analysis."""

    posterior: Ensemble
    diagnostics: InflationDiagnostics
    innovation_norms: np.ndarray | float
    forecast_cov_trace: float


@dataclass
class FilterState:
    """Single-owner running state of one filter: ensemble, clock, rng."""

    ensemble: Ensemble
    step: int
    rng: np.random.Generator


# ---------------------------------------------------------------------------
# batched kernels (leading batch axis B)


def _moments(V: np.ndarray):
    vbar = V.mean(axis=1)
    S = V - vbar[:, None, :]
    cov = np.einsum("bki,bkj->bij", S, S) / (V.shape[1] - 1)
    return vbar, S, cov


def _theta_batch(hv: np.ndarray, obs, perturbed: bool, sqrt_form: bool = True):
    # hv: (B, K, q) forecast observations H V-hat
    if perturbed:
        dev = hv - obs  # obs: (B, K, q) perturbed copies
    else:
        dev = hv - obs[:, None, :]  # obs: (B, q)
    msq = np.einsum("bkq,bkq->b", dev, dev) / hv.shape[1]
    if perturbed or sqrt_form:
        return np.sqrt(msq)
    return msq


def _xi_batch(cov: np.ndarray, q: int):
    d = cov.shape[-1]
    if q >= d:
        return np.zeros(cov.shape[0])
    blk = cov[:, :q, q:]
    if q == 1:
        return np.sqrt(np.einsum("bij,bij->b", blk, blk))
    safe, bad = _sanitize(blk, 0.0)
    xi = np.linalg.svd(safe, compute_uv=False)[:, 0]
    xi[bad] = np.nan
    return xi


def _lambda_batch(policy: InflationPolicy, theta: np.ndarray, xi: np.ndarray):
    if not policy.adaptive:
        z = np.zeros_like(theta)
        return z, np.zeros(theta.shape, bool)
    trig = (theta > policy.m1) | (xi > policy.m2)
    lam = np.where(trig, policy.c_phi * theta * (1.0 + xi), 0.0)
    return lam, trig


def _inflated(cov: np.ndarray, policy: InflationPolicy, lam: np.ndarray):
    C = cov
    if policy.multiplicative and policy.rho > 0:
        C = (1.0 + policy.rho) * C
        add = lam
    else:
        add = lam + policy.rho
    eye = np.eye(cov.shape[-1])
    return C + np.asarray(add)[:, None, None] * eye


def _sanitize(mats: np.ndarray, fill):
    """Replace non-finite slices so batched LAPACK calls cannot throw."""
    bad = ~np.isfinite(mats).all(axis=(-2, -1))
    if not bad.any():
        return mats, bad
    safe = mats.copy()
    safe[bad] = fill
    return safe, bad


def _spd_solve(G: np.ndarray, rhs: np.ndarray):
    # G: (B, q, q) symmetric positive definite, rhs: (B, q, n)
    G, bad = _sanitize(G, np.eye(G.shape[-1]))
    L = np.linalg.cholesky(G)
    y = np.linalg.solve(L, rhs)
    out = np.linalg.solve(np.swapaxes(L, -1, -2), y)
    if bad.any():
        out[bad] = np.nan
    return out


def _gain_apply(V: np.ndarray, ctilde: np.ndarray, innov: np.ndarray, h0: np.ndarray):
    # innov: (B, K, q) member innovations (or (B, 1, q) for the mean update)
    q = h0.shape[0]
    cx = ctilde[:, :q, :q] * (h0[:, None] * h0[None, :])
    G = np.eye(q) + cx
    sol = _spd_solve(G, np.swapaxes(innov, 1, 2))  # (B, q, K)
    cht = ctilde[:, :, :q] * h0  # C-tilde H^T, (B, d, q)
    return V - np.swapaxes(cht @ sol, 1, 2)


def _enkf_update(V, cov, policy, lam, z_pert, h0):
    ctilde = _inflated(cov, policy, lam)
    innov = V[..., : h0.shape[0]] * h0 - z_pert
    return _gain_apply(V, ctilde, innov, h0)


def _etkf_spread(S: np.ndarray, h0: np.ndarray):
    K = S.shape[1]
    SH = S[..., : h0.shape[0]] * h0  # (B, K, q)
    M = np.eye(K) + np.einsum("bkq,blq->bkl", SH, SH) / (K - 1)
    M, bad = _sanitize(M, np.eye(K))
    w, W = np.linalg.eigh(M)
    T = (W * w[:, None, :] ** -0.5) @ np.swapaxes(W, 1, 2)
    out = T @ S
    if bad.any():
        out[bad] = np.nan
    return out


def _eakf_spread(S: np.ndarray, h0: np.ndarray):
    K = S.shape[1]
    q = h0.shape[0]
    Sc = np.swapaxes(S, 1, 2)  # (B, d, K) column-form spread
    Sc, bad = _sanitize(Sc, 0.0)
    U, s, Vt = np.linalg.svd(Sc, full_matrices=False)
    keep = s > _SV_RTOL * s[:, :1]
    if keep.all() and not bad.any():
        out = _eakf_apply(U, s, Vt, h0, K)
        return np.swapaxes(out, 1, 2)
    res = np.empty_like(Sc)
    for b in range(Sc.shape[0]):
        if bad[b]:
            res[b] = np.nan
            continue
        r = int(keep[b].sum())
        if r == 0:
            res[b] = 0.0
            continue
        out = _eakf_apply(
            U[b : b + 1, :, :r], s[b : b + 1, :r], Vt[b : b + 1, :r], h0, K
        )
        res[b] = out[0]
    return np.swapaxes(res, 1, 2)


def _eakf_apply(U, s, Vt, h0, K):
    # posterior spread U diag(s) W (I+D)^(-1/2) Vt over the kept singular
    # directions, where W D W^T diagonalizes the observed-space quadratic form
    HU = U[:, : h0.shape[0], :] * h0[:, None]
    M = (s[:, :, None] * np.einsum("bqm,bqn->bmn", HU, HU) * s[:, None, :]) / (K - 1)
    w, W = np.linalg.eigh(M)
    return U @ (s[:, :, None] * W * (1.0 + w[:, None, :]) ** -0.5) @ Vt


def _esrf_update(V, vbar, S, cov, policy, lam, z, h0, kind: str):
    ctilde = _inflated(cov, policy, lam)
    innov = (vbar[:, : h0.shape[0]] * h0 - z)[:, None, :]
    mean_post = _gain_apply(vbar[:, None, :], ctilde, innov, h0)[:, 0, :]
    spread = _etkf_spread(S, h0) if kind == "etkf" else _eakf_spread(S, h0)
    return mean_post[:, None, :] + spread, mean_post


# ---------------------------------------------------------------------------
# public single-ensemble operations


def forecast(
    ensemble: Ensemble,
    model: ModelSpec,
    integrator: IntegratorSpec,
    h: float,
    rng: np.random.Generator,
) -> Ensemble:
    """Advance every member independently with independent noise draws.

    Member order is preserved (needed for common-random-number
    comparisons); non-finite members are carried forward. A nonlinear-solver
    failure on a finite member raises :class:`ImplicitSolveFailed`.
    """
    from .integrators import ImplicitSolveFailed
    from .models import flow_batch

    out, ok = flow_batch(model, integrator, ensemble.members, h)
    if not ok.all():
        raise ImplicitSolveFailed(
            f"implicit step failed for member(s) {np.flatnonzero(~ok).tolist()}"
        )
    L = noise_factor(model)
    if L is not None:
        out = out + rng.standard_normal(out.shape) @ L.T
    return Ensemble(out)


def compute_statistics(
    forecast_ensemble: Ensemble,
    obs: Observation,
    op: ObservationOperator,
    variant: str = "enkf",
    literal_form: bool = False,
) -> tuple[float, float]:
    """The trigger statistics (theta, xi) of a forecast ensemble.

    theta measures the ensemble innovation: against the perturbed
    observations for the stochastic filter, against the plain observation
    for the square-root filters (where ``literal_form`` selects the
    mean-square variant without the square root). xi is the spectral norm
    of the observed/unobserved block of the forecast covariance; it is zero
    by definition when the whole state is observed.
    """
    if variant not in ("enkf", "esrf"):
        raise ValueError("variant must be 'enkf' or 'esrf'")
    V = forecast_ensemble.members[None]
    _, _, cov = _moments(V)
    hv = V[..., : op.q] * op.h0
    if variant == "enkf":
        if obs.z_perturbed is None:
            raise ValueError("the stochastic filter needs perturbed observations")
        theta = _theta_batch(hv, obs.z_perturbed[None], True)
    else:
        theta = _theta_batch(hv, obs.z[None], False, sqrt_form=not literal_form)
    xi = _xi_batch(cov, op.q)
    return float(theta[0]), float(xi[0])


def inflation_strength(
    policy: InflationPolicy, theta: float, xi: float
) -> InflationDiagnostics:
    """Adaptive inflation strength for one analysis step.

    Raises
    ------
    NonFiniteStatistics
        If theta or xi is NaN or infinite (divergence already occurred;
        the harness records it as catastrophic).
    """
    if not (math.isfinite(theta) and math.isfinite(xi)):
        raise NonFiniteStatistics(f"theta={theta}, xi={xi}")
    if theta < 0 or xi < 0:
        raise ValueError("theta and xi must be nonnegative")
    lam, trig = _lambda_batch(policy, np.array([theta]), np.array([xi]))
    return InflationDiagnostics(
        theta=theta, xi=xi, lam=float(lam[0]), triggered=bool(trig[0])
    )


def _diagnose(forecast_ensemble, obs, op, policy, variant, literal_form=False):
    theta, xi = compute_statistics(forecast_ensemble, obs, op, variant, literal_form)
    if policy.adaptive and not (math.isfinite(theta) and math.isfinite(xi)):
        diags = InflationDiagnostics(theta=theta, xi=xi, lam=math.nan, triggered=True)
        return diags
    lam, trig = _lambda_batch(policy, np.array([theta]), np.array([xi]))
    return InflationDiagnostics(
        theta=theta, xi=xi, lam=float(lam[0]), triggered=bool(trig[0])
    )


def enkf_analysis(
    forecast_ensemble: Ensemble,
    obs: Observation,
    op: ObservationOperator,
    policy: InflationPolicy,
) -> AnalysisOutput:
    """Perturbed-observation analysis applied identically to every member."""
    if obs.z_perturbed is None:
        raise ValueError("the stochastic filter needs perturbed observations")
    diags = _diagnose(forecast_ensemble, obs, op, policy, "enkf")
    V = forecast_ensemble.members[None]
    _, _, cov = _moments(V)
    lam = np.array([0.0 if not math.isfinite(diags.lam) else diags.lam])
    with np.errstate(over="ignore", invalid="ignore"):
        post = _enkf_update(V, cov, policy, lam, obs.z_perturbed[None], op.h0)
        innov = post[0, :, : op.q] * op.h0 - obs.z_perturbed
        norms = np.sqrt(np.einsum("kq,kq->k", innov, innov))
    return AnalysisOutput(
        posterior=Ensemble(post[0]),
        diagnostics=diags,
        innovation_norms=norms,
        forecast_cov_trace=float(np.trace(cov[0])),
    )


def _esrf_analysis(forecast_ensemble, obs, op, policy, kind, literal_form=False):
    diags = _diagnose(forecast_ensemble, obs, op, policy, "esrf", literal_form)
    V = forecast_ensemble.members[None]
    vbar, S, cov = _moments(V)
    lam = np.array([0.0 if not math.isfinite(diags.lam) else diags.lam])
    with np.errstate(over="ignore", invalid="ignore"):
        post, mean_post = _esrf_update(
            V, vbar, S, cov, policy, lam, obs.z[None], op.h0, kind
        )
        innov = mean_post[0, : op.q] * op.h0 - obs.z
    return AnalysisOutput(
        posterior=Ensemble(post[0]),
        diagnostics=diags,
        innovation_norms=float(np.linalg.norm(innov)),
        forecast_cov_trace=float(np.trace(cov[0])),
    )


def etkf_analysis(
    forecast_ensemble: Ensemble,
    obs: Observation,
    op: ObservationOperator,
    policy: InflationPolicy,
    literal_theta: bool = False,
) -> AnalysisOutput:
    """Square-root analysis with the K x K member-space transform."""
    return _esrf_analysis(forecast_ensemble, obs, op, policy, "etkf", literal_theta)


def eakf_analysis(
    forecast_ensemble: Ensemble,
    obs: Observation,
    op: ObservationOperator,
    policy: InflationPolicy,
    literal_theta: bool = False,
) -> AnalysisOutput:
    """Square-root analysis with the d x d state-space adjustment."""
    return _esrf_analysis(forecast_ensemble, obs, op, policy, "eakf", literal_theta)


def assimilation_step(
    state: FilterState,
    obs: Observation,
    model: ModelSpec,
    integrator: IntegratorSpec,
    op: ObservationOperator,
    policy: InflationPolicy,
    family: str,
    h: float,
) -> tuple[FilterState, AnalysisOutput]:
    """One full cycle: forecast, statistics, inflation, analysis."""
    fc = forecast(state.ensemble, model, integrator, h, state.rng)
    if family == "enkf":
        out = enkf_analysis(fc, obs, op, policy)
    elif family == "etkf":
        out = etkf_analysis(fc, obs, op, policy)
    elif family == "eakf":
        out = eakf_analysis(fc, obs, op, policy)
    else:
        raise ValueError(f"unknown filter family {family!r}")
    return FilterState(out.posterior, state.step + 1, state.rng), out


# ---------------------------------------------------------------------------
# explicit transform matrices (used by tests and diagnostics)


def etkf_transform(spread_cols: np.ndarray, op: ObservationOperator) -> np.ndarray:
    """The K x K transform ``(I + S^T H^T H S / (K-1))**-1/2`` (symmetric)."""
    S = np.asarray(spread_cols, dtype=float)  # (d, K)
    K = S.shape[1]
    HS = op.h0[:, None] * S[: op.q, :]
    M = np.eye(K) + HS.T @ HS / (K - 1)
    w, W = np.linalg.eigh(M)
    return (W * w ** -0.5) @ W.T


def eakf_adjustment(spread_cols: np.ndarray, op: ObservationOperator) -> np.ndarray:
    """The d x d adjustment built from the SVD of the column-form spread.

    Singular values below ``1e-10 * sigma_max`` are treated as zero by the
    pseudo-inverse; the eigenbasis of the observed-space quadratic form is
    taken block-respecting over the kept directions so the posterior
    covariance identity holds on the range of the spread.
    """
    S = np.asarray(spread_cols, dtype=float)
    d, K = S.shape
    U, s, _ = np.linalg.svd(S, full_matrices=False)
    keep = s > _SV_RTOL * (s[0] if s.size else 0.0)
    r = int(keep.sum())
    if r == 0:
        return np.zeros((d, d))
    Ur, sr = U[:, :r], s[:r]
    HU = op.h0[:, None] * Ur[: op.q, :]
    M = (sr[:, None] * (HU.T @ HU) * sr[None, :]) / (K - 1)
    w, W = np.linalg.eigh(M)
    return Ur @ (sr[:, None] * W * (1.0 + w) ** -0.5) @ (Ur.T / sr[:, None])
