"""Signal models: Lorenz-96, a linear-Gaussian test model, and system noise.

The truth sequence is ``U_n = flow(U_{n-1}) + noise_n`` where the flow is a
deterministic integration of the model vector field over one observation
interval and the noise is mean-zero Gaussian with a per-step covariance
(zero in the chaotic twin experiments; kept in the API for the linear
oracle model).
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._l96_kernels import l96_fixed_step_interval
from .integrators import IntegratorSpec, ImplicitSolveFailed, integrate_interval

__all__ = [
    "ModelSpec",
    "CholeskyFailed",
    "flow_map",
    "flow_batch",
    "sample_system_noise",
    "advance_signal",
    "noise_factor",
    "drift",
    "drift_jacobian",
    "discrete_noise_from_diffusion",
]

_PSD_TOL = 1e-10


class CholeskyFailed(ValueError):
    """A noise covariance is numerically indefinite beyond tolerance."""


@dataclass(frozen=True)
class ModelSpec:
    """A signal model: Lorenz-96 with cyclic indices or linear-Gaussian.

    Use the :meth:`lorenz96` / :meth:`linear_gaussian` constructors. The
    per-step system-noise covariance ``noise_cov`` may be ``None`` (zero
    noise). For the linear model, ``discrete=True`` means the drift matrix
    is itself the one-step transition map; otherwise the flow over time h
    is the matrix exponential ``expm(drift * h)``.
    """

    kind: str
    dimension: int
    forcing: float = 0.0
    drift_matrix: np.ndarray | None = None
    discrete: bool = False
    noise_cov: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("lorenz96", "linear_gaussian"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if self.noise_cov is not None:
            R = np.asarray(self.noise_cov, dtype=float)
            if R.shape != (self.dimension, self.dimension):
                raise ValueError("noise_cov must be d x d")
            if not np.allclose(R, R.T, atol=1e-12 * max(1.0, np.abs(R).max())):
                raise ValueError("noise_cov must be symmetric")
            object.__setattr__(self, "noise_cov", R)
        if self.kind == "linear_gaussian":
            A = np.asarray(self.drift_matrix, dtype=float)
            if A.shape != (self.dimension, self.dimension):
                raise ValueError("drift_matrix must be d x d")
            object.__setattr__(self, "drift_matrix", A)

    @classmethod
    def lorenz96(
        cls, forcing: float, dimension: int = 5, noise_cov: np.ndarray | None = None
    ) -> "ModelSpec":
        return cls(kind="lorenz96", dimension=dimension, forcing=forcing, noise_cov=noise_cov)

    @classmethod
    def linear_gaussian(
        cls,
        drift: np.ndarray,
        noise_cov: np.ndarray | None = None,
        discrete: bool = False,
    ) -> "ModelSpec":
        drift = np.asarray(drift, dtype=float)
        return cls(
            kind="linear_gaussian",
            dimension=drift.shape[0],
            drift_matrix=drift,
            discrete=discrete,
            noise_cov=noise_cov,
        )


def drift(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Model vector field, vectorized over leading axes of ``x``."""
    if model.kind == "lorenz96":
        xm1 = np.roll(x, 1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        xp1 = np.roll(x, -1, axis=-1)
        return xm1 * (xp1 - xm2) - x + model.forcing
    if model.discrete:
        raise ValueError("a discrete-map model has no continuous drift")
    return x @ model.drift_matrix.T


def drift_jacobian(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Jacobian of the vector field at ``x``, shape ``(..., d, d)``."""
    d = model.dimension
    if model.kind == "linear_gaussian":
        if model.discrete:
            raise ValueError("a discrete-map model has no continuous drift")
        return np.broadcast_to(model.drift_matrix, x.shape[:-1] + (d, d)).copy()
    x = np.asarray(x, dtype=float)
    J = np.zeros(x.shape[:-1] + (d, d))
    i = np.arange(d)
    im1, im2, ip1 = (i - 1) % d, (i - 2) % d, (i + 1) % d
    xm1 = x[..., im1]
    # Accumulate so that coinciding cyclic indices (small d) stay correct.
    np.add.at(J, (..., i, im1), x[..., ip1] - x[..., im2])
    np.add.at(J, (..., i, ip1), xm1)
    np.add.at(J, (..., i, im2), -xm1)
    np.add.at(J, (..., i, i), -1.0)
    return J


@functools.lru_cache(maxsize=32)
def _linear_transition(a_bytes: bytes, d: int, h: float) -> np.ndarray:
    A = np.frombuffer(a_bytes).reshape(d, d)
    M = scipy.linalg.expm(A * h)
    M.setflags(write=False)
    return M


def flow_batch(
    model: ModelSpec, integrator: IntegratorSpec, states: np.ndarray, h: float
):
    """Deterministic flow over time ``h`` for a batch of states.

    Returns ``(advanced, ok)``; see :func:`integrators.integrate_interval`.
    Linear-Gaussian models use the exact transition (matrix exponential, or
    the drift matrix itself when ``discrete``) and ignore the integrator.
    """
    states = np.asarray(states, dtype=float)
    if model.kind == "linear_gaussian":
        if model.discrete:
            M = model.drift_matrix
        else:
            M = _linear_transition(model.drift_matrix.tobytes(), model.dimension, h)
        # shape-stable contraction: results do not depend on batch size
        out = np.einsum("...d,ed->...e", states, M)
        return out, np.ones(states.shape[:-1], bool)
    if integrator.scheme in ("explicit_euler", "rk4"):
        # fused kernel: the fixed-step schemes run hundreds of micro-steps
        # per cycle, where vectorized call overhead would dominate
        n = integrator.micro_steps(h)
        out = l96_fixed_step_interval(
            states, model.forcing, integrator.scheme, h / n, n
        )
        return out, np.ones(states.shape[:-1], bool)
    f = lambda x: drift(model, x)
    jac = lambda x: drift_jacobian(model, x)
    return integrate_interval(f, jac, integrator, states, h)


def flow_map(
    model: ModelSpec, integrator: IntegratorSpec, state: np.ndarray, h: float
) -> np.ndarray:
    """Deterministic flow of a single state over time ``h``.

    Raises
    ------
    ImplicitSolveFailed
        If the implicit scheme's Newton iteration fails on a finite state.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out, ok = flow_batch(model, integrator, np.asarray(state, dtype=float), h)
    if not np.all(ok):
        raise ImplicitSolveFailed(
            f"nonlinear solve failed after {integrator.newton_max_iter} iterations"
        )
    return out


def noise_factor(model: ModelSpec) -> np.ndarray | None:
    """PSD factor L with L @ L.T = noise_cov, or None for zero noise.

    Raises :class:`CholeskyFailed` when the covariance has an eigenvalue
    below ``-1e-10`` relative to its largest one.
    """
    if model.noise_cov is None:
        return None
    R = model.noise_cov
    if not R.any():
        return None
    w, V = np.linalg.eigh(R)
    if w.min() < -_PSD_TOL * max(1.0, w.max()):
        raise CholeskyFailed(
            f"noise covariance indefinite: min eigenvalue {w.min():.3e}"
        )
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_system_noise(model: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """One mean-zero Gaussian increment with covariance ``noise_cov``."""
    L = noise_factor(model)
    if L is None:
        return np.zeros(model.dimension)
    return L @ rng.standard_normal(model.dimension)


def advance_signal(
    model: ModelSpec,
    integrator: IntegratorSpec,
    state: np.ndarray,
    h: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One step of the signal chain: flow over ``h`` plus system noise."""
    return flow_map(model, integrator, state, h) + sample_system_noise(model, rng)


def discrete_noise_from_diffusion(A: np.ndarray, Q: np.ndarray, h: float) -> np.ndarray:
    """Per-step noise covariance of an SDE ``du = A u dt + dW`` observed at
    interval ``h``, where ``Q`` is the diffusion covariance (Van Loan)."""
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    d = A.shape[0]
    M = np.zeros((2 * d, 2 * d))
    M[:d, :d] = A
    M[:d, d:] = Q
    M[d:, d:] = -A.T
    E = scipy.linalg.expm(M * h)
    return E[:d, d:] @ E[:d, :d].T
