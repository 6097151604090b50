"""Linear observation operators and the whitening rotation.

An arbitrary pair (H_raw, Gamma) with symmetric positive-definite noise
covariance Gamma is reduced by SVD to the canonical form in which the
operator is ``(H0, 0)`` with H0 diagonal positive and the observational
noise has identity covariance. The filters only ever see this canonical
frame; observations are synthesized directly in it.

Rows of the whitened observation that are independent of the signal
(zero singular values) carry no information and are dropped, so the
canonical observation dimension q never exceeds the state dimension d.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ObservationOperator",
    "Observation",
    "SingularGamma",
    "build_operator",
    "observe",
]

_GAMMA_MIN_EIG = 1e-12
_RANK_RTOL = 1e-12


class SingularGamma(ValueError):
    """The observational noise covariance is singular or nearly so."""


@dataclass(frozen=True)
class ObservationOperator:
    """Whitened form of a linear observation with Gaussian noise.

    Attributes
    ----------
    h_raw, gamma : ndarray
        The original (q0, d) operator and (q0, q0) noise covariance.
    h0 : ndarray, shape (q,)
        Diagonal of the canonical operator H0; all entries positive.
    rotation : ndarray, shape (d, d)
        Orthogonal signal rotation; rotated coordinates are
        ``rotation.T @ u``.
    whitener : ndarray, shape (q, q0)
        Maps raw observations into the canonical frame.
    rho0 : float
        Minimum eigenvalue of H0 @ H0.T, i.e. ``min(h0)**2``.
    """

    h_raw: np.ndarray
    gamma: np.ndarray
    h0: np.ndarray
    rotation: np.ndarray
    whitener: np.ndarray
    rho0: float

    @property
    def q(self) -> int:
        return self.h0.shape[0]

    @property
    def d(self) -> int:
        return self.rotation.shape[0]

    @property
    def norm(self) -> float:
        """Spectral norm of the canonical operator (= max diagonal entry)."""
        return float(self.h0.max())

    @property
    def h_white(self) -> np.ndarray:
        """The canonical (q, d) operator ``(H0, 0)`` as a dense matrix."""
        H = np.zeros((self.q, self.d))
        H[np.arange(self.q), np.arange(self.q)] = self.h0
        return H

    @property
    def rotation_is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(self.d)))

    def rotate(self, u: np.ndarray) -> np.ndarray:
        """Signal coordinates -> canonical frame, over leading axes."""
        # einsum so results do not depend on how leading axes are batched
        return np.einsum("...d,de->...e", u, self.rotation)

    def unrotate(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("...d,ed->...e", u, self.rotation)

    def project(self, u_rot: np.ndarray) -> np.ndarray:
        """Apply the canonical operator to rotated states: H0 * u[:q]."""
        return u_rot[..., : self.q] * self.h0

    def whiten_obs(self, z_raw: np.ndarray) -> np.ndarray:
        return z_raw @ self.whitener.T

    def unwhiten_obs(self, z: np.ndarray) -> np.ndarray:
        return z @ np.linalg.pinv(self.whitener).T


def build_operator(h_raw: np.ndarray, gamma: np.ndarray) -> ObservationOperator:
    """Whiten (H_raw, Gamma) into the canonical identity-noise frame.

    Raises
    ------
    SingularGamma
        If Gamma's smallest eigenvalue is below 1e-12.
    """
    h_raw = np.atleast_2d(np.asarray(h_raw, dtype=float))
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    q0, d = h_raw.shape
    if gamma.shape != (q0, q0):
        raise ValueError("gamma must be square with one row per observation")
    if not np.allclose(gamma, gamma.T, atol=1e-12 * max(1.0, np.abs(gamma).max())):
        raise ValueError("gamma must be symmetric")
    w, E = np.linalg.eigh(gamma)
    if w.min() < _GAMMA_MIN_EIG:
        raise SingularGamma(
            f"gamma minimum eigenvalue {w.min():.3e} below {_GAMMA_MIN_EIG:g}"
        )
    g_isqrt = (E / np.sqrt(w)) @ E.T
    phi, s, psi_t = np.linalg.svd(g_isqrt @ h_raw, full_matrices=True)
    keep = s > _RANK_RTOL * s[0] if s.size else np.zeros(0, bool)
    q = int(keep.sum())
    if q == 0:
        raise ValueError("observation operator has rank zero")
    h0 = s[:q].copy()
    rotation = psi_t.T  # columns are the rotated-frame basis in signal space
    whitener = phi[:, :q].T @ g_isqrt
    for a in (h_raw, gamma, h0, rotation, whitener):
        a.setflags(write=False)
    return ObservationOperator(
        h_raw=h_raw,
        gamma=gamma,
        h0=h0,
        rotation=rotation,
        whitener=whitener,
        rho0=float(h0.min() ** 2),
    )


@dataclass(frozen=True)
class Observation:
    """One whitened observation, optionally with perturbed copies.

    ``z_perturbed`` holds the K perturbed observations consumed by the
    stochastic (perturbed-observation) filter; it is ``None`` for the
    square-root filters, which use ``z`` directly.
    """

    z: np.ndarray
    z_perturbed: np.ndarray | None
    index: int = 0


def observe(
    op: ObservationOperator,
    truth: np.ndarray,
    ensemble_size: int,
    perturb: bool,
    rng: np.random.Generator,
    index: int = 0,
) -> Observation:
    """Synthesize a whitened observation of ``truth``.

    The noise is drawn directly in the canonical frame (identity
    covariance). With ``perturb`` set, ``ensemble_size`` i.i.d. perturbed
    copies are generated for the perturbed-observation analysis.
    """
    z = op.project(op.rotate(np.asarray(truth, dtype=float)))
    z = z + rng.standard_normal(op.q)
    z_pert = None
    if perturb:
        z_pert = z + rng.standard_normal((ensemble_size, op.q))
    return Observation(z=z, z_perturbed=z_pert, index=index)
