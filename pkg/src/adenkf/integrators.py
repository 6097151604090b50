"""Time-stepping schemes for the deterministic part of the signal dynamics.

All steppers advance a batch of states over one observation interval and are
vectorized over arbitrary leading axes, so a single call can move one state,
one ensemble, or every ensemble of a whole trial batch. Non-finite states are
passed through untouched: divergence is detected downstream, never masked
here.

The fixed-step schemes require the micro step to divide the interval to one
part in 1e9 (an integer number of micro-steps per assimilation cycle).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "IntegratorSpec",
    "ImplicitSolveFailed",
    "integrate_interval",
]

_DIVIDE_RTOL = 1e-9

# Dormand-Prince 5(4) tableau.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_DP_E = _DP_B5 - _DP_B4


class ImplicitSolveFailed(RuntimeError):
    """Newton iteration for an implicit step did not meet its tolerance."""


@dataclass(frozen=True)
class IntegratorSpec:
    """Configuration of a time-stepping scheme.

    Parameters
    ----------
    scheme : str
        One of ``"explicit_euler"``, ``"rk4"``, ``"implicit_euler"``,
        ``"rk45"``.
    dt : float
        Micro step of the fixed-step schemes. Ignored by ``rk45``.
    newton_tol, newton_max_iter : float, int
        Convergence tolerance and iteration cap of the damped Newton solver
        used by ``implicit_euler``.
    rtol, atol : float
        Error-control tolerances of the adaptive ``rk45`` scheme.
    max_steps : int
        Cap on accepted+rejected ``rk45`` steps per interval and trajectory;
        exceeding it marks the trajectory as failed instead of hanging.
    """

    scheme: str
    dt: float = 0.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    rtol: float = 1e-3
    atol: float = 1e-6
    max_steps: int = 100_000

    def __post_init__(self) -> None:
        if self.scheme not in ("explicit_euler", "rk4", "implicit_euler", "rk45"):
            raise ValueError(f"unknown integrator scheme {self.scheme!r}")
        if self.scheme != "rk45" and self.dt <= 0:
            raise ValueError(f"{self.scheme} requires a positive micro step dt")

    @classmethod
    def explicit_euler(cls, dt: float) -> "IntegratorSpec":
        return cls(scheme="explicit_euler", dt=dt)

    @classmethod
    def rk4(cls, dt: float) -> "IntegratorSpec":
        return cls(scheme="rk4", dt=dt)

    @classmethod
    def implicit_euler(
        cls, dt: float, tol: float = 1e-10, max_iter: int = 50
    ) -> "IntegratorSpec":
        return cls(scheme="implicit_euler", dt=dt, newton_tol=tol, newton_max_iter=max_iter)

    @classmethod
    def rk45(cls, rtol: float = 1e-3, atol: float = 1e-6) -> "IntegratorSpec":
        return cls(scheme="rk45", rtol=rtol, atol=atol)

    def micro_steps(self, h: float) -> int:
        """Number of micro-steps per interval; checks divisibility to 1e-9."""
        n = max(1, int(round(h / self.dt)))
        if abs(n * self.dt - h) > _DIVIDE_RTOL * h:
            raise ValueError(
                f"micro step dt={self.dt} does not divide the observation "
                f"interval h={h} to one part in 1e9"
            )
        return n


def integrate_interval(f, jac, spec: IntegratorSpec, states: np.ndarray, h: float):
    """Advance ``states`` by time ``h`` under the vector field ``f``.

    Parameters
    ----------
    f : callable
        Vector field, mapping ``(..., d)`` arrays to same-shape arrays.
    jac : callable or None
        Jacobian of ``f``, mapping ``(..., d)`` to ``(..., d, d)``. Required
        by ``implicit_euler`` only.
    spec : IntegratorSpec
    states : ndarray, shape (..., d)
    h : float

    Returns
    -------
    out : ndarray, shape (..., d)
        Advanced states. Non-finite inputs are returned unchanged; failed
        trajectories hold NaN.
    ok : ndarray of bool, shape (...,)
        False where the scheme itself failed (Newton non-convergence, step
        size underflow); blow-up of an explicit scheme is *not* a failure,
        it simply produces non-finite output.
    """
    states = np.asarray(states, dtype=float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if spec.scheme == "explicit_euler":
            return _explicit_euler(f, spec, states, h), np.ones(states.shape[:-1], bool)
        if spec.scheme == "rk4":
            return _rk4(f, spec, states, h), np.ones(states.shape[:-1], bool)
        if spec.scheme == "implicit_euler":
            return _implicit_euler(f, jac, spec, states, h)
        return _rk45(f, spec, states, h)


def _explicit_euler(f, spec, x, h):
    n = spec.micro_steps(h)
    dt = h / n
    for _ in range(n):
        x = x + dt * f(x)
    return x


def _rk4(f, spec, x, h):
    n = spec.micro_steps(h)
    dt = h / n
    for _ in range(n):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def _implicit_euler(f, jac, spec, states, h):
    if jac is None:
        raise ValueError("implicit_euler requires an analytic Jacobian")
    lead = states.shape[:-1]
    d = states.shape[-1]
    x = states.reshape(-1, d).copy()
    ok = np.ones(x.shape[0], bool)
    n = spec.micro_steps(h)
    dt = h / n
    eye = np.eye(d)
    # Non-finite trajectories pass through untouched.
    active0 = np.isfinite(x).all(axis=1)
    for _ in range(n):
        idx = np.flatnonzero(active0)
        if idx.size == 0:
            break
        xi = x[idx]
        y = xi + dt * f(xi)  # explicit predictor as warm start
        res = y - xi - dt * f(y)
        # Track the lowest-residual iterate so a non-converged step still
        # advances to the best point found, like a generic black-box solver.
        best_y = xi.copy()
        best_r = np.where(np.isfinite(res).all(axis=1), np.abs(res).max(axis=1), np.inf)
        finite_start = np.isfinite(y).all(axis=1)
        best_y[finite_start] = y[finite_start]
        live = np.ones(len(idx), bool)
        for _ in range(spec.newton_max_iter):
            rnorm = np.abs(res).max(axis=1)
            tol = spec.newton_tol * (1.0 + np.abs(y).max(axis=1))
            live &= ~(rnorm <= tol)
            live &= np.isfinite(rnorm)
            sub = np.flatnonzero(live)
            if sub.size == 0:
                break
            J = eye - dt * jac(y[sub])
            try:
                delta = np.linalg.solve(J, res[sub][..., None])[..., 0]
            except np.linalg.LinAlgError:
                live[sub] = False
                break
            # Damped update: halve the step while the residual grows.
            ycand = y[sub] - delta
            rcand = ycand - xi[sub] - dt * f(ycand)
            for _ in range(8):
                worse = np.abs(rcand).max(axis=1) > np.abs(res[sub]).max(axis=1)
                worse |= ~np.isfinite(rcand).all(axis=1)
                if not worse.any():
                    break
                delta[worse] *= 0.5
                ycand[worse] = y[sub][worse] - delta[worse]
                rcand[worse] = (
                    ycand[worse] - xi[sub][worse] - dt * f(ycand[worse])
                )
            y[sub] = ycand
            res[sub] = rcand
            rc = np.abs(rcand).max(axis=1)
            improved = np.isfinite(rc) & (rc < best_r[sub]) & np.isfinite(ycand).all(axis=1)
            upd = sub[improved]
            best_y[upd] = ycand[improved]
            best_r[upd] = rc[improved]
        rnorm = np.abs(res).max(axis=1)
        tol = spec.newton_tol * (1.0 + np.abs(y).max(axis=1))
        converged = np.isfinite(rnorm) & (rnorm <= tol)
        ok[idx[~converged]] = False
        x[idx[converged]] = y[converged]
        x[idx[~converged]] = best_y[~converged]
    return x.reshape(states.shape), ok.reshape(lead)


def _rk45(f, spec, states, h):
    lead = states.shape[:-1]
    d = states.shape[-1]
    x = states.reshape(-1, d).copy()
    nb = x.shape[0]
    ok = np.ones(nb, bool)
    t = np.zeros(nb)
    dt = np.full(nb, h / 10.0)
    dt_floor = 1e-14 * max(1.0, h)
    active = np.isfinite(x).all(axis=1)
    k = np.empty((7, nb, d))
    for _ in range(spec.max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xi = x[idx]
        dtc = np.minimum(dt[idx], h - t[idx])
        step = dtc[:, None]
        k[0, idx] = f(xi)
        for s in range(1, 6):
            incr = np.zeros_like(xi)
            for j, a in enumerate(_DP_A[s]):
                incr += a * k[j, idx]
            k[s, idx] = f(xi + step * incr)
        y5 = xi + step * sum(
            b * k[j, idx] for j, b in enumerate(_DP_B5[:6]) if b != 0.0
        )
        k[6, idx] = f(y5)
        err = step * sum(e * k[j, idx] for j, e in enumerate(_DP_E) if e != 0.0)
        scale = spec.atol + spec.rtol * np.maximum(np.abs(xi), np.abs(y5))
        ratio = np.sqrt(np.mean((err / scale) ** 2, axis=1))
        accept = ratio <= 1.0
        bad = ~np.isfinite(ratio)
        accept &= ~bad
        # Step-size controller.
        with np.errstate(divide="ignore", over="ignore"):
            factor = np.where(
                bad, 0.25, np.clip(0.9 * ratio ** -0.2, 0.2, 5.0)
            )
        acc = idx[accept]
        x[acc] = y5[accept]
        t[acc] += dtc[accept]
        dt[idx] = np.maximum(dtc * factor, dt_floor)
        # Trajectories that blew up or cannot shrink further fail hard.
        dead = bad & (dtc <= dt_floor * 2)
        x[idx[dead]] = np.nan
        ok[idx[dead]] = False
        active[idx[dead]] = False
        done = t[idx] >= h * (1.0 - 1e-12)
        active[idx[done]] = False
    else:
        x[active] = np.nan
        ok[active] = False
    return x.reshape(states.shape), ok.reshape(lead)
