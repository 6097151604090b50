import numpy as np
import pytest

from adenkf import (
    IntegratorSpec,
    ModelSpec,
    build_operator,
    estimate_climatology,
)


class ZeroRng:
    """Generator stub that draws exact zeros (or a fixed vector once)."""

    def __init__(self, fixed=None):
        self.fixed = fixed

    def standard_normal(self, size=None):
        out = np.zeros(size if size is not None else ())
        if self.fixed is not None:
            flat = out.reshape(-1)
            vals = np.asarray(self.fixed, dtype=float).reshape(-1)
            flat[: vals.size] = vals
            self.fixed = None
        return out


@pytest.fixture
def paper_operator():
    return build_operator([[1.0, 0.0, 0.0, 0.0, 0.0]], [[0.01]])


@pytest.fixture(scope="session")
def f4_model():
    return ModelSpec.lorenz96(4.0)


@pytest.fixture(scope="session")
def f4_climatology(f4_model):
    # Short run: harness tests only need a sane initialization Gaussian.
    return estimate_climatology(
        f4_model,
        IntegratorSpec.rk4(2.5e-3),
        total_time=640.0,
        burn_in=10.0,
        rng=np.random.default_rng(11),
        chains=8,
    )


def random_spd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T + 0.5 * np.eye(n))
