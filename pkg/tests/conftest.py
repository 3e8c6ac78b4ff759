"""Shared fixtures and independent oracle helpers for the test suite.

The expensive regeneration tables are session scoped so the module tests and
the acceptance suite share one computation.
"""

import math

import numpy as np
import pytest

from evblink import ExperimentSpec, run_experiment

ACCEPTANCE_SEED = 20260809


@pytest.fixture(scope="session")
def fig1_table():
    """Signal-strength grid at paper dimensions: 10 c-values x 10 replicates."""
    spec = ExperimentSpec(scenario="single_fixed_s2n", replicates=10, n_c=10,
                          rng_seed=ACCEPTANCE_SEED)
    return run_experiment(spec)


@pytest.fixture(scope="session")
def fig23_table():
    """Heterogeneous-signal denoising and imputation, 20 replicates at
    missing levels 20/50/80 percent."""
    spec = ExperimentSpec(scenario="single_hetero", replicates=20,
                          rng_seed=ACCEPTANCE_SEED + 1,
                          missing_fracs=(0.2, 0.5, 0.8))
    return run_experiment(spec)


@pytest.fixture(scope="session")
def bidim_table():
    """Fully linked 2 x 2 design, 20 replicates."""
    spec = ExperimentSpec(scenario="bidim", replicates=20,
                          rng_seed=ACCEPTANCE_SEED + 2)
    return run_experiment(spec)


@pytest.fixture(scope="session")
def bidim_impute_table():
    """Entrywise and blockwise imputation on the 2 x 2 design, 10 replicates."""
    spec = ExperimentSpec(scenario="bidim_impute", replicates=10,
                          rng_seed=ACCEPTANCE_SEED + 3)
    return run_experiment(spec)


# ---------------------------------------------------------------------------
# independent oracles (kept free of the implementation paths they check)
# ---------------------------------------------------------------------------


def kappa_equation(x: float, m: int, n: int) -> float:
    """The threshold-constant crossing function, written directly."""
    return (x * math.sqrt(n / m) * math.log(x * math.sqrt(m / n) + 1.0)
            + x * math.sqrt(m / n) * math.log(x * math.sqrt(n / m) + 1.0)
            - 1.0)


def psi_objective_oracle(sigma: float, singular_values, m: int, n: int) -> float:
    """Direct evaluation of the profiled noise objective at one sigma."""
    if m < n:
        m, n = n, m
    alpha = n / m
    from evblink.shrinkage import retention_kappa
    kap = retention_kappa(m, n)
    c = 1.0 + alpha + math.sqrt(alpha) * (kap + 1.0 / kap)
    sv = np.sort(np.asarray(singular_values, dtype=float))[::-1]
    sv = sv[sv > 0]
    x = sv ** 2 / (m * sigma ** 2)
    total = float(np.sum(x - np.log(x)))
    kept = x[x > c]
    if kept.size:
        sa = math.sqrt(alpha)
        p3 = (kept - 1 - alpha
              + np.sqrt((kept - (1 + alpha)) ** 2 - 4 * alpha)) / (2 * sa)
        total += float(np.sum(np.log1p(sa * p3) + alpha * np.log1p(p3 / sa)
                              - sa * p3))
    return total


def alternating_ridge(x: np.ndarray, lam: float, rng, max_iter: int = 20000,
                      tol: float = 1e-12) -> np.ndarray:
    """Factor-penalized least squares by alternating ridge regressions:
    min |X - U V'|_F^2 + lam (|U|_F^2 + |V|_F^2), full working rank."""
    m, n = x.shape
    h = min(m, n)
    u = rng.standard_normal((m, h))
    v = rng.standard_normal((n, h))
    prev = u @ v.T
    eye = np.eye(h)
    for _ in range(max_iter):
        u = x @ v @ np.linalg.inv(v.T @ v + lam * eye)
        v = x.T @ u @ np.linalg.inv(u.T @ u + lam * eye)
        cur = u @ v.T
        if np.linalg.norm(cur - prev) < tol * max(1.0, np.linalg.norm(cur)):
            return cur
        prev = cur
    return prev
