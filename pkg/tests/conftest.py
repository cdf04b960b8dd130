import numpy as np
import pytest

from lsdr import MixtureSpec, ShiftConfig, generate


def finite_diff_grad(loss_fn, w, h=1e-4):
    """Central-difference gradient of a scalar loss over a flat vector."""
    w = np.asarray(w, dtype=np.float64)
    g = np.empty_like(w)
    for i in range(w.size):
        up, dn = w.copy(), w.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (loss_fn(up) - loss_fn(dn)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, tol=1e-5):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    worst = float(np.max(np.abs(analytic - numeric) / scale))
    assert worst <= tol, f"gradient mismatch: max relative error {worst:.2e}"


@pytest.fixture(scope="session")
def small_mixture():
    return MixtureSpec.orthogonal(3, 3, separation=6.0, cov_scale=1.0)


@pytest.fixture(scope="session")
def small_dataset(small_mixture):
    cfg = ShiftConfig(gamma_l=4.0, gamma_u=4.0, shape="reversed",
                      n1=120, m1=240, seed=11)
    return generate(small_mixture, cfg)
