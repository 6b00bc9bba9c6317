import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sine_field(L, m=1, axis=0):
    x = np.arange(L)
    s = np.sin(2 * np.pi * m * x / L)
    return np.repeat(s[:, None], L, axis=1) if axis == 0 else np.repeat(s[None, :], L, axis=0)


def scaling_shape(chi):
    return lambda y: (1.0 + np.asarray(y) ** 2) ** chi


def synthetic_collapse(A, B, beta, chi, dr, dt, rel_err=0.0, rng=None):
    """Correlation points ``A dt^(2 beta) f(B dr dt^(-beta/chi))`` with multiplicative noise."""
    R, T = np.meshgrid(np.asarray(dr, float), np.asarray(dt, float), indexing="ij")
    R, T = R.ravel(), T.ravel()
    v = A * T ** (2 * beta) * scaling_shape(chi)(B * R * T ** (-beta / chi))
    err = np.full_like(v, rel_err) * v if rel_err > 0 else 1e-3 * v
    if rng is not None and rel_err > 0:
        v = v * (1 + rel_err * rng.standard_normal(v.size))
    return {"dr": R, "dt": T, "value": v, "stderr": err}


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the acceptance summary."""

    def record(number, passed, detail):
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}")
