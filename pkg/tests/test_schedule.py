import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrl.schedule import ScheduleError, adjusted_step_size, build_cosine_schedule, snr_embedding_input


def mp_lambda(u, lmax=9.8, lmin=-5.1, dps=50):
    """Independent high-precision evaluation of the cosine log-SNR."""
    with mpmath.workdps(dps):
        b = mpmath.atan(mpmath.exp(-mpmath.mpf(lmax) / 2))
        a = mpmath.atan(mpmath.exp(-mpmath.mpf(lmin) / 2)) - b
        return -2 * mpmath.log(mpmath.tan(a * mpmath.mpf(u) + b))


def test_endpoints_exact():
    s = build_cosine_schedule(6, 9.8, -5.1, 0.054)
    assert s.lam[0] == 9.8
    assert s.lam[6] == -5.1
    # the unpinned formula already lands on the endpoints
    assert float(mp_lambda(0)) == pytest.approx(9.8, rel=1e-12)
    assert float(mp_lambda(1)) == pytest.approx(-5.1, rel=1e-12)


def test_mid_grid_matches_high_precision():
    s = build_cosine_schedule(6)
    ref = mp_lambda(mpmath.mpf(1) / 2)
    assert abs(s.lam[3] - float(ref)) < 1e-9
    assert float(ref) == pytest.approx(0.1411, abs=5e-5)
    for t in range(7):
        assert abs(s.lam[t] - float(mp_lambda(mpmath.mpf(t) / 6))) < 1e-9


def test_alpha_bar_zero():
    s = build_cosine_schedule(6)
    with mpmath.workdps(40):
        ref = mpmath.sqrt(1 / (1 + mpmath.exp(-mpmath.mpf("9.8"))))
    assert s.alpha_bar[0] == pytest.approx(float(ref), abs=1e-13)
    assert s.alpha_bar[0] == pytest.approx(0.9999723, abs=1e-7)


def test_embedding_input():
    s = build_cosine_schedule(6)
    assert snr_embedding_input(s, 0) == 9.8
    assert snr_embedding_input(s, 6) == -5.1
    with pytest.raises(IndexError):
        snr_embedding_input(s, 7)
    with pytest.raises(IndexError):
        snr_embedding_input(s, -1)


def test_adjusted_step_size():
    s = build_cosine_schedule(6)
    for t in range(6):
        assert adjusted_step_size(s, t, 15, 15) == s.step_size[t]
        assert adjusted_step_size(s, t, 15, 3) == pytest.approx(s.step_size[t] * math.sqrt(5), rel=1e-15)
        assert adjusted_step_size(s, t, 15, 8) / s.step_size[t] == pytest.approx(1.3693, abs=1e-4)
    with pytest.raises(ValueError):
        adjusted_step_size(s, 0, 15, 0)
    with pytest.raises(ValueError):
        adjusted_step_size(s, 0, 0, 3)


def test_step_size_formula():
    s = build_cosine_schedule(5, step_constant=0.054)
    for t in range(5):
        assert s.step_size[t] ** 2 == pytest.approx(0.054 * s.sigma_bar[t] * s.sigma[t + 1] ** 2, rel=1e-13)


@pytest.mark.parametrize("kwargs", [
    dict(T=1), dict(T=6, lambda_max=-5.1, lambda_min=9.8), dict(T=6, lambda_max=math.inf),
    dict(T=6, lambda_min=math.nan), dict(T=6, step_constant=0.0), dict(T=6, sigma_tilde_variant="x"),
])
def test_rejects_bad_config(kwargs):
    with pytest.raises(ScheduleError):
        build_cosine_schedule(**kwargs)


def test_literal_sigma_tilde_variant():
    s = build_cosine_schedule(6, sigma_tilde_variant="literal")
    ref = build_cosine_schedule(6)
    ratio = np.sqrt(ref.sigma_bar[:-1] ** 2 / ref.sigma_bar[1:] ** 2)
    assert np.allclose(s.sigma_tilde[1:], ratio[1:] * ref.sigma[1:6])
    assert s.sigma_tilde[0] == ref.sigma_tilde[0]


configs = st.tuples(
    st.integers(2, 40),
    st.floats(-3.0, 14.0),
    st.floats(0.5, 12.0),
    st.floats(1e-3, 1.0),
)


@settings(max_examples=200, deadline=None)
@given(configs)
def test_schedule_invariants(cfg):
    T, lmax, gap, c = cfg
    s = build_cosine_schedule(T, lmax, lmax - gap, c)
    assert np.all(np.diff(s.lam) < 0)
    assert s.lam[0] == lmax and s.lam[T] == lmax - gap
    assert np.all(np.abs(s.alpha_bar ** 2 + s.sigma_bar ** 2 - 1.0) <= 1e-12)
    assert np.all(s.sigma[1:] > 0) and np.all(s.alpha[1:] > 0)
    assert np.all(s.sigma_tilde < s.sigma[1:])
    assert np.all(s.step_size > 0)
    prod = np.cumprod(s.alpha[1:])
    assert np.allclose(prod, s.alpha_bar[1:] / s.alpha_bar[0], rtol=1e-9, atol=0)
    for t in range(T):
        assert adjusted_step_size(s, t, 7, 7) == s.step_size[t]


def test_rows_for_csv():
    s = build_cosine_schedule(6)
    rows = s.rows()
    assert len(rows) == 7
    assert set(rows[0]) == {"t", "lambda", "alpha_bar", "sigma_bar", "alpha", "sigma", "sigma_tilde", "step_size"}
    assert math.isnan(rows[0]["alpha"]) and math.isnan(rows[6]["step_size"])


def test_step_ratio_matches_regression_residual():
    # Var(y_t | x_{t+1}) is the residual variance of regressing y_t on x_{t+1}
    from cdrl.rng import stream
    from cdrl.schedule import step_to_posterior_ratio
    sch = build_cosine_schedule(5)
    n = 200_000
    rng = stream(8)
    x0 = rng.normal(0.0, 1.5, n)
    ratio = step_to_posterior_ratio(sch, 1.5 ** 2)
    for t in range(sch.T):
        x_t = sch.alpha_bar[t] * x0 + sch.sigma_bar[t] * rng.standard_normal(n)
        y = sch.alpha[t + 1] * x_t
        x_next = y + sch.sigma[t + 1] * rng.standard_normal(n)
        beta = np.cov(y, x_next)[0, 1] / np.var(x_next)
        resid = np.var(y - beta * x_next)
        assert ratio[t] == pytest.approx(sch.step_size[t] ** 2 / resid, rel=0.02)
    assert step_to_posterior_ratio(sch)[-1] > 1.0  # unit-variance data: top level infeasible
    assert np.all(step_to_posterior_ratio(build_cosine_schedule(6)) < 1.0)
