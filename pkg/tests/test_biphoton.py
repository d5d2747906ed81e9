import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate
from scipy.optimize import curve_fit

from spadspec.biphoton import (BiphotonParams, GridSpec, amplitude, dt_marginal, dt_sigma,
                               effective_widths, energy_sigma, normalization,
                               numeric_dt_sigma, numeric_energy_sigma, sweep,
                               uncertainty_product)
from spadspec.constants import HBAR_EV_S
from spadspec.errors import DomainError

WP = 2 * math.pi * 2.99792458e17 / 405.0


def params(dp, df):
    return BiphotonParams(WP, dp, df)


def test_effective_widths_examples():
    assert effective_widths(params(0, 3e12)) == (3e12, 3e12)
    pe, ce = effective_widths(params(2e12, 2e12))
    assert pe == pytest.approx(2e12 * math.sqrt(1.5), rel=1e-15) and ce == 2e12
    assert effective_widths(params(2e12, 1e12)).delta_omega_pe == pytest.approx(
        math.sqrt(3) * 1e12, rel=1e-15)


@given(st.floats(0, 1e14), st.floats(1e9, 1e14))
def test_pe_never_below_filter_width(dp, df):
    pe, ce = effective_widths(params(dp, df))
    assert pe >= df and ce == df


@pytest.mark.parametrize("kw", [dict(omega_p=0, delta_omega_p=0, delta_omega_f=1),
                                dict(omega_p=1, delta_omega_p=-1, delta_omega_f=1),
                                dict(omega_p=1, delta_omega_p=0, delta_omega_f=0)])
def test_param_invariants(kw):
    with pytest.raises(DomainError):
        BiphotonParams(**kw)


def test_amplitude_peak_value():
    p = params(1e12, 2e12)
    pe, ce = effective_widths(p)
    assert amplitude(WP / 2, WP / 2, p) == pytest.approx(1 / math.sqrt(math.pi * pe * ce),
                                                         rel=1e-14)


@given(st.floats(-5e12, 5e12), st.floats(-5e12, 5e12))
def test_amplitude_symmetric(a, b):
    p = params(1e12, 2e12)
    assert amplitude(WP / 2 + a, WP / 2 + b, p) == amplitude(WP / 2 + b, WP / 2 + a, p)


def test_normalisation_by_adaptive_quadrature():
    # independent of the package grid: scipy's adaptive 2-D quadrature in units of 1e12
    p = params(1e12, 2e12)
    f = lambda y, x: float(amplitude(WP / 2 + x * 1e12, WP / 2 + y * 1e12, p)) ** 2 * 1e24
    val, err = integrate.dblquad(f, -40, 40, -40, 40, epsabs=1e-10, epsrel=1e-10)
    assert val == pytest.approx(1.0, abs=1e-6)
    assert normalization(p) == pytest.approx(1.0, abs=1e-6)


def test_energy_sigma_examples():
    assert energy_sigma(params(0, 1e12)) == pytest.approx(6.582e-4, rel=1e-4)
    assert energy_sigma(params(0, 1e12)) == HBAR_EV_S * 1e12
    assert energy_sigma(params(2e12, 4e12)) == pytest.approx(2 * energy_sigma(params(1e12, 2e12)),
                                                             rel=1e-15)


def test_dt_sigma_examples():
    assert dt_sigma(params(0, 1e12)) == pytest.approx(1e-12, rel=1e-15)
    assert dt_sigma(params(5e13, 1e12)) == dt_sigma(params(0, 1e12))


DECADES = [1e11, 1e12, 1e13]


@pytest.mark.parametrize("ratio", [0, 1, 10])
def test_numeric_dt_sigma_matches_closed_form(ratio):
    p = params(ratio * 1e12, 1e12)
    assert numeric_dt_sigma(p) == pytest.approx(dt_sigma(p), rel=1e-6)


@pytest.mark.parametrize("dp", [0.0] + DECADES)
@pytest.mark.parametrize("df", DECADES)
def test_oracle_grid(dp, df):
    p = params(dp, df)
    assert numeric_energy_sigma(p) == pytest.approx(energy_sigma(p), rel=1e-6)
    assert numeric_dt_sigma(p) == pytest.approx(dt_sigma(p), rel=1e-6)


def test_dt_marginal_is_gaussian():
    p = params(1e12, 1e12)
    lag, dens = dt_marginal(p)
    g = lambda x, a, s: a * np.exp(-x ** 2 / (2 * s ** 2))
    (a, s), _ = curve_fit(g, lag * 1e12, dens, p0=[dens.max(), 1.0])
    resid = dens - g(lag * 1e12, a, s)
    assert np.abs(resid).max() <= 1e-8 * dens.max()
    assert s == pytest.approx(1.0, rel=1e-6)


def test_grid_doubling_stable():
    p = params(1e12, 1e12)
    base = numeric_dt_sigma(p, GridSpec(check_convergence=False))
    doubled = numeric_dt_sigma(p, GridSpec(n=2048, check_convergence=False))
    assert abs(doubled - base) <= 1e-6 * base


def test_grid_preconditions():
    with pytest.raises(DomainError):
        GridSpec(n=256)
    with pytest.raises(DomainError):
        GridSpec(half_span=2.0)


def test_uncertainty_product_examples():
    u = uncertainty_product(params(0, 1e12))
    assert u.product_ev_s == pytest.approx(HBAR_EV_S, rel=1e-15) and u.ratio_to_hbar == pytest.approx(1)
    assert uncertainty_product(params(1e12, 1e12)).ratio_to_hbar == pytest.approx(math.sqrt(1.5),
                                                                                  rel=1e-12)
    u = uncertainty_product(params(1e13, 1e12))
    assert u.ratio_to_hbar == pytest.approx(math.sqrt(51), rel=1e-12)
    assert u.ratio_to_hbar == pytest.approx(7.1414, abs=1e-4)
    # cross-check through the numeric time oracle
    p = params(1e13, 1e12)
    assert energy_sigma(p) * numeric_dt_sigma(p) / HBAR_EV_S == pytest.approx(math.sqrt(51),
                                                                              rel=1e-6)


@given(st.floats(0, 1e14), st.floats(1e9, 1e14))
def test_factorisation_and_lower_bound(dp, df):
    p = params(dp, df)
    u = uncertainty_product(p)
    pe, ce = effective_widths(p)
    assert math.isclose(u.ratio_to_hbar, pe / ce, rel_tol=1e-12)
    assert math.isclose(u.product_ev_s, u.closed_form_ev_s, rel_tol=1e-12)
    assert u.ratio_to_hbar >= 1.0


@given(st.floats(1e10, 1e13), st.floats(1.01, 10), st.floats(1e10, 1e13))
def test_ratio_monotone(dp, k, df):
    r = lambda a, b: uncertainty_product(params(a, b)).ratio_to_hbar
    assert r(dp * k, df) > r(dp, df)
    assert r(dp, df * k) < r(dp, df)


def test_sweep_rows():
    rows = sweep(WP, [0.0, 1e12], [1e12], numeric=True)
    assert [r["ratio"] for r in rows] == pytest.approx([1.0, math.sqrt(1.5)], rel=1e-12)
    assert [r["numeric_ratio"] for r in rows] == pytest.approx([1.0, math.sqrt(1.5)], rel=1e-6)
