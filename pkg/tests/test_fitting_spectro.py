import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spadspec.constants import HBAR_EV_S
from spadspec.errors import CalibrationError, DomainError, InsufficientStatistics
from spadspec.fitting import GaussianFit, Histogram1D, binned_gaussian, fit_gaussian_peak
from spadspec.simulate import DetectorEffects, Dispersion, ThermalLines, simulate
from spadspec.spectro import (ARGON_LINES_NM, SpectralCalibration, build_spectrum,
                              calibrate_wavelength, fit_in_wavelength, fit_spectrum_peaks,
                              hup_benchmark)
from spadspec.timestamp import SensorConfig, raw_hits

CFG = SensorConfig()
EDGES = np.arange(101) - 0.5


def peak_at(mean, err=0.01):
    return GaussianFit(1000.0, mean, 1.0, 0.0, 1.0, err, 0.01, 0.1, 0.0, 1)


# spectra

def test_empty_spectrum():
    s = build_spectrum(raw_hits([], [], [], []), CFG)
    assert s.counts.shape == (256,) and s.total == 0


def test_five_hits_on_pixel_7():
    s = build_spectrum(raw_hits(np.zeros(5), 7, np.zeros(5), np.zeros(5)), CFG)
    assert s.counts[7] == 5 and s.total == 5


def test_spdc_spectrum_two_peaks_about_degenerate_pixel():
    from spadspec.simulate import SpdcSource
    disp = Dispersion(795.92, 0.11)
    src = SpdcSource(1e11, 2e12, pair_rate_hz=2e4, nondegeneracy_rad_s=3e13)
    r = simulate(CFG, DetectorEffects(dcr_hz_per_pixel=0.0), src, disp, 5, seed=1)
    c = build_spectrum(r.hits, CFG).counts.astype(float)
    pix = np.arange(256)
    lo, hi = pix < 128, pix >= 128
    m_lo = (c[lo] * pix[lo]).sum() / c[lo].sum()
    m_hi = (c[hi] * pix[hi]).sum() / c[hi].sum()
    # centres mirror about the pixel of 2 * 405 nm
    centre = (810.0 - 795.92) / 0.11
    assert abs((m_lo + m_hi) / 2 - centre) < 3.0
    assert m_hi - m_lo > 20


# Gaussian fits

def test_noiseless_fit_recovers_parameters():
    y = binned_gaussian(EDGES, 1000.0, 50.3, 2.0, 10.0)
    f = fit_gaussian_peak(Histogram1D(EDGES, y), (30, 70))
    assert f.amplitude == pytest.approx(1000.0, rel=1e-6)
    assert f.mean == pytest.approx(50.3, rel=1e-6)
    assert f.sigma == pytest.approx(2.0, rel=1e-6)
    assert f.baseline == pytest.approx(10.0, rel=1e-6)
    assert not f.unresolved


def test_symmetric_data_fits_centre_exactly():
    y = binned_gaussian(EDGES, 500.0, 50.0, 1.3, 3.0)
    f = fit_gaussian_peak(Histogram1D(EDGES, np.round(y)), (40, 60))
    assert f.mean == pytest.approx(50.0, abs=1e-9)


def test_sub_pixel_sigma_recoverable():
    y = binned_gaussian(EDGES, 1e5, 40.2, 0.38, 0.0)
    f = fit_gaussian_peak(Histogram1D(EDGES, y), (35, 45))
    assert f.sigma == pytest.approx(0.38, rel=1e-6)


def test_fit_preconditions():
    y = binned_gaussian(EDGES, 1000.0, 50.0, 2.0, 0.0)
    with pytest.raises(InsufficientStatistics):
        fit_gaussian_peak(Histogram1D(EDGES, y), (49, 51))
    with pytest.raises(InsufficientStatistics):
        fit_gaussian_peak(Histogram1D(EDGES, y / 100), (40, 60))


def test_delta_peak_flagged_unresolved():
    y = np.zeros(100)
    y[50] = 1e4
    f = fit_gaussian_peak(Histogram1D(EDGES, y), (45, 55), sigma_min=0.05)
    assert f.unresolved


def test_pull_distributions():
    rng = np.random.default_rng(2024)
    truth = dict(amplitude=2000.0, mean=50.3, sigma=1.7, baseline=5.0)
    mu = binned_gaussian(EDGES, **truth)
    pm, ps = [], []
    for _ in range(200):
        f = fit_gaussian_peak(Histogram1D(EDGES, rng.poisson(mu)), (38, 62))
        pm.append((f.mean - truth["mean"]) / f.mean_err)
        ps.append((f.sigma - truth["sigma"]) / f.sigma_err)
    for p in (np.array(pm), np.array(ps)):
        assert abs(p.mean()) <= 0.15
        assert abs(p.std() - 1) <= 0.25


def test_argon_800_line_width():
    disp = Dispersion(790.0, 0.11)
    # 10^5 photons over 200 cycles keeps the brightest pixel under the buffer cap
    src = ThermalLines([(800.607, 1.0)], 0.042, 1e5 / (200 * 4e-3))
    eff = DetectorEffects(pde=1.0, dcr_hz_per_pixel=0.0)
    r = simulate(CFG, eff, src, disp, 200, seed=3, with_truth=False)
    spec = build_spectrum(r.hits, CFG)
    assert spec.total > 9e4
    (fit,) = fit_spectrum_peaks(spec)
    scal = SpectralCalibration(790.0, 0.11)
    nm = fit_in_wavelength(fit, scal)
    assert nm.units == "nm"
    assert nm.sigma == pytest.approx(0.042, rel=0.10)
    assert nm.mean == pytest.approx(800.607, abs=0.005)


# wavelength calibration

def test_two_point_calibration():
    s = calibrate_wavelength([peak_at(10), peak_at(110)], [790.0, 801.0], (788.9, 0.11))
    assert s.b_nm_per_pixel == pytest.approx(0.11, rel=1e-12)
    assert s.a_nm == pytest.approx(788.9, rel=1e-12)


@given(st.floats(700, 900), st.floats(0.05, 0.2), st.lists(st.floats(0, 255), min_size=3,
                                                           max_size=8, unique=True))
def test_affine_recovery(a, b, pixels):
    pixels = sorted(pixels)
    if np.min(np.diff(pixels)) < 3:
        return
    lines = [a + b * p for p in pixels]
    s = calibrate_wavelength([peak_at(p) for p in pixels], lines, (a, b), tolerance_nm=0.01)
    assert s.a_nm == pytest.approx(a, rel=1e-9)
    assert s.b_nm_per_pixel == pytest.approx(b, rel=1e-9)
    assert s.residual_rms_nm < 1e-9


def test_ambiguous_match_lists_conflicts():
    with pytest.raises(CalibrationError, match="ambiguous") as e:
        calibrate_wavelength([peak_at(10), peak_at(11), peak_at(100)], [790.0, 800.9],
                             (788.9, 0.11))
    assert e.value.details["conflicts"] == {0: [0, 1]}


def test_fewer_than_two_matches():
    with pytest.raises(CalibrationError):
        calibrate_wavelength([peak_at(10)], [790.0], (788.9, 0.11))
    with pytest.raises(CalibrationError, match="matched"):
        calibrate_wavelength([peak_at(10), peak_at(50)], [790.0, 850.0], (788.9, 0.11))


def test_argon_span_calibration():
    disp = Dispersion(805.0 - 0.11 * 128, 0.11)
    lines = [l for l in ARGON_LINES_NM if disp.lambda_at_pixel0_nm < l
             < disp.lambda_at_pixel0_nm + 0.11 * 255]
    assert len(lines) >= 5
    src = ThermalLines([(l, 1.0) for l in lines], 0.042, 2e6)
    r = simulate(CFG, DetectorEffects(), src, disp, 25, seed=5, with_truth=False)
    fits = fit_spectrum_peaks(build_spectrum(r.hits, CFG))
    s = calibrate_wavelength(fits, lines, (disp.lambda_at_pixel0_nm, 0.11))
    assert len(s.matched) >= 5
    assert s.residual_rms_nm <= 0.02
    assert s.b_nm_per_pixel == pytest.approx(0.11, rel=1e-3)
    # each matched peak maps back to its line within the residual scale
    for p, lam in s.matched:
        assert abs(s.wavelength(p) - lam) <= 3 * s.residual_rms_nm + 1e-6


# time-energy benchmark

def test_hup_headline_numbers():
    r = hup_benchmark(800.607, 0.042, 40e-12)
    assert r.delta_e_ev == pytest.approx(8.1e-5, rel=0.005)
    assert r.product_ev_s == pytest.approx(3.3e-15, rel=0.02)
    assert r.ratio_to_hbar_over_2 == pytest.approx(9.9, abs=0.05)


def test_hup_linear_in_dlambda():
    a = hup_benchmark(800.0, 0.05, 1e-11)
    b = hup_benchmark(800.0, 0.10, 1e-11)
    assert b.delta_e_ev == 2 * a.delta_e_ev and b.product_ev_s == 2 * a.product_ev_s


def test_hup_ratio_one_at_limit():
    lam, dl = 800.0, 0.05
    de = hup_benchmark(lam, dl, 1.0).delta_e_ev
    r = hup_benchmark(lam, dl, HBAR_EV_S / 2 / de)
    assert r.ratio_to_hbar_over_2 == pytest.approx(1.0, rel=1e-12)


@given(st.floats(300, 2000), st.floats(1e-4, 10), st.floats(1e-3, 1e4))
def test_hup_unit_rescaling(lam, dl, dt_ps):
    a = hup_benchmark(lam, dl, dt_ps * 1e-12)
    b = hup_benchmark(lam * 1e-9 * 1e9, dl, dt_ps / 1e12)
    assert math.isclose(a.ratio_to_hbar_over_2, b.ratio_to_hbar_over_2, rel_tol=1e-12)


@pytest.mark.parametrize("args", [(0, 0.1, 1e-12), (800, -0.1, 1e-12), (800, 0.1, 0)])
def test_hup_rejects_non_positive(args):
    with pytest.raises(DomainError):
        hup_benchmark(*args)
