import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spadspec.calibration import (DensityHistogram, PairDifferenceMatrix, accumulate_density,
                                  accumulate_pair_differences, fit_tdc_calibration,
                                  solve_offsets)
from spadspec.errors import CalibrationError, InsufficientStatistics
from spadspec.simulate import (DetectorEffects, PulsedLaser, random_dnl, random_offsets,
                               simulate)
from spadspec.timestamp import CAL_DTYPE, Decoder, SensorConfig, raw_hits

CFG = SensorConfig()


def cal_hits(cycle, pixel, t):
    out = np.zeros(len(t), dtype=CAL_DTYPE)
    out["cycle"] = cycle
    out["pixel"] = pixel
    out["time_ps"] = t
    return out


def matrix_from_offsets(offsets, pairs=None, count=100.0, stderr=1.0):
    """Pair matrix with exact differences ``o_i - o_j`` and a chosen stderr."""
    o = np.asarray(offsets, float)
    n = o.size
    m = PairDifferenceMatrix(n)
    if pairs is None:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for i, j in pairs:
        d = o[i] - o[j]
        var = stderr ** 2 * count
        for a, b, s in ((i, j, d), (j, i, -d)):
            m.count[a, b] = count
            m.sum_dt[a, b] = s * count
            m.sum_dt2[a, b] = (var + s * s) * count
    return m


# code density

def test_one_hit_per_code_fills_every_bin():
    h = raw_hits(np.zeros(140), 0, np.zeros(140), np.arange(140))
    d = accumulate_density(h, CFG)
    assert d.counts[0].tolist() == [1] * 140
    assert d.total_counts == 140


def test_pixels_0_to_3_only_touch_tdc0():
    rng = np.random.default_rng(0)
    h = raw_hits(np.zeros(400), rng.integers(0, 4, 400), np.zeros(400),
                 rng.integers(0, 140, 400))
    d = accumulate_density(h, CFG)
    assert d.per_tdc()[0] == 400 and d.per_tdc()[1:].sum() == 0


def test_empty_stream_is_insufficient_statistics():
    with pytest.raises(InsufficientStatistics, match="insufficient statistics"):
        accumulate_density(raw_hits([], [], [], []), CFG)


def test_density_merges_over_chunks():
    rng = np.random.default_rng(1)
    h = raw_hits(np.zeros(1000), rng.integers(0, 256, 1000), np.zeros(1000),
                 rng.integers(0, 140, 1000))
    whole = accumulate_density(h, CFG)
    parts = accumulate_density([h[:300], h[300:]], CFG)
    assert np.array_equal(whole.counts, parts.counts)
    assert np.array_equal((accumulate_density(h[:300], CFG)
                           + accumulate_density(h[300:], CFG)).counts, whole.counts)


def test_two_bin_toy_widths():
    cfg = SensorConfig(n_pixels=1, n_tdcs=1, fine_bins_per_tdc=2, coarse_period_ps=2500.0,
                       nominal_lsb_ps=1250.0)
    cal = fit_tdc_calibration(DensityHistogram(np.array([[200, 500]])), cfg, min_counts=1)
    assert cal.bin_widths_ps[0] == pytest.approx([2500 * 2 / 7, 2500 * 5 / 7], rel=1e-12)


def test_equal_occupancy_gives_nominal_lsb():
    cal = fit_tdc_calibration(DensityHistogram(np.full((64, 140), 1000)), CFG)
    assert np.allclose(cal.bin_widths_ps, 2500 / 140, rtol=0, atol=1e-9)


def test_deficit_reported_per_tdc():
    counts = np.full((64, 140), 1000)
    counts[5] = 10
    with pytest.raises(CalibrationError) as e:
        fit_tdc_calibration(DensityHistogram(counts), CFG)
    assert e.value.details["deficits"] == {5: 100_000 - 1400}
    assert "TDC 5" in str(e.value)


def test_zero_count_bin_warns():
    counts = np.full((64, 140), 1000)
    counts[3, 17] = 0
    with pytest.warns(RuntimeWarning, match="never hit"):
        cal = fit_tdc_calibration(DensityHistogram(counts), CFG)
    assert cal.bin_widths_ps[3, 17] == 0.0


@given(st.integers(0, 2**32 - 1), st.integers(1, 1000))
def test_fit_always_yields_valid_calibration(seed, scale):
    rng = np.random.default_rng(seed)
    counts = rng.poisson(scale, (4, 140))
    counts[:, 0] += 1
    cfg = SensorConfig(n_pixels=16, n_tdcs=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cal = fit_tdc_calibration(DensityHistogram(counts), cfg, min_counts=1)
    e = cal.cumulative_edges_ps
    assert np.all(e[:, 0] == 0) and np.allclose(e[:, -1], 2500.0, rtol=1e-12)
    assert np.all(np.diff(e, axis=1) >= 0)


def test_density_matches_injected_dnl():
    cfg = SensorConfig(n_pixels=16, n_tdcs=4)
    dnl = random_dnl(cfg, 10, 26, 4)
    eff = DetectorEffects(pde=1.0, dcr_hz_per_pixel=2.5e6, jitter_sigma_ps=0.0,
                          true_dnl=dnl, dead_time_ps=0.0)
    from spadspec.simulate import UniformSource
    r = simulate(cfg, eff, UniformSource(0.0), None, 25, seed=4, with_truth=False)
    d = accumulate_density(r.hits, cfg)
    expected = d.per_tdc()[:, None] * dnl.bin_widths_ps / 2500.0
    pull = (d.counts - expected) / np.sqrt(expected)
    assert abs(pull.mean()) < 0.2 and 0.8 < pull.std() < 1.2


# pair differences

def test_noiseless_two_pixel_offset():
    t = np.array([1000.0, 1010.0, 5e6, 5e6 + 10.0])
    m = accumulate_pair_differences(cal_hits([0, 0, 0, 0], [0, 1, 0, 1], t), n_pixels=2)
    assert m.mean_dt()[1, 0] == 10.0
    assert m.count[0, 1] == m.count[1, 0] == 2


def test_pairs_stay_within_cycle():
    t = np.array([1000.0, 1010.0])
    m = accumulate_pair_differences(cal_hits([0, 1], [0, 1], t), n_pixels=2)
    assert m.count.sum() == 0


def test_earliest_hit_per_pixel_used():
    t = np.array([1000.0, 1010.0, 1500.0])
    m = accumulate_pair_differences(cal_hits([0, 0, 0], [0, 1, 1], t), n_pixels=2)
    assert m.mean_dt()[1, 0] == 10.0 and m.count[1, 0] == 1


@given(st.integers(0, 2**32 - 1))
def test_pair_matrix_antisymmetric(seed):
    rng = np.random.default_rng(seed)
    n_p = 50
    pulses = np.repeat(np.arange(n_p) * 1e5, 6)
    t = pulses + rng.normal(0, 40, pulses.size)
    pix = np.concatenate([rng.choice(8, 6, replace=False) for _ in range(n_p)])
    m = accumulate_pair_differences(cal_hits(np.zeros(t.size), pix, t), n_pixels=8)
    md = m.mean_dt()
    ok = m.count > 0
    assert np.allclose((md + md.T)[ok], 0.0, atol=1e-9)
    assert np.array_equal(m.count, m.count.T)


def test_stderr_follows_jitter_formula():
    # 0.1 photons per pixel per pulse: multi-photon pulses (whose earliest hit has
    # a narrower spread) stay at the 5% level; 200 pulses per cycle keep the
    # per-cycle buffer cap out of play
    cfg = SensorConfig(n_pixels=8, n_tdcs=2, cycle_length_ps=2e7)
    eff = DetectorEffects(pde=1.0, dcr_hz_per_pixel=0.0, jitter_sigma_ps=40.0)
    r = simulate(cfg, eff, PulsedLaser(1e7, photons_per_pixel=0.1), None, 500, seed=3,
                 with_truth=False)
    dec = Decoder(cfg)
    cal = np.zeros(r.hits.size, dtype=CAL_DTYPE)
    cal["cycle"], cal["pixel"], cal["time_ps"] = r.hits["cycle"], r.hits["pixel"], \
        dec.times(r.hits)
    m = accumulate_pair_differences(cal, n_pixels=8)
    i, j = m.pairs()
    n = m.count[i, j]
    assert n.min() > 500
    # quantisation adds LSB^2/12 per hit
    sigma = math.sqrt(2 * (40.0 ** 2 + (2500 / 140) ** 2 / 12))
    ratio = m.stderr()[i, j] / (sigma / np.sqrt(n))
    assert abs(ratio.mean() - 1) < 0.05
    assert np.all(np.abs(ratio - 1) < 0.15)


# offset solve

def test_exact_three_pixel_solve():
    t = solve_offsets(matrix_from_offsets([0, 10, -5]))
    assert np.allclose(t.offset_ps, [0, 10, -5], atol=1e-9)


def test_chain_composition():
    m = matrix_from_offsets([0, 4, 10], pairs=[(0, 1), (1, 2)])
    # equations are o_i - o_j = mean_dt(i, j); chain 0-1: +4, 1-2: +6
    t = solve_offsets(m)
    assert np.allclose(t.offset_ps, [0, 4, 10], atol=1e-9)


def test_gauge_shift_leaves_output_unchanged():
    a = solve_offsets(matrix_from_offsets([0, 10, -5]))
    b = solve_offsets(matrix_from_offsets([7, 17, 2]))
    assert np.allclose(a.offset_ps, b.offset_ps, atol=1e-9)


def test_disconnected_graph_names_pixels():
    m = matrix_from_offsets([0, 1, 2, 3, 4], pairs=[(0, 1), (1, 2), (3, 4)])
    with pytest.raises(CalibrationError, match="3-4") as e:
        solve_offsets(m)
    assert e.value.details["disconnected"] == [3, 4]


def test_sparse_pairs_below_min_count_ignored():
    m = matrix_from_offsets([0, 1, 2], count=10)
    with pytest.raises(CalibrationError):
        solve_offsets(m)
    assert np.allclose(solve_offsets(m, min_count=5).offset_ps, [0, 1, 2])


def noisy_matrix(seed, n=6, n_pulses=400):
    rng = np.random.default_rng(seed)
    o = rng.normal(0, 50, n)
    x = o + rng.normal(0, rng.uniform(5, 60, n), (n_pulses, n))
    mask = rng.random((n_pulses, n)) < 0.7
    m = PairDifferenceMatrix(n)
    m.add_pulses(x, mask)
    return m


@given(st.integers(0, 2**32 - 1))
def test_residuals_orthogonal_to_incidence(seed):
    sol = solve_offsets(noisy_matrix(seed), return_details=True)
    n = 6
    inc = np.zeros((sol.pairs_i.size, n))
    inc[np.arange(sol.pairs_i.size), sol.pairs_i] = 1
    inc[np.arange(sol.pairs_i.size), sol.pairs_j] = -1
    wr = sol.weights * sol.residuals
    proj = inc[:, 1:].T @ wr
    assert np.all(np.abs(proj) <= 1e-8 * np.linalg.norm(wr))


@given(st.floats(0.5, 1000.0))
def test_count_scaling_invariance(k):
    m = noisy_matrix(2, n=5)
    base = solve_offsets(m).offset_ps
    scaled = PairDifferenceMatrix(5, m.count * k, m.sum_dt * k, m.sum_dt2 * k)
    assert np.allclose(solve_offsets(scaled, min_count=1).offset_ps, base, atol=1e-8)


def test_uncertainty_zero_only_at_gauge():
    t = solve_offsets(matrix_from_offsets([0, 10, -5], stderr=2.0))
    assert t.uncertainty_ps[0] == 0 and np.all(t.uncertainty_ps[1:] > 0)


def test_pulsed_laser_round_trip():
    # 10^4 pulses spread over 50 cycles of 200 pulses each
    cfg = SensorConfig(n_pixels=16, n_tdcs=4, cycle_length_ps=2e7)
    off = random_offsets(cfg, -200, 200, 8)
    eff = DetectorEffects(pde=1.0, dcr_hz_per_pixel=0.0, jitter_sigma_ps=40.0,
                          true_offsets_ps=off)
    r = simulate(cfg, eff, PulsedLaser(1e7, photons_per_pixel=1.0), None, 50, seed=8,
                 with_truth=False)
    dec = Decoder(cfg)
    cal = np.zeros(r.hits.size, dtype=CAL_DTYPE)
    cal["cycle"], cal["pixel"], cal["time_ps"] = r.hits["cycle"], r.hits["pixel"], \
        dec.times(r.hits)
    table = solve_offsets(accumulate_pair_differences(cal, n_pixels=16), cfg)
    err = table.offset_ps - (off - off[0])
    # gauge-aligned: remove the common shift carried by pixel 0's own noise
    assert np.sqrt(np.mean((err - err.mean()) ** 2)) <= 1.0
