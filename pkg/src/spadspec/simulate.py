"""Monte-Carlo generation of raw timestamp streams.

Photons are drawn from a light source, thinned by the detection efficiency,
mapped onto pixels, smeared by timing jitter and shifted by per-pixel trace
delays.  Dark counts are added, then per-pixel dead time and the per-cycle
buffer limit are enforced and times are quantised through the (non-linear)
TDC bin edges.

Every acquisition cycle draws from its own random stream derived from the
master seed, so cycles can be produced in any order or in parallel with
identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator, Sequence, Union

import numpy as np

from .biphoton import BiphotonParams, effective_widths
from .constants import C_NM_PER_S
from .errors import ConfigurationError, DomainError
from .timestamp import RAW_DTYPE, SensorConfig, TdcCalibration

TRUTH_DTYPE = np.dtype(
    [
        ("cycle", "<u4"),
        ("pair_id", "<i8"),
        ("kind", "u1"),
        ("emission_time_ps", "<f8"),
        ("arrival_time_ps", "<f8"),
        ("wavelength_nm", "<f8"),
        ("pixel", "<i4"),
    ]
)
KIND_PHOTON = 0
KIND_DARK = 1
KIND_NAMES = {KIND_PHOTON: "photon", KIND_DARK: "dark"}
OFF_SENSOR = -1


@dataclass(frozen=True)
class Dispersion:
    lambda_at_pixel0_nm: float
    nm_per_pixel: float = 0.11

    def __post_init__(self):
        if self.nm_per_pixel == 0:
            raise ConfigurationError("nm_per_pixel must be non-zero")

    def wavelength(self, pixel):
        return self.lambda_at_pixel0_nm + self.nm_per_pixel * np.asarray(pixel, dtype=float)


def pixel_of_wavelength(lambda_nm, disp: Dispersion, cfg: SensorConfig):
    """Nearest pixel for each wavelength; ``None`` (scalar) or -1 (array) when off-sensor."""
    lam = np.asarray(lambda_nm, dtype=float)
    x = np.floor((lam - disp.lambda_at_pixel0_nm) / disp.nm_per_pixel + 0.5)
    ok = np.isfinite(x) & (x >= 0) & (x < cfg.n_pixels)
    pix = np.where(ok, x, OFF_SENSOR).astype(np.int64)
    if pix.ndim == 0:
        return int(pix) if ok else None
    return pix


# --- light sources ----------------------------------------------------------

@dataclass(frozen=True)
class ThermalLines:
    lines: tuple  # of (center_nm, relative_intensity)
    instrument_sigma_nm: float
    total_rate_hz: float

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(tuple(map(float, ln)) for ln in self.lines))
        if not self.lines:
            raise ConfigurationError("at least one spectral line is required")
        if any(i <= 0 for _, i in self.lines):
            raise ConfigurationError("line intensities must be positive")
        if self.instrument_sigma_nm < 0 or self.total_rate_hz < 0:
            raise ConfigurationError("sigma and rate must be non-negative")


@dataclass(frozen=True)
class SpdcSource:
    pump_sigma_rad_s: float
    filter_sigma_rad_s: float
    pump_center_nm: float = 405.0
    arm_delay_ps: float = 18300.0
    pair_rate_hz: float = 1.0e5
    splitter_loss: float = 0.0
    # mean of (omega_s - omega_i); zero gives degenerate signal/idler spectra
    nondegeneracy_rad_s: float = 0.0

    def __post_init__(self):
        if self.pump_sigma_rad_s < 0 or self.pair_rate_hz < 0:
            raise ConfigurationError("pump width and pair rate must be non-negative")
        if not 0 <= self.splitter_loss <= 1:
            raise ConfigurationError("splitter_loss must lie in [0, 1]")

    @property
    def omega_p(self) -> float:
        return 2 * math.pi * C_NM_PER_S / self.pump_center_nm

    def biphoton(self) -> BiphotonParams:
        return BiphotonParams(self.omega_p, self.pump_sigma_rad_s, self.filter_sigma_rad_s)


@dataclass(frozen=True)
class UniformSource:
    rate_hz_per_pixel: float

    def __post_init__(self):
        if self.rate_hz_per_pixel < 0:
            raise ConfigurationError("rate must be non-negative")


@dataclass(frozen=True)
class PulsedLaser:
    rep_rate_hz: float
    pulse_sigma_ps: float = 1.0
    photons_per_pixel: float = 1.0

    def __post_init__(self):
        if self.rep_rate_hz <= 0:
            raise ConfigurationError("rep_rate_hz must be positive")
        if self.pulse_sigma_ps < 0 or self.photons_per_pixel < 0:
            raise ConfigurationError("pulse width and photon number must be non-negative")


@dataclass(frozen=True)
class PhotonList:
    """Explicit photons as ``(cycle, time_ps, pixel)`` triples, for scripted tests."""

    photons: tuple

    def __post_init__(self):
        object.__setattr__(self, "photons",
                           tuple((int(c), float(t), int(p)) for c, t, p in self.photons))


Source = Union[ThermalLines, SpdcSource, UniformSource, PulsedLaser, PhotonList]
SOURCE_TYPES = {
    "thermal": ThermalLines,
    "spdc": SpdcSource,
    "uniform": UniformSource,
    "laser": PulsedLaser,
    "list": PhotonList,
}


def source_from_dict(d: dict) -> Source:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in SOURCE_TYPES:
        raise ConfigurationError(f"source type must be one of {sorted(SOURCE_TYPES)}")
    cls = SOURCE_TYPES[kind]
    names = {f.name for f in fields(cls)}
    if set(d) - names:
        raise ConfigurationError(f"unknown {kind} source keys: {sorted(set(d) - names)}")
    return cls(**d)


def sample_spdc_pair(params: SpdcSource | BiphotonParams, rng: np.random.Generator,
                     n: int = 1, cycle_length_ps: float = 4.0e9):
    """Draw ``n`` signal/idler frequency pairs and their common emission time.

    The pair sum frequency is Gaussian around the pump with the effective
    sum width; the difference is Gaussian with the filter width.
    """
    if isinstance(params, SpdcSource):
        if not params.filter_sigma_rad_s > 0:
            raise DomainError("filter width must be positive")
        bp = params.biphoton()
        shift = params.nondegeneracy_rad_s
    else:
        bp, shift = params, 0.0
    pe, ce = effective_widths(bp)
    u = rng.normal(bp.omega_p, pe, n)
    v = rng.normal(-shift, ce, n)
    t = rng.uniform(0.0, cycle_length_ps, n)
    return 0.5 * (u - v), 0.5 * (u + v), t


# --- detector ---------------------------------------------------------------

@dataclass
class DetectorEffects:
    pde: float = 0.30
    dcr_hz_per_pixel: float = 100.0
    jitter_sigma_ps: float = 40.0
    # ungauged per-pixel delays added to every hit (None: all zero)
    true_offsets_ps: np.ndarray | None = None
    true_dnl: TdcCalibration | None = None
    dead_time_ps: float | None = None
    buffer_cap: int | None = None

    def __post_init__(self):
        if not 0 <= self.pde <= 1:
            raise ConfigurationError("pde must lie in [0, 1]")
        if self.jitter_sigma_ps < 0 or self.dcr_hz_per_pixel < 0:
            raise ConfigurationError("jitter and dark rate must be non-negative")
        if self.true_offsets_ps is not None:
            self.true_offsets_ps = np.asarray(self.true_offsets_ps, dtype=float)


def random_dnl(cfg: SensorConfig, low_ps: float, high_ps: float, seed: int) -> TdcCalibration:
    """Bin widths drawn uniformly in ``[low, high]`` then renormalised to one period."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, 0)))
    w = rng.uniform(low_ps, high_ps, (cfg.n_tdcs, cfg.fine_bins_per_tdc))
    return TdcCalibration(w, cfg.coarse_period_ps)


def random_offsets(cfg: SensorConfig, low_ps: float, high_ps: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, 1)))
    return rng.uniform(low_ps, high_ps, cfg.n_pixels)


@dataclass
class SimulationResult:
    hits: np.ndarray
    truth: np.ndarray | None
    summary: dict = field(default_factory=dict)


_SUMMARY_KEYS = ("emitted", "dark", "detected_photons", "out_of_window",
                 "dead_time_lost", "buffer_dropped", "saturated_pixel_cycles", "hits")


class _Photons:
    """Column buffers of photons generated in one cycle."""

    def __init__(self):
        self.cols = {k: [] for k in ("emit", "arrive", "lam", "pixel", "pair", "lost")}

    def add(self, emit, arrive, lam, pixel, pair, lost):
        n = len(emit)
        c = self.cols
        c["emit"].append(np.asarray(emit, float))
        c["arrive"].append(np.asarray(arrive, float))
        c["lam"].append(np.broadcast_to(np.asarray(lam, float), (n,)))
        c["pixel"].append(np.broadcast_to(np.asarray(pixel, np.int64), (n,)))
        c["pair"].append(np.broadcast_to(np.asarray(pair, np.int64), (n,)))
        c["lost"].append(np.broadcast_to(np.asarray(lost, bool), (n,)))

    def arrays(self):
        return {k: (np.concatenate(v) if v else np.empty(0)) for k, v in self.cols.items()}


def _emit(source: Source, cfg: SensorConfig, disp: Dispersion | None, cycle: int,
          rng: np.random.Generator, out: _Photons):
    T = cfg.cycle_length_ps
    exposure_s = T * 1e-12
    if isinstance(source, ThermalLines):
        n = rng.poisson(source.total_rate_hz * exposure_s)
        centers = np.array([c for c, _ in source.lines])
        weights = np.array([i for _, i in source.lines])
        which = rng.choice(len(centers), size=n, p=weights / weights.sum())
        lam = centers[which] + rng.normal(0.0, 1.0, n) * source.instrument_sigma_nm
        t = rng.uniform(0.0, T, n)
        _need_disp(disp)
        out.add(t, t, lam, pixel_of_wavelength(lam, disp, cfg), -1, False)
    elif isinstance(source, SpdcSource):
        n = rng.poisson(source.pair_rate_hz * exposure_s)
        ws, wi, t = sample_spdc_pair(source, rng, n, T)
        # the source separates the pair into its two fibre arms by wavelength:
        # the shorter-wavelength photon takes the undelayed arm
        ws, wi = np.maximum(ws, wi), np.minimum(ws, wi)
        pair = (np.int64(cycle) << 32) + np.arange(n, dtype=np.int64)
        lam_s = 2 * math.pi * C_NM_PER_S / ws
        lam_i = 2 * math.pi * C_NM_PER_S / wi
        lost_s = rng.random(n) < source.splitter_loss
        lost_i = rng.random(n) < source.splitter_loss
        _need_disp(disp)
        out.add(t, t, lam_s, pixel_of_wavelength(lam_s, disp, cfg), pair, lost_s)
        out.add(t, t + source.arm_delay_ps, lam_i, pixel_of_wavelength(lam_i, disp, cfg),
                pair, lost_i)
    elif isinstance(source, UniformSource):
        per_pixel = rng.poisson(source.rate_hz_per_pixel * exposure_s, cfg.n_pixels)
        pix = np.repeat(np.arange(cfg.n_pixels), per_pixel)
        t = rng.uniform(0.0, T, pix.size)
        out.add(t, t, np.nan, pix, -1, False)
    elif isinstance(source, PulsedLaser):
        period = 1e12 / source.rep_rate_hz
        phase = rng.uniform(0.0, period)
        pulses = phase + period * np.arange(max(0, math.ceil((T - phase) / period)))
        counts = rng.poisson(source.photons_per_pixel, (pulses.size, cfg.n_pixels))
        flat = counts.ravel()
        pulse_idx = np.repeat(np.repeat(np.arange(pulses.size), cfg.n_pixels), flat)
        pix = np.repeat(np.tile(np.arange(cfg.n_pixels), pulses.size), flat)
        t = pulses[pulse_idx] + rng.normal(0.0, 1.0, pix.size) * source.pulse_sigma_ps
        out.add(t, t, np.nan, pix, -1, False)
    elif isinstance(source, PhotonList):
        mine = [(t, p) for c, t, p in source.photons if c == cycle]
        t = np.array([m[0] for m in mine], dtype=float)
        pix = np.array([m[1] for m in mine], dtype=np.int64)
        pix = np.where((pix >= 0) & (pix < cfg.n_pixels), pix, OFF_SENSOR)
        out.add(t, t, np.nan, pix, -1, False)
    else:
        raise ConfigurationError(f"unsupported source {type(source).__name__}")


def _need_disp(disp):
    if disp is None:
        raise ConfigurationError("wavelength-resolved sources need a Dispersion")
    return True


def _dead_time_keep(pixel: np.ndarray, t: np.ndarray, dead: float) -> np.ndarray:
    """Non-paralysable dead time; input sorted by (pixel, t)."""
    keep = np.ones(t.size, dtype=bool)
    if t.size < 2 or dead <= 0:
        return keep
    close = (pixel[1:] == pixel[:-1]) & (np.diff(t) < dead)
    if not close.any():
        return keep
    # walk only through runs of mutually close hits
    idx = np.flatnonzero(close)
    start = idx[0]
    prev = idx[0]
    runs = []
    for i in idx[1:]:
        if i != prev + 1:
            runs.append((start, prev + 1))
            start = i
        prev = i
    runs.append((start, prev + 1))
    for lo, hi in runs:
        last = t[lo]
        for j in range(lo + 1, hi + 1):
            if t[j] - last < dead:
                keep[j] = False
            else:
                last = t[j]
    return keep


def _simulate_cycle(cycle: int, cfg: SensorConfig, effects: DetectorEffects,
                    sources: Sequence[Source], disp: Dispersion | None, seed: int,
                    with_truth: bool, edges_flat: np.ndarray, offsets: np.ndarray):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, cycle)))
    T = cfg.cycle_length_ps
    ph = _Photons()
    for s in sources:
        _emit(s, cfg, disp, cycle, rng, ph)
    a = ph.arrays()
    n_ph = a["emit"].size
    pixel = a["pixel"].astype(np.int64) if n_ph else np.empty(0, np.int64)
    detected = (~a["lost"].astype(bool)) & (pixel >= 0) & (rng.random(n_ph) < effects.pde)
    arrive = a["arrive"] + rng.normal(0.0, 1.0, n_ph) * effects.jitter_sigma_ps

    n_dark = rng.poisson(effects.dcr_hz_per_pixel * T * 1e-12 * cfg.n_pixels)
    dark_pix = rng.integers(0, cfg.n_pixels, n_dark)
    dark_t = rng.uniform(0.0, T, n_dark)

    det_idx = np.flatnonzero(detected)
    cand_pix = np.concatenate([pixel[det_idx], dark_pix])
    cand_t = np.concatenate([arrive[det_idx] + offsets[pixel[det_idx]], dark_t])
    # index into the combined truth table (photons first, then dark counts)
    cand_src = np.concatenate([det_idx, n_ph + np.arange(n_dark)])

    inwin = (cand_t >= 0) & (cand_t < T)
    out_of_window = int((~inwin).sum())
    cand_pix, cand_t, cand_src = cand_pix[inwin], cand_t[inwin], cand_src[inwin]

    order = np.lexsort((cand_t, cand_pix))
    cand_pix, cand_t, cand_src = cand_pix[order], cand_t[order], cand_src[order]
    keep = _dead_time_keep(cand_pix, cand_t, effects.dead_time_ps)
    dead_lost = int((~keep).sum())
    cand_pix, cand_t, cand_src = cand_pix[keep], cand_t[keep], cand_src[keep]

    # rank of each hit within its pixel; later hits beyond the cap are dropped
    starts = np.flatnonzero(np.r_[True, cand_pix[1:] != cand_pix[:-1]]) if cand_pix.size else np.empty(0, int)
    group_start = np.repeat(starts, np.diff(np.r_[starts, cand_pix.size]))
    rank = np.arange(cand_pix.size) - group_start
    cap = effects.buffer_cap
    within = rank < cap
    saturated = int(np.count_nonzero(rank == cap))
    dropped = int((~within).sum())
    cand_pix, cand_t, cand_src = cand_pix[within], cand_t[within], cand_src[within]

    period = cfg.coarse_period_ps
    coarse = np.floor(cand_t / period)
    frac = cand_t - coarse * period
    tdc = cand_pix // cfg.pixels_per_tdc
    nb = cfg.fine_bins_per_tdc
    pos = np.searchsorted(edges_flat, tdc * (2 * period) + frac, side="right")
    fine = pos - tdc * (nb - 1)

    hits = np.empty(cand_pix.size, dtype=RAW_DTYPE)
    hits["cycle"] = cycle
    hits["pixel"] = cand_pix
    hits["coarse"] = coarse
    hits["fine"] = np.clip(fine, 0, nb - 1)
    hits["flags"] = 0

    summary = {
        "emitted": n_ph,
        "dark": n_dark,
        "detected_photons": int(detected.sum()),
        "out_of_window": out_of_window,
        "dead_time_lost": dead_lost,
        "buffer_dropped": dropped,
        "saturated_pixel_cycles": saturated,
        "hits": int(hits.size),
    }

    truth = None
    if with_truth:
        truth = np.empty(n_ph + n_dark, dtype=TRUTH_DTYPE)
        truth["cycle"] = cycle
        truth["pair_id"][:n_ph] = a["pair"] if n_ph else []
        truth["pair_id"][n_ph:] = -1
        truth["kind"][:n_ph] = KIND_PHOTON
        truth["kind"][n_ph:] = KIND_DARK
        truth["emission_time_ps"][:n_ph] = a["emit"]
        truth["emission_time_ps"][n_ph:] = dark_t
        truth["arrival_time_ps"][:n_ph] = arrive
        truth["arrival_time_ps"][n_ph:] = dark_t
        truth["wavelength_nm"][:n_ph] = a["lam"]
        truth["wavelength_nm"][n_ph:] = np.nan
        truth["pixel"] = OFF_SENSOR
        truth["pixel"][cand_src] = cand_pix
    return hits, truth, summary


def iter_simulate(cfg: SensorConfig, effects: DetectorEffects,
                  source: Source | Sequence[Source], disp: Dispersion | None,
                  n_cycles: int, seed: int, with_truth: bool = True,
                  first_cycle: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray | None, dict]]:
    """Yield ``(hits, truth, summary)`` for each cycle, in cycle order."""
    sources = list(source) if isinstance(source, (list, tuple)) else [source]
    effects = DetectorEffects(**{f.name: getattr(effects, f.name) for f in fields(effects)})
    if effects.dead_time_ps is None:
        effects.dead_time_ps = cfg.dead_time_ps
    if effects.buffer_cap is None:
        effects.buffer_cap = cfg.buffer_cap_per_pixel_per_cycle
    dnl = effects.true_dnl or TdcCalibration.uniform(cfg)
    dnl.check(cfg)
    offsets = (np.zeros(cfg.n_pixels) if effects.true_offsets_ps is None
               else effects.true_offsets_ps)
    if offsets.shape != (cfg.n_pixels,):
        raise ConfigurationError("true_offsets_ps must have one entry per pixel")
    # interior bin edges of all TDCs laid end to end, one TDC per 2*period
    shift = (2 * cfg.coarse_period_ps) * np.arange(cfg.n_tdcs)[:, None]
    edges_flat = (dnl.cumulative_edges_ps[:, 1:-1] + shift).ravel()
    for c in range(first_cycle, first_cycle + n_cycles):
        yield _simulate_cycle(c, cfg, effects, sources, disp, seed, with_truth,
                              edges_flat, offsets)


def simulate(cfg: SensorConfig, effects: DetectorEffects, source: Source | Sequence[Source],
             disp: Dispersion | None, n_cycles: int, seed: int,
             with_truth: bool = True) -> SimulationResult:
    """Run ``n_cycles`` acquisition cycles and collect hits, truth and a run summary."""
    hits, truth = [], []
    summary = dict.fromkeys(_SUMMARY_KEYS, 0)
    for h, tr, s in iter_simulate(cfg, effects, source, disp, n_cycles, seed, with_truth):
        hits.append(h)
        if with_truth:
            truth.append(tr)
        for k in _SUMMARY_KEYS:
            summary[k] += s[k]
    summary["n_cycles"] = n_cycles
    summary["exposure_s"] = n_cycles * cfg.cycle_length_ps * 1e-12
    return SimulationResult(
        np.concatenate(hits) if hits else np.empty(0, RAW_DTYPE),
        (np.concatenate(truth) if truth else np.empty(0, TRUTH_DTYPE)) if with_truth else None,
        summary,
    )
