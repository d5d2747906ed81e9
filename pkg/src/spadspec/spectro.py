"""Spectra, line fits, wavelength calibration and the time-energy benchmark."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks

from .constants import HBAR_EV_S, HC_EV_NM
from .errors import CalibrationError, DomainError
from .fitting import GaussianFit, Histogram1D, fit_gaussian_peak
from .timestamp import SensorConfig

# Strong Ar I lines in air (nm) commonly used for lamp calibration.
ARGON_LINES_NM = (763.511, 772.376, 794.818, 800.616, 801.479, 810.369, 811.531,
                  826.452, 840.821, 842.465)


@dataclass
class Spectrum:
    counts: np.ndarray
    n_cycles: int | None = None
    exposure_s: float | None = None

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def histogram(self) -> Histogram1D:
        """Pixel-indexed histogram with pixel ``p`` covering ``[p - 0.5, p + 0.5)``."""
        return Histogram1D(np.arange(self.counts.size + 1) - 0.5, self.counts)


def build_spectrum(hits, cfg: SensorConfig, n_cycles: int | None = None) -> Spectrum:
    """Per-pixel hit counts from raw or calibrated records (array or iterable of arrays)."""
    counts = np.zeros(cfg.n_pixels, dtype=np.int64)
    chunks = [hits] if isinstance(hits, np.ndarray) else hits
    for c in chunks:
        if len(c):
            counts += np.bincount(c["pixel"], minlength=cfg.n_pixels)[: cfg.n_pixels]
    exposure = None if n_cycles is None else n_cycles * cfg.cycle_length_ps * 1e-12
    return Spectrum(counts, n_cycles, exposure)


def locate_peaks(spec: Spectrum, min_counts: float = 100, prominence: float | None = None,
                 separation: int = 3) -> np.ndarray:
    """Pixel indices of local maxima suitable as fit seeds."""
    c = spec.counts.astype(float)
    if prominence is None:
        prominence = max(min_counts / 4, 5 * math.sqrt(max(np.median(c), 1.0)))
    idx, _ = find_peaks(c, prominence=prominence, distance=separation)
    return idx[c[idx] >= min_counts / 4]


def fit_spectrum_peaks(spec: Spectrum, half_width: float = 3.0, min_counts: float = 100,
                       **kw) -> list[GaussianFit]:
    """Fit every located peak in a window of ``half_width`` pixels around it."""
    hist = spec.histogram()
    fits = []
    for p in locate_peaks(spec, min_counts=min_counts):
        fits.append(fit_gaussian_peak(hist, (p - half_width, p + half_width),
                                      min_counts=min_counts, units="pixel", **kw))
    return fits


@dataclass
class SpectralCalibration:
    a_nm: float
    b_nm_per_pixel: float
    residuals_nm: np.ndarray = field(default_factory=lambda: np.empty(0))
    matched: list = field(default_factory=list)  # (pixel, reference_nm)
    a_err: float = 0.0
    b_err: float = 0.0

    def __post_init__(self):
        if self.b_nm_per_pixel == 0:
            raise CalibrationError("dispersion slope must be non-zero")
        self.residuals_nm = np.asarray(self.residuals_nm, dtype=float)

    @property
    def residual_rms_nm(self) -> float:
        r = self.residuals_nm
        return float(np.sqrt(np.mean(r ** 2))) if r.size else 0.0

    def wavelength(self, pixel):
        return self.a_nm + self.b_nm_per_pixel * np.asarray(pixel, dtype=float)

    def pixel(self, lambda_nm):
        return (np.asarray(lambda_nm, dtype=float) - self.a_nm) / self.b_nm_per_pixel

    def to_dict(self) -> dict:
        return {
            "a_nm": self.a_nm,
            "b_nm_per_pixel": self.b_nm_per_pixel,
            "a_err": self.a_err,
            "b_err": self.b_err,
            "residual_rms_nm": self.residual_rms_nm,
            "residuals_nm": self.residuals_nm.tolist(),
            "matched": [[float(p), float(l)] for p, l in self.matched],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpectralCalibration":
        return cls(d["a_nm"], d["b_nm_per_pixel"], d.get("residuals_nm", []),
                   [tuple(m) for m in d.get("matched", [])],
                   d.get("a_err", 0.0), d.get("b_err", 0.0))


def calibrate_wavelength(peaks: Sequence[GaussianFit], reference_lines: Sequence[float],
                         guess: tuple[float, float], tolerance_nm: float = 0.3
                         ) -> SpectralCalibration:
    """Match fitted peaks to reference lines and fit ``lambda = a + b * pixel``.

    ``guess`` is a provisional ``(a, b)`` used only for matching: each peak is
    paired with the nearest reference line within ``tolerance_nm``.
    """
    if len(peaks) < 2:
        raise CalibrationError("need at least two fitted peaks")
    ref = np.asarray(reference_lines, dtype=float)
    if ref.size and np.any(np.diff(ref) < 0):
        raise CalibrationError("reference lines must be sorted")
    a0, b0 = guess
    claims: dict[int, list[int]] = {}
    for k, pk in enumerate(peaks):
        if ref.size == 0:
            break
        pred = a0 + b0 * pk.mean
        j = int(np.argmin(np.abs(ref - pred)))
        if abs(ref[j] - pred) <= tolerance_nm:
            claims.setdefault(j, []).append(k)
    conflicts = {j: ks for j, ks in claims.items() if len(ks) > 1}
    if conflicts:
        desc = "; ".join(
            f"{ref[j]:.3f} nm <- peaks at pixels "
            + ", ".join(f"{peaks[k].mean:.2f}" for k in ks)
            for j, ks in sorted(conflicts.items())
        )
        raise CalibrationError(f"ambiguous line matches: {desc}",
                               details={"conflicts": conflicts})
    if len(claims) < 2:
        raise CalibrationError(f"only {len(claims)} peak(s) matched a reference line")
    pairs = [(peaks[ks[0]], ref[j]) for j, ks in sorted(claims.items())]
    x = np.array([p.mean for p, _ in pairs])
    y = np.array([l for _, l in pairs])
    xerr = np.array([p.mean_err for p, _ in pairs])
    if np.all(xerr > 0):
        w = 1.0 / xerr ** 2
    else:
        w = np.ones_like(x)
    design = np.column_stack([np.ones_like(x), x])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    a, b = coef
    resid = y - (a + b * x)
    if x.size > 2:
        s2 = float((w * resid ** 2).sum() / (x.size - 2))
        cov = np.linalg.inv(design.T @ (design * w[:, None])) * s2
        a_err, b_err = np.sqrt(np.abs(np.diag(cov)))
    else:
        a_err = b_err = 0.0
    return SpectralCalibration(float(a), float(b), resid, list(zip(x.tolist(), y.tolist())),
                               float(a_err), float(b_err))


def fit_in_wavelength(fit: GaussianFit, scal: SpectralCalibration) -> GaussianFit:
    """Express a pixel-unit fit in nanometres through an affine calibration."""
    b = abs(scal.b_nm_per_pixel)
    return GaussianFit(
        fit.amplitude, float(scal.wavelength(fit.mean)), fit.sigma * b, fit.baseline,
        fit.amplitude_err, fit.mean_err * b, fit.sigma_err * b, fit.baseline_err,
        fit.chi2, fit.ndof, fit.unresolved, "nm",
    )


@dataclass
class HupResult:
    delta_e_ev: float
    delta_t_s: float
    product_ev_s: float
    ratio_to_hbar_over_2: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def hup_benchmark(lambda_nm: float, dlambda_nm: float, dt_s: float) -> HupResult:
    """Energy spread from a wavelength spread, times a time spread, against hbar/2."""
    for name, v in (("lambda_nm", lambda_nm), ("dlambda_nm", dlambda_nm), ("dt_s", dt_s)):
        if not (v > 0 and math.isfinite(v)):
            raise DomainError(f"{name} must be positive, got {v!r}")
    de = HC_EV_NM * dlambda_nm / lambda_nm ** 2
    product = de * dt_s
    return HupResult(de, dt_s, product, product / (HBAR_EV_S / 2))
