"""Poisson-weighted least-squares fit of a binned Gaussian peak on a flat baseline.

The model integrates the Gaussian across each bin, so peaks narrower than a
bin (a line spread over two or three pixels) still yield a usable width.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.special import ndtr

from .errors import FitError, InsufficientStatistics


@dataclass
class Histogram1D:
    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.counts = np.asarray(self.counts)
        if self.edges.size != self.counts.size + 1:
            raise ValueError("need len(edges) == len(counts) + 1")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def __add__(self, other: "Histogram1D") -> "Histogram1D":
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("histograms have different binning")
        return Histogram1D(self.edges, self.counts + other.counts)


@dataclass
class GaussianFit:
    amplitude: float  # total counts under the Gaussian
    mean: float
    sigma: float
    baseline: float  # counts per bin
    amplitude_err: float
    mean_err: float
    sigma_err: float
    baseline_err: float
    chi2: float
    ndof: int
    unresolved: bool = False
    units: str = "bin"

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.ndof if self.ndof > 0 else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reduced_chi2"] = self.reduced_chi2
        return d


def binned_gaussian(edges, amplitude, mean, sigma, baseline):
    """Expected counts per bin: baseline + amplitude * (Gaussian mass in the bin)."""
    z = (np.asarray(edges) - mean) / sigma
    return baseline + amplitude * np.diff(ndtr(z))


def _param_errors(jac: np.ndarray) -> np.ndarray:
    """Standard errors from the Jacobian of weighted residuals.

    Columns are scaled to unit norm before inverting, so a parameter the data
    barely constrain gets a large error instead of being cut by the
    pseudo-inverse cutoff.
    """
    norm = np.sqrt((jac * jac).sum(axis=0))
    err = np.full(jac.shape[1], np.inf)
    ok = norm > 0
    if ok.any():
        js = jac[:, ok] / norm[ok]
        cov = np.linalg.pinv(js.T @ js) / np.outer(norm[ok], norm[ok])
        err[ok] = np.sqrt(np.abs(np.diag(cov)))
    return err


def fit_gaussian_peak(hist: Histogram1D, region=None, *, min_bins: int = 5,
                      min_counts: float = 100, sigma_min: float | None = None,
                      max_nfev: int = 2000, units: str = "bin") -> GaussianFit:
    """Fit ``baseline + A * binned N(mean, sigma)`` to the bins inside ``region``.

    ``region`` is an ``(x_low, x_high)`` interval; bins whose centres fall
    inside it are fitted.  Weights are ``1 / max(counts, 1)``.  A fit whose
    width ends on the lower bound ``sigma_min``, or whose width is not
    constrained by the data (uncertainty larger than the width itself, as for
    a peak confined to one bin), is returned with ``unresolved=True``.
    """
    centers = hist.centers
    if region is None:
        sel = np.ones(centers.size, dtype=bool)
    else:
        sel = (centers >= region[0]) & (centers <= region[1])
    idx = np.flatnonzero(sel)
    if idx.size < min_bins:
        raise InsufficientStatistics(f"fit region has {idx.size} bins, need {min_bins}")
    edges = hist.edges[idx[0]: idx[-1] + 2]
    y = np.asarray(hist.counts, dtype=float)[idx]
    if y.sum() < min_counts:
        raise InsufficientStatistics(
            f"fit region holds {y.sum():g} counts, need {min_counts:g}")
    x = centers[idx]
    bw = np.diff(edges)
    if sigma_min is None:
        sigma_min = 1e-3 * bw.min()

    # start from moments above a baseline taken from the region's ends
    k = max(1, idx.size // 10)
    b0 = min(np.median(np.r_[y[:k], y[-k:]]), y.min() if y.size else 0.0)
    sig = np.clip(y - b0, 0, None)
    if sig.sum() <= 0:
        sig = y
    mu0 = float((sig * x).sum() / sig.sum())
    var0 = float((sig * (x - mu0) ** 2).sum() / sig.sum())
    s0 = max(np.sqrt(max(var0 - (bw.mean() ** 2) / 12, 0.0)), bw.mean() / 4, sigma_min * 2)
    p0 = np.array([sig.sum(), mu0, s0, b0])
    err = np.sqrt(np.maximum(y, 1.0))

    def resid(p):
        return (y - binned_gaussian(edges, *p)) / err

    lo = [0.0, edges[0], sigma_min, -np.inf]
    hi = [np.inf, edges[-1], np.inf, np.inf]
    p0 = np.clip(p0, np.array(lo) + 0, hi)
    res = least_squares(resid, p0, bounds=(lo, hi), method="trf", x_scale="jac",
                        xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=max_nfev)
    diag = {"status": res.status, "message": res.message, "nfev": res.nfev,
            "start": p0.tolist(), "last": res.x.tolist()}
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise FitError(f"Gaussian fit did not converge: {res.message}", diag)
    amp, mu, sigma, base = res.x
    perr = _param_errors(res.jac)
    unresolved = sigma <= sigma_min * (1 + 1e-6) or perr[2] > sigma
    chi2 = float((res.fun ** 2).sum())
    return GaussianFit(
        float(amp), float(mu), float(sigma), float(base),
        float(perr[0]), float(perr[1]), float(perr[2]), float(perr[3]),
        chi2, int(idx.size - 4), bool(unresolved), units,
    )
