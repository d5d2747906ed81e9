"""Gaussian biphoton model: joint spectral amplitude, energy and coincidence-time
spreads, and the time-energy product of a photon pair.

The pump envelope and the two filter Gaussians are collapsed into a sum-frequency
width ``delta_omega_pe`` and a difference-frequency width ``delta_omega_ce``; all
closed forms below use that two-Gaussian amplitude.  ``numeric_dt_sigma`` and
``numeric_energy_sigma`` evaluate the same quantities by brute-force quadrature
and a discrete Fourier transform, and serve as an independent check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .constants import C_NM_PER_S, HBAR_EV_S
from .errors import ConvergenceError, DomainError


@dataclass(frozen=True)
class BiphotonParams:
    omega_p: float
    delta_omega_p: float
    delta_omega_f: float

    def __post_init__(self):
        if not self.omega_p > 0:
            raise DomainError("omega_p must be positive")
        if not self.delta_omega_f > 0:
            raise DomainError("delta_omega_f must be positive")
        if not self.delta_omega_p >= 0:
            raise DomainError("delta_omega_p must be non-negative")

    @classmethod
    def from_pump_wavelength(cls, pump_nm: float, delta_omega_p: float,
                             delta_omega_f: float) -> "BiphotonParams":
        return cls(2 * math.pi * C_NM_PER_S / pump_nm, delta_omega_p, delta_omega_f)


class EffectiveWidths(NamedTuple):
    delta_omega_pe: float
    delta_omega_ce: float


def effective_widths(p: BiphotonParams) -> EffectiveWidths:
    pe = math.sqrt(p.delta_omega_p ** 2 / 2 + p.delta_omega_f ** 2)
    return EffectiveWidths(pe, p.delta_omega_f)


def amplitude(omega_s, omega_i, p: BiphotonParams):
    """Normalised joint spectral amplitude (real, symmetric in its arguments)."""
    pe, ce = effective_widths(p)
    ws = np.asarray(omega_s, dtype=float)
    wi = np.asarray(omega_i, dtype=float)
    norm = 1.0 / math.sqrt(math.pi * pe * ce)
    return norm * np.exp(
        -((p.omega_p - wi - ws) ** 2) / (4 * pe ** 2) - ((wi - ws) ** 2) / (4 * ce ** 2)
    )


def energy_sigma(p: BiphotonParams) -> float:
    """Standard deviation of the pair energy, in eV."""
    return HBAR_EV_S * effective_widths(p).delta_omega_pe


def dt_sigma(p: BiphotonParams) -> float:
    """Standard deviation of the detection-time difference, in seconds."""
    return 1.0 / effective_widths(p).delta_omega_ce


class UncertaintyProduct(NamedTuple):
    product_ev_s: float
    ratio_to_hbar: float
    closed_form_ev_s: float


def uncertainty_product(p: BiphotonParams) -> UncertaintyProduct:
    pe, ce = effective_widths(p)
    # pe / ce first, so the zero-pump-width case gives exactly hbar
    ratio = pe / ce
    product = HBAR_EV_S * ratio
    direct = energy_sigma(p) * dt_sigma(p)
    closed = HBAR_EV_S * math.sqrt(1 + 0.5 * p.delta_omega_p ** 2 / p.delta_omega_f ** 2)
    for other in (direct, closed):
        if abs(product - other) > 1e-12 * product:
            raise AssertionError(f"product {product!r} disagrees with {other!r}")
    return UncertaintyProduct(product, ratio, closed)


# --- numerical oracle -------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Frequency grid for the quadrature oracle.

    ``half_span`` is the half-width of the square frequency window in units of
    the larger effective width; ``n`` is the minimum number of points per axis.
    The point count is raised (to a power of two) until the grid spacing is at
    most ``max_step`` times the narrower effective width.
    """

    n: int = 512
    half_span: float = 8.0
    max_step: float = 0.3
    max_n: int = 4096
    check_convergence: bool = True
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.n < 512:
            raise DomainError("grid needs at least 512 points per axis")
        if self.half_span < 4.0:
            raise DomainError("grid must span at least 8 effective widths")


def _grid(p: BiphotonParams, grid: GridSpec, n: int | None = None):
    pe, ce = effective_widths(p)
    half = grid.half_span * max(pe, ce)
    if n is None:
        need = 2 * half / (grid.max_step * min(pe, ce))
        n = max(grid.n, 1 << math.ceil(math.log2(need)))
        if n > grid.max_n:
            raise ConvergenceError(
                f"oracle grid would need {n} points per axis (limit {grid.max_n})"
            )
    step = 2 * half / n
    # detuning from the degenerate frequency omega_p / 2
    d = -half + step * np.arange(n)
    return d, step, n


def _dt_marginal_on(p: BiphotonParams, grid: GridSpec, n: int | None):
    d, step, n = _grid(p, grid, n)
    w = 0.5 * p.omega_p + d
    # rows: idler frequency, columns: signal frequency
    psi = amplitude(w[None, :], w[:, None], p)
    # Riemann sum of the double Fourier integral; the carrier at omega_p / 2 and
    # the grid origin only contribute a phase, which drops out of |.|^2
    spec = np.fft.fft2(psi) * (step * step / (2 * math.pi))
    dens = np.abs(spec) ** 2
    dtau = 2 * math.pi / (n * step)
    a = np.arange(n)
    k = np.arange(n)
    # column index of t + dt for each row t and lag k
    cols = (a[:, None] + k[None, :]) % n
    marg = np.take_along_axis(dens, cols, axis=1).sum(axis=0) * dtau
    lag = np.where(k < n // 2, k, k - n) * dtau
    order = np.argsort(lag)
    return lag[order], marg[order], n


def _rms(x, w):
    tot = w.sum()
    mean = (x * w).sum() / tot
    return math.sqrt(((x - mean) ** 2 * w).sum() / tot)


def dt_marginal(p: BiphotonParams, grid: GridSpec | None = None):
    """Return ``(dt_s, density)`` of the coincidence-time difference on the grid."""
    lag, marg, _ = _dt_marginal_on(p, grid or GridSpec(), None)
    return lag, marg


def numeric_dt_sigma(p: BiphotonParams, grid: GridSpec | None = None) -> float:
    """RMS detection-time difference from a discrete Fourier transform of the amplitude."""
    grid = grid or GridSpec()
    lag, marg, n = _dt_marginal_on(p, grid, None)
    sigma = _rms(lag, marg)
    if grid.check_convergence:
        lag2, marg2, _ = _dt_marginal_on(p, grid, 2 * n)
        sigma2 = _rms(lag2, marg2)
        if abs(sigma2 - sigma) > grid.tolerance * sigma:
            raise ConvergenceError(
                f"dt sigma changed from {sigma!r} to {sigma2!r} on grid doubling"
            )
    return sigma


def _energy_sigma_on(p: BiphotonParams, grid: GridSpec, n: int | None):
    d, step, n = _grid(p, grid, n)
    w = 0.5 * p.omega_p + d
    prob = amplitude(w[None, :], w[:, None], p) ** 2
    total = d[None, :] + d[:, None]  # omega_s + omega_i - omega_p
    norm = prob.sum() * step * step
    mean = (total * prob).sum() / prob.sum()
    var = ((total - mean) ** 2 * prob).sum() / prob.sum()
    return HBAR_EV_S * math.sqrt(var), norm, n


def numeric_energy_sigma(p: BiphotonParams, grid: GridSpec | None = None) -> float:
    """Pair-energy spread in eV by direct quadrature of |amplitude|^2."""
    grid = grid or GridSpec()
    s, _, n = _energy_sigma_on(p, grid, None)
    if grid.check_convergence:
        s2, _, _ = _energy_sigma_on(p, grid, 2 * n)
        if abs(s2 - s) > grid.tolerance * s:
            raise ConvergenceError(f"energy sigma changed from {s!r} to {s2!r}")
    return s


def normalization(p: BiphotonParams, grid: GridSpec | None = None) -> float:
    """Integral of |amplitude|^2 over the grid (should be 1)."""
    return _energy_sigma_on(p, grid or GridSpec(), None)[1]


SWEEP_COLUMNS = ("delta_omega_p", "delta_omega_f", "sigma_E", "sigma_dt",
                 "product", "ratio", "numeric_ratio")


def sweep(omega_p: float, pump_widths, filter_widths, numeric: bool = True,
          grid: GridSpec | None = None) -> list[dict]:
    """Evaluate the model over every (pump width, filter width) combination."""
    rows = []
    for dp in pump_widths:
        for df in filter_widths:
            p = BiphotonParams(omega_p, float(dp), float(df))
            up = uncertainty_product(p)
            row = {
                "delta_omega_p": p.delta_omega_p,
                "delta_omega_f": p.delta_omega_f,
                "sigma_E": energy_sigma(p),
                "sigma_dt": dt_sigma(p),
                "product": up.product_ev_s,
                "ratio": up.ratio_to_hbar,
                "numeric_ratio": (
                    numeric_energy_sigma(p, grid) * numeric_dt_sigma(p, grid) / HBAR_EV_S
                    if numeric else float("nan")
                ),
            }
            rows.append(row)
    return rows
