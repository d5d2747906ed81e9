"""TDC bin-width calibration by code density and per-pixel offset calibration
from a pulsed laser that illuminates the whole array.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import CalibrationError, InsufficientStatistics
from .timestamp import OffsetTable, SensorConfig, TdcCalibration

MIN_COUNTS_PER_TDC = 100_000
MIN_PAIR_COUNT = 30


def _chunks(hits) -> Iterable[np.ndarray]:
    if isinstance(hits, np.ndarray):
        yield hits
    else:
        yield from hits


@dataclass
class DensityHistogram:
    counts: np.ndarray  # (n_tdcs, fine_bins_per_tdc)

    @property
    def total_counts(self) -> int:
        return int(self.counts.sum())

    def per_tdc(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def merge(self, other: "DensityHistogram") -> "DensityHistogram":
        return DensityHistogram(self.counts + other.counts)

    __add__ = merge


def accumulate_density(hits, cfg: SensorConfig) -> DensityHistogram:
    """Occupancy of every fine code, pooled over the pixels sharing each TDC.

    ``hits`` is a raw-record array or an iterable of such arrays.
    """
    nb = cfg.fine_bins_per_tdc
    counts = np.zeros(cfg.n_tdcs * nb, dtype=np.int64)
    for chunk in _chunks(hits):
        if chunk.size == 0:
            continue
        tdc = chunk["pixel"].astype(np.intp) // cfg.pixels_per_tdc
        counts += np.bincount(tdc * nb + chunk["fine"], minlength=counts.size)
    if counts.sum() == 0:
        raise InsufficientStatistics("insufficient statistics: no hits to histogram")
    return DensityHistogram(counts.reshape(cfg.n_tdcs, nb))


def fit_tdc_calibration(hist: DensityHistogram, cfg: SensorConfig,
                        min_counts: int = MIN_COUNTS_PER_TDC) -> TdcCalibration:
    """Bin widths proportional to occupancy, scaled to one coarse period per TDC."""
    per_tdc = hist.per_tdc()
    low = np.flatnonzero(per_tdc < min_counts)
    if low.size:
        deficits = {int(t): int(min_counts - per_tdc[t]) for t in low}
        raise CalibrationError(
            f"{low.size} TDC(s) below {min_counts} counts: "
            + ", ".join(f"TDC {t} short by {d}" for t, d in list(deficits.items())[:10])
            + (" ..." if low.size > 10 else ""),
            details={"deficits": deficits},
        )
    empty = np.argwhere(hist.counts == 0)
    if empty.size:
        warnings.warn(
            f"{len(empty)} fine bin(s) never hit, given zero width "
            f"(first: TDC {empty[0][0]}, code {empty[0][1]})",
            RuntimeWarning,
            stacklevel=2,
        )
    widths = cfg.coarse_period_ps * hist.counts / per_tdc[:, None]
    return TdcCalibration(widths, cfg.coarse_period_ps)


class PairDifferenceMatrix:
    """Sufficient statistics of pixel-pair time differences ``t_i - t_j``.

    Sums are accumulated relative to a per-pulse reference so that the
    second moment keeps full precision.  Instances merge with ``+``.
    """

    def __init__(self, n_pixels: int, count=None, sum_dt=None, sum_dt2=None):
        self.n_pixels = n_pixels
        shape = (n_pixels, n_pixels)
        self.count = np.zeros(shape) if count is None else np.asarray(count, float)
        self.sum_dt = np.zeros(shape) if sum_dt is None else np.asarray(sum_dt, float)
        self.sum_dt2 = np.zeros(shape) if sum_dt2 is None else np.asarray(sum_dt2, float)

    def __add__(self, other: "PairDifferenceMatrix") -> "PairDifferenceMatrix":
        return PairDifferenceMatrix(self.n_pixels, self.count + other.count,
                                    self.sum_dt + other.sum_dt, self.sum_dt2 + other.sum_dt2)

    def add_pulses(self, x: np.ndarray, mask: np.ndarray) -> None:
        """Add a block of pulses; ``x[k, p]`` is pixel p's time in pulse k."""
        m = mask.astype(float)
        x = np.where(mask, x, 0.0)
        a = x.T @ m  # sum over pulses of t_i where j also present
        b = (x * x).T @ m
        c = x.T @ x
        n = m.T @ m
        np.fill_diagonal(n, 0.0)  # a pixel is never paired with itself
        self.count += n
        self.sum_dt += a - a.T
        self.sum_dt2 += b + b.T - 2 * c

    def mean_dt(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.sum_dt / self.count, np.nan)

    def stderr(self) -> np.ndarray:
        """Standard error of each mean, ``sqrt(var / count)`` with population variance."""
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = self.sum_dt / self.count
            var = np.maximum(self.sum_dt2 / self.count - mean * mean, 0.0)
            return np.where(self.count > 0, np.sqrt(var / self.count), np.nan)

    def pairs(self, min_count: int = 1):
        """Index arrays ``(i, j)`` with ``i < j`` of pairs seen at least ``min_count`` times."""
        iu, ju = np.triu_indices(self.n_pixels, k=1)
        ok = self.count[iu, ju] >= min_count
        return iu[ok], ju[ok]

    def to_dict(self) -> dict:
        i, j = self.pairs()
        return {
            "n_pixels": self.n_pixels,
            "pairs": [
                {"i": int(a), "j": int(b), "count": int(self.count[a, b]),
                 "mean_dt_ps": float(self.mean_dt()[a, b]),
                 "stderr_ps": float(self.stderr()[a, b])}
                for a, b in zip(i, j)
            ],
        }


def _pulse_clusters(t: np.ndarray, window_ps: float) -> np.ndarray:
    """Cluster id per hit (input sorted by time): a cluster opens at a hit and
    absorbs every later hit within ``window_ps`` of that opening hit."""
    n = t.size
    cid = np.empty(n, dtype=np.int64)
    if n == 0:
        return cid
    # fast path: clusters separated by gaps larger than the window
    gap_start = np.r_[True, np.diff(t) > window_ps]
    starts = np.flatnonzero(gap_start)
    ends = np.r_[starts[1:], n]
    span_ok = (t[ends - 1] - t[starts]) <= window_ps
    if span_ok.all():
        return np.cumsum(gap_start) - 1
    k = 0
    for s, e, ok in zip(starts, ends, span_ok):
        if ok:
            cid[s:e] = k
            k += 1
            continue
        anchor = t[s]
        for i in range(s, e):
            if t[i] - anchor > window_ps:
                k += 1
                anchor = t[i]
            cid[i] = k
        k += 1
    return cid


def accumulate_pair_differences(hits, window_ps: float = 5000.0,
                                n_pixels: int | None = None,
                                block: int = 4096) -> PairDifferenceMatrix:
    """Pairwise time differences of hits belonging to the same laser pulse.

    ``hits`` are calibrated records (``CAL_DTYPE``), or an iterable of them,
    with the TDC correction applied and offsets not yet applied.  Within a
    pulse, only each pixel's earliest hit is used.
    """
    mat = None
    for chunk in _chunks(hits):
        if chunk.size == 0:
            continue
        npx = n_pixels or int(chunk["pixel"].max()) + 1
        if mat is None:
            mat = PairDifferenceMatrix(npx)
        elif npx > mat.n_pixels:
            raise ValueError("pass n_pixels when streaming chunks")
        order = np.lexsort((chunk["time_ps"], chunk["cycle"]))
        c = chunk[order]
        cyc = c["cycle"].astype(np.int64)
        t = c["time_ps"]
        # keep cycles apart by clustering within each cycle
        cid = np.empty(c.size, dtype=np.int64)
        bounds = np.flatnonzero(np.r_[True, cyc[1:] != cyc[:-1], True])
        base = 0
        for s, e in zip(bounds[:-1], bounds[1:]):
            local = _pulse_clusters(t[s:e], window_ps)
            cid[s:e] = local + base
            base += int(local[-1]) + 1
        pix = c["pixel"].astype(np.int64)
        # earliest hit per (pulse, pixel): already time ordered within a pulse
        key = cid * mat.n_pixels + pix
        o2 = np.argsort(key, kind="stable")
        key, t_sorted = key[o2], t[o2]
        first = np.r_[True, key[1:] != key[:-1]]
        key, t_first = key[first], t_sorted[first]
        pulse = key // mat.n_pixels
        px = key % mat.n_pixels
        # reference each pulse to its first hit to keep magnitudes small
        ref = np.full(base, np.inf)
        np.minimum.at(ref, pulse, t_first)
        rel = t_first - ref[pulse]
        for lo in range(0, base, block):
            hi = min(lo + block, base)
            sel = (pulse >= lo) & (pulse < hi)
            x = np.zeros((hi - lo, mat.n_pixels))
            m = np.zeros((hi - lo, mat.n_pixels), dtype=bool)
            x[pulse[sel] - lo, px[sel]] = rel[sel]
            m[pulse[sel] - lo, px[sel]] = True
            mat.add_pulses(x, m)
    if mat is None:
        mat = PairDifferenceMatrix(n_pixels or 0)
    return mat


@dataclass
class OffsetSolution:
    table: OffsetTable
    # pair list and fitted quantities, kept for diagnostics
    pairs_i: np.ndarray
    pairs_j: np.ndarray
    measured: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray


def solve_offsets(m: PairDifferenceMatrix, cfg: SensorConfig | None = None,
                  min_count: int = MIN_PAIR_COUNT, stderr_floor_ps: float = 1e-6,
                  return_details: bool = False):
    """Weighted least-squares offsets with offset[0] fixed to zero.

    Solves ``o_i - o_j = mean_dt(i, j)`` over all measured pairs with weights
    ``1 / stderr^2`` through the normal equations of the pair graph.

    The reported uncertainties treat every pair mean as an independent
    measurement.  Pair differences from the same pulse share each pixel's own
    jitter, so with many pixels lit per pulse the true scatter approaches
    ``sigma_single / sqrt(pulses seen by the pixel)`` and can be several times
    larger than the formal value.
    """
    n = cfg.n_pixels if cfg is not None else m.n_pixels
    if m.n_pixels != n:
        raise CalibrationError(f"pair matrix has {m.n_pixels} pixels, expected {n}")
    i, j = m.pairs(min_count)
    graph = coo_matrix((np.ones(i.size), (i, j)), shape=(n, n))
    _, label = connected_components(graph, directed=False)
    cut = np.flatnonzero(label != label[0])
    if cut.size:
        raise CalibrationError(
            f"pair graph is disconnected: {cut.size} pixel(s) not linked to pixel 0 "
            f"({_ranges(cut)})",
            details={"disconnected": cut.tolist()},
        )
    d = m.mean_dt()[i, j]
    se = np.maximum(m.stderr()[i, j], stderr_floor_ps)
    w = 1.0 / se ** 2
    # weighted graph Laplacian and right-hand side
    lap = np.zeros((n, n))
    np.add.at(lap, (i, i), w)
    np.add.at(lap, (j, j), w)
    np.add.at(lap, (i, j), -w)
    np.add.at(lap, (j, i), -w)
    rhs = np.zeros(n)
    np.add.at(rhs, i, w * d)
    np.add.at(rhs, j, -w * d)
    red = lap[1:, 1:]
    try:
        chol = np.linalg.cholesky(red)
    except np.linalg.LinAlgError as exc:
        raise CalibrationError(f"offset normal equations are singular: {exc}") from exc
    y = np.linalg.solve(chol, rhs[1:])
    sol = np.linalg.solve(chol.T, y)
    offsets = np.r_[0.0, sol]
    inv_chol = np.linalg.inv(chol)
    unc = np.r_[0.0, np.sqrt((inv_chol ** 2).sum(axis=0))]
    table = OffsetTable(offsets, unc)
    if not return_details:
        return table
    resid = d - (offsets[i] - offsets[j])
    return OffsetSolution(table, i, j, d, w, resid)


def _ranges(idx: np.ndarray) -> str:
    parts = []
    start = prev = int(idx[0])
    for v in map(int, idx[1:]):
        if v != prev + 1:
            parts.append(f"{start}" if start == prev else f"{start}-{prev}")
            start = v
        prev = v
    parts.append(f"{start}" if start == prev else f"{start}-{prev}")
    return ", ".join(parts[:20]) + (" ..." if len(parts) > 20 else "")
