"""Hit data model and conversion of raw TDC/counter codes to physical time.

Hits travel through the package as numpy structured arrays (``RAW_DTYPE`` and
``CAL_DTYPE``) so that millions of records can be handled without Python-level
loops.  ``RawHit`` is a convenience record for single hits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DomainError

# Little-endian on-disk layout, 12 bytes per record.
RAW_DTYPE = np.dtype(
    [
        ("cycle", "<u4"),
        ("pixel", "<u2"),
        ("fine", "u1"),
        ("flags", "u1"),
        ("coarse", "<u4"),
    ]
)

CAL_DTYPE = np.dtype(
    [
        ("cycle", "<u4"),
        ("pixel", "<u2"),
        ("time_ps", "<f8"),
        ("wavelength_nm", "<f8"),
        ("edge", "?"),
    ]
)

FLAG_EDGE = 0x01
FLAG_RESERVED = 0xFE


@dataclass(frozen=True)
class SensorConfig:
    n_pixels: int = 256
    n_tdcs: int = 64
    fine_bins_per_tdc: int = 140
    coarse_period_ps: float = 2500.0
    # 2500 ps / 140 bins, quoted as 17.857 ps
    nominal_lsb_ps: float = 2500.0 / 140
    cycle_length_ps: float = 4.0e9
    dead_time_ps: float = 50000.0
    buffer_cap_per_pixel_per_cycle: int = 512
    trigger_rate_hz: float = 250.0

    def __post_init__(self):
        if self.n_pixels <= 0 or self.n_tdcs <= 0 or self.fine_bins_per_tdc <= 0:
            raise ConfigurationError("pixel, TDC and fine-bin counts must be positive")
        if self.n_pixels % self.n_tdcs:
            raise ConfigurationError(
                f"n_pixels={self.n_pixels} is not divisible by n_tdcs={self.n_tdcs}"
            )
        if abs(self.fine_bins_per_tdc * self.nominal_lsb_ps - self.coarse_period_ps) > 0.01:
            raise ConfigurationError(
                "fine_bins_per_tdc * nominal_lsb_ps must equal coarse_period_ps "
                f"(got {self.fine_bins_per_tdc} * {self.nominal_lsb_ps} "
                f"vs {self.coarse_period_ps})"
            )
        if self.fine_bins_per_tdc > 256:
            raise ConfigurationError("fine codes must fit in 8 bits")
        if self.cycle_length_ps <= 0:
            raise ConfigurationError("cycle_length_ps must be positive")
        if self.buffer_cap_per_pixel_per_cycle < 1:
            raise ConfigurationError("buffer cap must be at least 1")
        if self.dead_time_ps < 0:
            raise ConfigurationError("dead_time_ps must be non-negative")

    @property
    def pixels_per_tdc(self) -> int:
        return self.n_pixels // self.n_tdcs

    @property
    def max_coarse(self) -> int:
        """Largest coarse count whose period starts inside the cycle."""
        return int(np.ceil(self.cycle_length_ps / self.coarse_period_ps)) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SensorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown sensor config keys: {sorted(unknown)}")
        return cls(**d)


class RawHit(NamedTuple):
    cycle_index: int
    pixel: int
    coarse: int
    fine: int
    flags: int = 0


def raw_hits(cycle, pixel, coarse, fine, flags=0) -> np.ndarray:
    """Build a ``RAW_DTYPE`` array from column-like inputs."""
    cycle = np.atleast_1d(np.asarray(cycle))
    out = np.zeros(cycle.shape[0], dtype=RAW_DTYPE)
    out["cycle"] = cycle
    out["pixel"] = pixel
    out["coarse"] = coarse
    out["fine"] = fine
    out["flags"] = flags
    return out


def as_raw_array(hits) -> np.ndarray:
    if isinstance(hits, RawHit):
        return raw_hits(hits.cycle_index, hits.pixel, hits.coarse, hits.fine, hits.flags)
    hits = np.asarray(hits)
    if hits.dtype != RAW_DTYPE:
        raise TypeError(f"expected RAW_DTYPE records, got {hits.dtype}")
    return hits


def validate_raw(hits: np.ndarray, cfg: SensorConfig, base_offset: int = 0,
                 record_size: int = RAW_DTYPE.itemsize) -> None:
    """Raise DomainError naming the first record that violates RawHit invariants.

    ``base_offset`` is the byte offset of ``hits[0]`` in its file, used only
    for the error message.
    """
    bad = (
        (hits["fine"] >= cfg.fine_bins_per_tdc)
        | (hits["pixel"] >= cfg.n_pixels)
        | ((hits["flags"] & FLAG_RESERVED) != 0)
        | (hits["coarse"] > cfg.max_coarse)
    )
    if bad.any():
        i = int(np.argmax(bad))
        h = hits[i]
        if h["fine"] >= cfg.fine_bins_per_tdc:
            what = f"fine={h['fine']} >= fine_bins_per_tdc={cfg.fine_bins_per_tdc}"
        elif h["pixel"] >= cfg.n_pixels:
            what = f"pixel={h['pixel']} >= n_pixels={cfg.n_pixels}"
        elif h["flags"] & FLAG_RESERVED:
            what = f"reserved flag bits set (flags=0x{h['flags']:02x})"
        else:
            what = f"coarse={h['coarse']} lies beyond the cycle end"
        raise DomainError(
            f"invalid record {i} at byte offset {base_offset + i * record_size}: {what}",
            index=i,
            offset=base_offset + i * record_size,
        )


def tdc_of_pixel(pixel, cfg: SensorConfig):
    """TDC index serving ``pixel``; consecutive blocks of pixels share one TDC."""
    p = np.asarray(pixel)
    if np.any(p < 0) or np.any(p >= cfg.n_pixels):
        raise DomainError(f"pixel out of range [0, {cfg.n_pixels})")
    out = p // cfg.pixels_per_tdc
    return int(out) if out.ndim == 0 else out


def decode_nominal(hit, cfg: SensorConfig):
    """Time within the cycle assuming ideal, equal-width fine bins.

    Returns the bin centre, ``coarse * T_coarse + (fine + 0.5) * LSB``.
    """
    scalar = isinstance(hit, RawHit)
    h = as_raw_array(hit)
    validate_raw(h, cfg)
    t = h["coarse"] * cfg.coarse_period_ps + (h["fine"] + 0.5) * cfg.nominal_lsb_ps
    return float(t[0]) if scalar else t


class TdcCalibration:
    """Per-TDC fine-bin widths, renormalised so each TDC spans one coarse period."""

    def __init__(self, bin_widths_ps, coarse_period_ps: float = 2500.0,
                 renormalize: bool = True):
        w = np.array(bin_widths_ps, dtype=float, ndmin=2)
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ConfigurationError("bin widths must be finite and non-negative")
        totals = w.sum(axis=1, keepdims=True)
        if np.any(totals <= 0):
            raise ConfigurationError("every TDC needs a positive total width")
        if renormalize:
            w = w * (coarse_period_ps / totals)
        elif np.any(np.abs(totals - coarse_period_ps) > 1e-9 * coarse_period_ps):
            raise ConfigurationError("stored bin widths do not sum to the coarse period")
        edges = np.zeros((w.shape[0], w.shape[1] + 1))
        np.cumsum(w, axis=1, out=edges[:, 1:])
        # pin the last edge; rounding in cumsum may overshoot by an ulp
        np.minimum(edges, coarse_period_ps, out=edges)
        edges[:, -1] = coarse_period_ps
        self.coarse_period_ps = float(coarse_period_ps)
        self.bin_widths_ps = w
        self.cumulative_edges_ps = edges
        self.centers_ps = 0.5 * (edges[:, :-1] + edges[:, 1:])

    @classmethod
    def uniform(cls, cfg: SensorConfig) -> "TdcCalibration":
        return cls(np.full((cfg.n_tdcs, cfg.fine_bins_per_tdc), cfg.nominal_lsb_ps),
                   cfg.coarse_period_ps)

    @property
    def n_tdcs(self) -> int:
        return self.bin_widths_ps.shape[0]

    @property
    def n_bins(self) -> int:
        return self.bin_widths_ps.shape[1]

    def check(self, cfg: SensorConfig) -> None:
        if (self.n_tdcs, self.n_bins) != (cfg.n_tdcs, cfg.fine_bins_per_tdc):
            raise ConfigurationError(
                f"TDC calibration is {self.n_tdcs}x{self.n_bins}, sensor expects "
                f"{cfg.n_tdcs}x{cfg.fine_bins_per_tdc}"
            )
        if abs(self.coarse_period_ps - cfg.coarse_period_ps) > 1e-9:
            raise ConfigurationError("TDC calibration coarse period differs from sensor")

    def to_dict(self) -> dict:
        return {
            "coarse_period_ps": self.coarse_period_ps,
            "bin_widths_ps": self.bin_widths_ps.tolist(),
            "cumulative_edges_ps": self.cumulative_edges_ps.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TdcCalibration":
        # stored tables are already normalised; rescaling again would perturb the last digit
        return cls(d["bin_widths_ps"], d["coarse_period_ps"], renormalize=False)


class OffsetTable:
    """Per-pixel static time offsets, gauge fixed so pixel 0 has offset 0."""

    def __init__(self, offset_ps, uncertainty_ps=None):
        o = np.array(offset_ps, dtype=float)
        if o.ndim != 1 or o.size == 0:
            raise ConfigurationError("offsets must be a non-empty 1-D sequence")
        self.offset_ps = o - o[0]
        self.uncertainty_ps = (
            None if uncertainty_ps is None else np.array(uncertainty_ps, dtype=float)
        )

    @classmethod
    def zeros(cls, cfg: SensorConfig) -> "OffsetTable":
        return cls(np.zeros(cfg.n_pixels))

    def __len__(self):
        return self.offset_ps.size

    def check(self, cfg: SensorConfig) -> None:
        if len(self) != cfg.n_pixels:
            raise ConfigurationError(
                f"offset table has {len(self)} pixels, sensor has {cfg.n_pixels}"
            )

    def to_dict(self) -> dict:
        d = {"offset_ps": self.offset_ps.tolist()}
        if self.uncertainty_ps is not None:
            d["uncertainty_ps"] = self.uncertainty_ps.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OffsetTable":
        return cls(d["offset_ps"], d.get("uncertainty_ps"))


class Decoder:
    """Precomputed lookup tables for fast calibrated decoding of many hits."""

    def __init__(self, cfg: SensorConfig, tdc_cal: TdcCalibration | None = None,
                 offsets: OffsetTable | None = None, raw_offsets=None):
        tdc_cal = tdc_cal or TdcCalibration.uniform(cfg)
        tdc_cal.check(cfg)
        if raw_offsets is not None:
            # ungauged offsets, used by the simulator's ground truth
            off = np.asarray(raw_offsets, dtype=float)
            if off.size != cfg.n_pixels:
                raise ConfigurationError("offset vector length differs from n_pixels")
        else:
            offsets = offsets or OffsetTable.zeros(cfg)
            offsets.check(cfg)
            off = offsets.offset_ps
        self.cfg = cfg
        tdc = np.arange(cfg.n_pixels) // cfg.pixels_per_tdc
        # per-pixel table of (bin centre - offset)
        self._table = (tdc_cal.centers_ps[tdc] - off[:, None]).ravel()

    def times(self, hits: np.ndarray) -> np.ndarray:
        idx = hits["pixel"].astype(np.intp) * self.cfg.fine_bins_per_tdc + hits["fine"]
        return hits["coarse"] * self.cfg.coarse_period_ps + self._table[idx]

    def __call__(self, hits: np.ndarray, wavelength_nm=None) -> np.ndarray:
        out = np.empty(hits.shape[0], dtype=CAL_DTYPE)
        out["cycle"] = hits["cycle"]
        out["pixel"] = hits["pixel"]
        t = self.times(hits)
        out["time_ps"] = t
        out["wavelength_nm"] = np.nan if wavelength_nm is None else wavelength_nm
        out["edge"] = (t < 0) | (t >= self.cfg.cycle_length_ps)
        return out


def decode_calibrated(hit, cfg: SensorConfig, tdc_cal: TdcCalibration,
                      offsets: OffsetTable):
    """Calibrated hits: coarse time plus calibrated fine-bin midpoint minus offset.

    Hits pushed outside ``[0, cycle_length)`` by the offset are kept and
    marked with ``edge=True``.  A single ``RawHit`` returns a single record.
    """
    scalar = isinstance(hit, RawHit)
    h = as_raw_array(hit)
    validate_raw(h, cfg)
    out = Decoder(cfg, tdc_cal, offsets)(h)
    return out[0] if scalar else out
