"""Raw hit container, result exports and truth sidecar.

Raw file layout (all little-endian)::

    b"PSPD"                 magic
    u16                     format version (1)
    u32                     length of the JSON header in bytes
    <json>                  UTF-8: {"sensor": {...}, "provenance": {...}}
    12-byte records         cycle u32, pixel u16, fine u8, flags u8, coarse u32

Records are stored in (cycle, pixel, coarse, fine) order.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import DomainError, RawFormatError
from .fitting import Histogram1D
from .simulate import KIND_NAMES, TRUTH_DTYPE
from .spectro import SpectralCalibration
from .timestamp import RAW_DTYPE, OffsetTable, SensorConfig, TdcCalibration, validate_raw

MAGIC = b"PSPD"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")
DEFAULT_CHUNK = 1 << 17  # records per read; small chunks stay cache resident

TRUTH_COLUMNS = ("cycle", "pair_id", "kind", "emission_time_ps", "arrival_time_ps",
                 "wavelength_nm", "pixel")
HIST_COLUMNS = ("bin_low", "bin_high", "count")


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def dumps_json(obj) -> str:
    """Deterministic JSON text: sorted keys, numpy scalars and arrays converted."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def is_record_sorted(h: np.ndarray) -> bool:
    """True when ``h`` is already in (cycle, pixel, coarse, fine) order."""
    if h.size < 2:
        return True
    gt = np.zeros(h.size - 1, dtype=bool)
    eq = np.ones(h.size - 1, dtype=bool)
    for name in ("cycle", "pixel", "coarse", "fine"):
        k = h[name]
        gt |= eq & (k[1:] > k[:-1])
        eq &= k[1:] == k[:-1]
    return bool(np.all(gt | eq))


def _sort_records(h: np.ndarray) -> np.ndarray:
    if is_record_sorted(h):
        return h
    order = np.lexsort((h["fine"], h["coarse"], h["pixel"], h["cycle"]))
    return h[order]


def _key(rec) -> tuple:
    return (int(rec["cycle"]), int(rec["pixel"]), int(rec["coarse"]), int(rec["fine"]))


def write_raw(path, cfg: SensorConfig, hits, provenance: dict | None = None) -> int:
    """Write hits (an array or an iterable of arrays) and return the record count.

    Each chunk is sorted; consecutive chunks must not overlap in record order,
    which holds for per-cycle chunks from the simulator.
    """
    header = dumps_json({"sensor": cfg.to_dict(), "provenance": provenance or {}}).encode()
    chunks = [hits] if isinstance(hits, np.ndarray) else hits
    n = 0
    last = None
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for c in chunks:
            c = np.asarray(c)
            if c.dtype != RAW_DTYPE:
                raise TypeError(f"expected RAW_DTYPE records, got {c.dtype}")
            if c.size == 0:
                continue
            try:
                validate_raw(c, cfg)
            except DomainError as exc:
                raise DomainError(f"cannot write record {n + exc.index}: {exc}",
                                  index=n + exc.index) from exc
            c = _sort_records(c)
            if last is not None and _key(c[0]) < last:
                raise RawFormatError(f"chunk starting at record {n} is out of order", index=n)
            last = _key(c[-1])
            f.write(c.astype(RAW_DTYPE, copy=False).tobytes())
            n += c.size
    return n


class RawReader:
    """Streaming reader; iterate to get validated ``RAW_DTYPE`` chunks.

    Memory use is bounded by ``chunk_records`` regardless of file size.
    """

    def __init__(self, path, chunk_records: int = DEFAULT_CHUNK, validate: bool = True):
        self.path = os.fspath(path)
        self.chunk_records = int(chunk_records)
        self.validate = validate
        with open(self.path, "rb") as f:
            pre = f.read(_PREAMBLE.size)
            if len(pre) < _PREAMBLE.size:
                raise RawFormatError(f"{self.path}: file too short for a header", offset=0)
            magic, version, hlen = _PREAMBLE.unpack(pre)
            if magic != MAGIC:
                raise RawFormatError(
                    f"{self.path}: bad magic {magic!r}, expected {MAGIC.decode()!r}", offset=0)
            if version != FORMAT_VERSION:
                raise RawFormatError(
                    f"{self.path}: unsupported format version {version} "
                    f"(reader handles {FORMAT_VERSION})", offset=4)
            raw = f.read(hlen)
            if len(raw) != hlen:
                raise RawFormatError(f"{self.path}: header truncated", offset=_PREAMBLE.size)
        try:
            meta = json.loads(raw.decode("utf-8"))
            self.config = SensorConfig.from_dict(meta["sensor"])
        except (ValueError, KeyError, TypeError) as exc:
            raise RawFormatError(f"{self.path}: unreadable header: {exc}",
                                 offset=_PREAMBLE.size) from exc
        self.provenance = meta.get("provenance", {})
        self.data_offset = _PREAMBLE.size + hlen
        body = os.path.getsize(self.path) - self.data_offset
        self.n_records, tail = divmod(body, RAW_DTYPE.itemsize)
        if tail:
            off = self.data_offset + self.n_records * RAW_DTYPE.itemsize
            raise RawFormatError(
                f"{self.path}: truncated record at byte offset {off} "
                f"({tail} of {RAW_DTYPE.itemsize} bytes)", index=self.n_records, offset=off)

    def __len__(self) -> int:
        return self.n_records

    def __iter__(self) -> Iterator[np.ndarray]:
        size = RAW_DTYPE.itemsize
        with open(self.path, "rb") as f:
            f.seek(self.data_offset)
            done = 0
            while done < self.n_records:
                count = min(self.chunk_records, self.n_records - done)
                chunk = np.fromfile(f, dtype=RAW_DTYPE, count=count)
                if chunk.size != count:
                    raise RawFormatError(f"{self.path}: short read at record {done + chunk.size}",
                                         index=done + chunk.size,
                                         offset=self.data_offset + (done + chunk.size) * size)
                if self.validate:
                    try:
                        validate_raw(chunk, self.config, self.data_offset + done * size)
                    except DomainError as exc:
                        raise DomainError(f"{self.path}: {exc}", index=done + exc.index,
                                          offset=exc.offset) from exc
                done += count
                yield chunk


def read_raw(path, chunk_records: int = DEFAULT_CHUNK,
             validate: bool = True) -> tuple[SensorConfig, RawReader]:
    """Return the sensor configuration and a streaming chunk iterator."""
    reader = RawReader(path, chunk_records, validate)
    return reader.config, reader


def read_raw_all(path) -> tuple[SensorConfig, np.ndarray]:
    cfg, reader = read_raw(path)
    chunks = list(reader)
    return cfg, (np.concatenate(chunks) if chunks else np.empty(0, RAW_DTYPE))


# --- text exports -----------------------------------------------------------

def write_truth_csv(path_or_file, truth: np.ndarray | Iterable[np.ndarray]) -> int:
    """Truth sidecar, one row per emitted photon or dark count."""
    chunks = [truth] if isinstance(truth, np.ndarray) else truth
    own = not hasattr(path_or_file, "write")
    f = open(path_or_file, "w", newline="") if own else path_or_file
    n = 0
    try:
        f.write(",".join(TRUTH_COLUMNS) + "\n")
        for tr in chunks:
            if tr is None:
                continue
            buf = io.StringIO()
            for r in tr.tolist():
                cyc, pid, kind, emit, arr, lam, pix = r
                buf.write(
                    f"{cyc},{'' if pid < 0 else pid},{KIND_NAMES[kind]},"
                    f"{fmt_float(emit)},{fmt_float(arr)},"
                    f"{'' if lam != lam else fmt_float(lam)},{pix}\n"
                )
            f.write(buf.getvalue())
            n += tr.size
    finally:
        if own:
            f.close()
    return n


def read_truth_csv(path) -> np.ndarray:
    names = {v: k for k, v in KIND_NAMES.items()}
    rows = []
    with open(path) as f:
        head = f.readline().strip().split(",")
        if tuple(head) != TRUTH_COLUMNS:
            raise RawFormatError(f"{path}: unexpected truth columns {head}")
        for line in f:
            c = line.rstrip("\n").split(",")
            rows.append((int(c[0]), int(c[1]) if c[1] else -1, names[c[2]], float(c[3]),
                         float(c[4]), float(c[5]) if c[5] else np.nan, int(c[6])))
    return np.array(rows, dtype=TRUTH_DTYPE)


def histogram_csv(hist: Histogram1D) -> str:
    lines = [",".join(HIST_COLUMNS)]
    for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
        lines.append(f"{fmt_float(lo)},{fmt_float(hi)},{int(c)}")
    return "\n".join(lines) + "\n"


def rows_csv(rows: list[dict], columns: Iterable[str]) -> str:
    columns = list(columns)
    out = [",".join(columns)]
    for r in rows:
        out.append(",".join(
            fmt_float(r[c]) if isinstance(r[c], (float, np.floating)) else str(r[c])
            for c in columns))
    return "\n".join(out) + "\n"


def dict_csv(d: dict) -> str:
    """Flat ``key,value`` CSV of the scalar entries of a result dictionary."""
    out = ["key,value"]
    for k in sorted(d):
        v = d[k]
        if isinstance(v, (float, np.floating)):
            out.append(f"{k},{fmt_float(v)}")
        elif isinstance(v, (int, np.integer, bool, str)):
            out.append(f"{k},{v}")
    return "\n".join(out) + "\n"


def iter_cycles(chunks: Iterable[np.ndarray]) -> Iterator[np.ndarray]:
    """Re-chunk a cycle-ordered stream so that no cycle is split between chunks."""
    held = None
    for c in chunks:
        if c.size == 0:
            continue
        if held is not None:
            c = np.concatenate([held, c])
        cut = int(np.searchsorted(c["cycle"], c["cycle"][-1], side="left"))
        held = c[cut:]
        if cut:
            yield c[:cut]
    if held is not None and held.size:
        yield held


def sha256_file(path, block: int = 1 << 22) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            b = f.read(block)
            if not b:
                break
            h.update(b)
    return h.hexdigest()


CALIBRATION_SCHEMA = "spadspec.calibration"
CALIBRATION_VERSION = 1


@dataclass
class CalibrationSet:
    """The calibration document: any of TDC widths, offsets and dispersion."""

    tdc: TdcCalibration | None = None
    offsets: OffsetTable | None = None
    spectral: SpectralCalibration | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"schema": CALIBRATION_SCHEMA, "version": CALIBRATION_VERSION,
             "provenance": self.provenance}
        if self.tdc is not None:
            d["tdc"] = self.tdc.to_dict()
        if self.offsets is not None:
            d["offsets"] = self.offsets.to_dict()
        if self.spectral is not None:
            d["spectral"] = self.spectral.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationSet":
        if d.get("schema") != CALIBRATION_SCHEMA:
            raise RawFormatError(f"not a calibration document (schema {d.get('schema')!r})")
        if d.get("version") != CALIBRATION_VERSION:
            raise RawFormatError(f"unsupported calibration version {d.get('version')!r}")
        return cls(
            TdcCalibration.from_dict(d["tdc"]) if "tdc" in d else None,
            OffsetTable.from_dict(d["offsets"]) if "offsets" in d else None,
            SpectralCalibration.from_dict(d["spectral"]) if "spectral" in d else None,
            d.get("provenance", {}),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(dumps_json(self.to_dict()))

    @classmethod
    def load(cls, path) -> "CalibrationSet":
        with open(path) as f:
            try:
                d = json.load(f)
            except ValueError as exc:
                raise RawFormatError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(d)
