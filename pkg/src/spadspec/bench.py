"""Throughput benchmark: stream a raw file, decode it and histogram coincidences."""

from __future__ import annotations

import os
import time

import numpy as np

from .coincidence import CoincidenceAccumulator
from .rawio import DEFAULT_CHUNK, read_raw, write_raw
from .timestamp import RAW_DTYPE, Decoder, SensorConfig


def _bench_cycle_chunks(cfg: SensorConfig, n_records: int, hits_per_cycle: int,
                        pair_fraction: float, delay_ps: float, jitter_ps: float, seed: int,
                        cycles_per_chunk: int = 32):
    """Synthetic hits: flat background on all pixels plus correlated pairs
    between the lower and upper half of the array."""
    rng = np.random.default_rng(seed)
    T = cfg.cycle_length_ps
    half = cfg.n_pixels // 2
    nb = cfg.fine_bins_per_tdc
    n_coarse = cfg.max_coarse + 1
    done = 0
    cycle = 0
    while done < n_records:
        parts = []
        for _ in range(cycles_per_chunk):
            if done >= n_records:
                break
            n = min(hits_per_cycle, n_records - done)
            n_pairs = int(n * pair_fraction) // 2
            n_bg = n - 2 * n_pairs
            t0 = rng.uniform(0, T - delay_ps - 10 * jitter_ps, n_pairs)
            t = np.concatenate([
                t0 + rng.normal(0, jitter_ps, n_pairs),
                t0 + delay_ps + rng.normal(0, jitter_ps, n_pairs),
                rng.uniform(0, T, n_bg),
            ])
            pix = np.concatenate([
                rng.integers(0, half, n_pairs),
                rng.integers(half, cfg.n_pixels, n_pairs),
                rng.integers(0, cfg.n_pixels, n_bg),
            ])
            t = np.clip(t, 0, np.nextafter(T, 0))
            coarse = np.floor(t / cfg.coarse_period_ps).astype(np.int64)
            fine = np.minimum(
                ((t - coarse * cfg.coarse_period_ps) / cfg.nominal_lsb_ps).astype(np.int64),
                nb - 1)
            key = ((np.int64(len(parts)) * cfg.n_pixels + pix) * n_coarse + coarse) * nb + fine
            rec = np.empty(n, dtype=RAW_DTYPE)
            rec["cycle"] = cycle
            rec["pixel"] = pix
            rec["coarse"] = coarse
            rec["fine"] = fine
            rec["flags"] = 0
            parts.append((key, rec))
            done += n
            cycle += 1
        key = np.concatenate([k for k, _ in parts])
        rec = np.concatenate([r for _, r in parts])
        yield rec[np.argsort(key, kind="stable")]


def make_bench_file(path, n_records: int = 100_000_000, cfg: SensorConfig | None = None,
                    seed: int = 0, hits_per_cycle: int = 32_000,
                    pair_fraction: float = 0.2, delay_ps: float = 18_300.0,
                    jitter_ps: float = 57.0) -> int:
    """Write a synthetic raw file of ``n_records`` records (about 32k hits per
    4 ms cycle, i.e. 8M hits/s of acquisition time)."""
    cfg = cfg or SensorConfig()
    return write_raw(path, cfg, _bench_cycle_chunks(cfg, n_records, hits_per_cycle,
                                                    pair_fraction, delay_ps, jitter_ps, seed),
                     provenance={"generator": "bench", "seed": seed})


def run_bench(path, window_ps: float = 20_000.0, groupA=None, groupB=None,
              chunk_records: int = DEFAULT_CHUNK) -> dict:
    """Time read + validate + decode + coincidence histogramming over a file."""
    t0 = time.perf_counter()
    cfg, reader = read_raw(path, chunk_records=chunk_records)
    half = cfg.n_pixels // 2
    groupA = groupA if groupA is not None else range(0, half)
    groupB = groupB if groupB is not None else range(half, cfg.n_pixels)
    dec = Decoder(cfg)
    acc = CoincidenceAccumulator(window_ps, groupA, groupB, cfg.n_pixels)
    for chunk in reader:
        acc.add(chunk["cycle"], chunk["pixel"], dec.times(chunk))
    hist = acc.finish()
    elapsed = time.perf_counter() - t0
    return {
        "records": acc.n_hits,
        "pairs": acc.n_pairs,
        "seconds": elapsed,
        "hits_per_s": acc.n_hits / elapsed if elapsed > 0 else float("inf"),
        "file_bytes": os.path.getsize(path),
        "peak_bin_ps": float(hist.centers[int(np.argmax(hist.counts))]),
    }
