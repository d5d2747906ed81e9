"""Command-line interface.

Every subcommand that writes ``--output`` also writes a run manifest next to
it (``<output>.manifest.json``) recording argv, input and output digests, the
seed and library versions.  ``spadspec rerun <manifest>`` replays the run into
a scratch directory and compares digests.

Exit status: 0 success, 1 domain/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import platform
import shutil
import sys
import tempfile
import warnings
from dataclasses import fields

import numpy as np
import scipy

from . import __version__
from .biphoton import SWEEP_COLUMNS, BiphotonParams, sweep
from .calibration import (MIN_COUNTS_PER_TDC, MIN_PAIR_COUNT, accumulate_density,
                          accumulate_pair_differences, fit_tdc_calibration, solve_offsets)
from .coincidence import (PAIR_DTYPE, anticorrelation, dt_histogram_edges, find_coincidences,
                          pair_time_resolution)
from .constants import C_NM_PER_S
from .errors import ConfigurationError, SpadSpecError
from .fitting import Histogram1D
from .rawio import (CalibrationSet, dict_csv, dumps_json, fmt_float, histogram_csv, iter_cycles,
                    read_raw, rows_csv, sha256_file, write_raw, write_truth_csv)
from .simulate import (DetectorEffects, Dispersion, iter_simulate, random_dnl, random_offsets,
                       source_from_dict)
from .spectro import (ARGON_LINES_NM, SpectralCalibration, build_spectrum, calibrate_wavelength,
                      fit_in_wavelength, fit_spectrum_peaks, hup_benchmark)
from .timestamp import Decoder, OffsetTable, SensorConfig

MANIFEST_SCHEMA = "spadspec.manifest"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- run bookkeeping --------------------------------------------------------

class Run:
    """Collects the files a command reads and writes, for the manifest."""

    def __init__(self, args):
        self.args = args
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.stdout_text: list[str] = []

    def print(self, text: str) -> None:
        self.stdout_text.append(text)
        sys.stdout.write(text)

    def read(self, path):
        if path is not None:
            self.inputs.append(os.fspath(path))
        return path

    def wrote(self, path):
        self.outputs.append(os.fspath(path))
        return path

    def emit(self, text: str, suffix: str = "") -> None:
        """Write text to ``--output`` (plus suffix) or to stdout."""
        out = self.args.output
        if out is None:
            if not suffix:
                self.print(text)
            return
        path = out + suffix
        with open(path, "w", newline="") as f:
            f.write(text)
        self.wrote(path)


def _versions() -> dict:
    return {"spadspec": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(run: Run, argv: list[str], path: str) -> None:
    out = run.args.output
    outputs = {}
    for p in run.outputs:
        key = p[len(out):] if out and p.startswith(out) else p
        outputs[key] = sha256_file(p)
    if run.stdout_text:
        outputs["<stdout>"] = _sha256_text("".join(run.stdout_text))
    doc = {
        "schema": MANIFEST_SCHEMA,
        "version": 1,
        "argv": list(argv),
        "command": run.args.command,
        "cwd": os.getcwd(),
        "seed": getattr(run.args, "seed", None),
        "primary_output": out,
        "inputs": {p: sha256_file(p) for p in run.inputs},
        "outputs": outputs,
        "versions": _versions(),
    }
    with open(path, "w") as f:
        f.write(dumps_json(doc))


# --- helpers ----------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _pair(text: str) -> tuple[float, float]:
    v = _floats(text)
    if len(v) != 2:
        raise argparse.ArgumentTypeError(f"expected two numbers 'a,b', got {text!r}")
    return v[0], v[1]


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _reference_lines(text: str) -> list[float]:
    if text == "argon":
        return list(ARGON_LINES_NM)
    if os.path.exists(text):
        with open(text) as f:
            return sorted(float(x) for x in f.read().replace(",", " ").split())
    return sorted(_floats(text))


def _load_cal(run: Run, path) -> CalibrationSet:
    if path is None:
        return CalibrationSet()
    return CalibrationSet.load(run.read(path))


def _decoder(cfg: SensorConfig, cal: CalibrationSet, with_offsets: bool = True) -> Decoder:
    return Decoder(cfg, cal.tdc, cal.offsets if with_offsets else None)


def _open(run: Run, path):
    if path is None:
        raise UsageError("--input is required")
    return read_raw(run.read(path))


def _fmt(args, default: str) -> str:
    return args.format or default


def _result(run: Run, payload: dict, default_format: str = "json") -> None:
    if _fmt(run.args, default_format) == "csv":
        run.emit(dict_csv(payload))
    else:
        run.emit(dumps_json(payload))


# --- simulate ---------------------------------------------------------------

def _default_scenario() -> dict:
    # argon lamp on a 256-pixel array spanning about 28 nm around 805 nm
    lines = [[l, 1.0] for l in ARGON_LINES_NM]
    return {
        "source": {"type": "thermal", "lines": lines, "instrument_sigma_nm": 0.042,
                   "total_rate_hz": 1.0e6},
        "dispersion": {"lambda_at_pixel0_nm": 805.0 - 0.11 * 128, "nm_per_pixel": 0.11},
        "n_cycles": 25,
    }


_SCENARIO_KEYS = {"sensor", "source", "sources", "effects", "dispersion", "n_cycles", "dnl",
                  "offsets"}


def cmd_simulate(run: Run) -> None:
    args = run.args
    scen = _default_scenario()
    scen.update(args.config_data)
    unknown = set(scen) - _SCENARIO_KEYS
    if unknown:
        raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
    if args.output is None:
        raise UsageError("simulate needs --output for the raw file")
    cfg = SensorConfig.from_dict(scen.get("sensor", {}))
    src_spec = scen.get("sources", scen.get("source"))
    specs = src_spec if isinstance(src_spec, list) else [src_spec]
    sources = [source_from_dict(s) for s in specs]
    try:
        disp = Dispersion(**scen["dispersion"]) if scen.get("dispersion") else None
    except TypeError as exc:
        raise ConfigurationError(f"bad dispersion: {exc}") from exc
    eff_kw = dict(scen.get("effects", {}))
    known = {f.name for f in fields(DetectorEffects)} - {"true_offsets_ps", "true_dnl"}
    if set(eff_kw) - known:
        raise ConfigurationError(f"unknown effects keys: {sorted(set(eff_kw) - known)}")
    seed = args.seed
    if scen.get("dnl"):
        eff_kw["true_dnl"] = random_dnl(cfg, scen["dnl"]["low_ps"], scen["dnl"]["high_ps"], seed)
    if scen.get("offsets"):
        eff_kw["true_offsets_ps"] = random_offsets(cfg, scen["offsets"]["low_ps"],
                                                   scen["offsets"]["high_ps"], seed)
    effects = DetectorEffects(**eff_kw)
    n_cycles = int(args.cycles if args.cycles is not None else scen["n_cycles"])

    summary = {}
    truth_chunks = []

    def hits_stream():
        for h, tr, s in iter_simulate(cfg, effects, sources, disp, n_cycles, seed,
                                      with_truth=not args.no_truth):
            for k, v in s.items():
                summary[k] = summary.get(k, 0) + v
            if tr is not None:
                truth_chunks.append(tr)
            yield h

    provenance = {"generator": "spadspec simulate", "version": __version__, "seed": seed,
                  "scenario": scen, "n_cycles": n_cycles}
    n = write_raw(args.output, cfg, hits_stream(), provenance)
    run.wrote(args.output)
    if not args.no_truth:
        write_truth_csv(args.output + ".truth.csv", truth_chunks)
        run.wrote(args.output + ".truth.csv")
    truth_cal = CalibrationSet(
        effects.true_dnl,
        OffsetTable(effects.true_offsets_ps) if effects.true_offsets_ps is not None else None,
        None,
        {"kind": "simulation truth", "seed": seed},
    )
    if disp is not None:
        truth_cal.spectral = SpectralCalibration(disp.lambda_at_pixel0_nm, disp.nm_per_pixel)
    truth_cal.save(args.output + ".truth-cal.json")
    run.wrote(args.output + ".truth-cal.json")
    summary.update({"records": n, "n_cycles": n_cycles,
                    "exposure_s": n_cycles * cfg.cycle_length_ps * 1e-12})
    with open(args.output + ".summary.json", "w") as f:
        f.write(dumps_json(summary))
    run.wrote(args.output + ".summary.json")
    run.print(dumps_json(summary))


# --- calibrations -----------------------------------------------------------

def cmd_calibrate_tdc(run: Run) -> None:
    args = run.args
    cfg, reader = _open(run, args.input)
    cal = _load_cal(run, args.calibration)
    hist = accumulate_density(reader, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        tdc = fit_tdc_calibration(hist, cfg, args.min_counts)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    cal.tdc = tdc
    cal.provenance["tdc"] = {"input": os.path.basename(args.input),
                             "sha256": sha256_file(args.input),
                             "counts_per_tdc": hist.per_tdc().tolist(),
                             "total_counts": hist.total_counts}
    run.emit(dumps_json(cal.to_dict()))


def cmd_calibrate_offset(run: Run) -> None:
    args = run.args
    cfg, reader = _open(run, args.input)
    cal = _load_cal(run, args.calibration)
    dec = _decoder(cfg, cal, with_offsets=False)
    window = (args.window_ns if args.window_ns is not None else 5.0) * 1e3
    mat = accumulate_pair_differences((dec(c) for c in iter_cycles(reader)), window,
                                      n_pixels=cfg.n_pixels)
    cal.offsets = solve_offsets(mat, cfg, min_count=args.min_count)
    cal.provenance["offsets"] = {"input": os.path.basename(args.input),
                                 "sha256": sha256_file(args.input),
                                 "pairs_used": int((mat.count >= args.min_count).sum() // 2),
                                 "pulse_window_ps": window}
    run.emit(dumps_json(cal.to_dict()))


# --- analyses ---------------------------------------------------------------

def cmd_spectrum(run: Run) -> None:
    args = run.args
    cfg, reader = _open(run, args.input)
    n_cycles = reader.provenance.get("n_cycles")
    spec = build_spectrum(reader, cfg, n_cycles)
    fits = []
    if args.fit or args.lines:
        fits = fit_spectrum_peaks(spec, half_width=args.half_width, min_counts=args.min_counts)
    scal = None
    if args.lines:
        if args.guess is None:
            raise UsageError("--lines needs --guess A,B (provisional nm = A + B * pixel)")
        scal = calibrate_wavelength(fits, _reference_lines(args.lines), args.guess,
                                    args.tolerance_nm)
        cal = _load_cal(run, args.calibration)
        cal.spectral = scal
        cal.provenance["spectral"] = {"input": os.path.basename(args.input),
                                      "sha256": sha256_file(args.input),
                                      "lines": args.lines}
        run.emit(dumps_json(cal.to_dict()), ".calibration.json")
    if _fmt(args, "csv") == "csv":
        hist = spec.histogram()
        run.emit(histogram_csv(hist))
        if fits:
            run.emit(rows_csv([f.to_dict() for f in fits],
                              ["mean", "mean_err", "sigma", "sigma_err", "amplitude",
                               "amplitude_err", "baseline", "baseline_err", "chi2", "ndof",
                               "unresolved"]), ".fits.csv")
    else:
        doc = {"counts": spec.counts.tolist(), "total": spec.total, "n_cycles": n_cycles,
               "exposure_s": spec.exposure_s, "fits": [f.to_dict() for f in fits]}
        if scal is not None:
            doc["spectral_calibration"] = scal.to_dict()
            doc["fits_nm"] = [fit_in_wavelength(f, scal).to_dict() for f in fits]
        run.emit(dumps_json(doc))


def _coincidences(run: Run, args, want_pairs: bool):
    cfg, reader = _open(run, args.input)
    cal = _load_cal(run, args.calibration)
    dec = _decoder(cfg, cal)
    window = (args.window_ns if args.window_ns is not None else 20.0) * 1e3
    bin_ps = args.bin_ps or cfg.nominal_lsb_ps
    edges = dt_histogram_edges(window, bin_ps)
    counts = np.zeros(edges.size - 1, dtype=np.int64)
    pairs = []
    for chunk in iter_cycles(reader):
        res = find_coincidences(dec(chunk), window, args.group_a, args.group_b, bin_ps,
                                cfg.n_pixels)
        counts += res.histogram.counts
        if want_pairs:
            pairs.append(res.pairs)
    allp = np.concatenate(pairs) if pairs else np.empty(0, PAIR_DTYPE)
    return cfg, cal, Histogram1D(edges, counts), allp


def _pairs_csv(pairs: np.ndarray) -> str:
    out = ["cycle,pixel_a,time_a_ps,pixel_b,time_b_ps,dt_ps"]
    for c, pa, ta, pb, tb, dt in pairs.tolist():
        out.append(f"{c},{pa},{fmt_float(ta)},{pb},{fmt_float(tb)},{fmt_float(dt)}")
    return "\n".join(out) + "\n"


def cmd_coincidence(run: Run) -> None:
    args = run.args
    cfg, cal, hist, pairs = _coincidences(run, args, args.pairs)
    doc = {"dt_convention": "t_B - t_A", "group_a": args.group_a, "group_b": args.group_b,
           "n_pairs": int(hist.counts.sum())}
    if args.fit:
        res = pair_time_resolution(hist, half_width_ps=args.fit_half_width_ps)
        doc["resolution"] = res.to_dict()
    if args.pairs:
        run.emit(_pairs_csv(pairs), ".pairs.csv")
    if _fmt(args, "csv") == "csv":
        run.emit(histogram_csv(hist))
        if args.fit:
            run.emit(dict_csv({k: v for k, v in doc["resolution"].items() if k != "fit"}),
                     ".fit.csv")
    else:
        doc["histogram"] = {"bin_low": hist.edges[:-1].tolist(),
                            "bin_high": hist.edges[1:].tolist(),
                            "count": hist.counts.tolist()}
        run.emit(dumps_json(doc))


def cmd_anticorr(run: Run) -> None:
    args = run.args
    cfg, cal, hist, pairs = _coincidences(run, args, True)
    if args.dispersion is not None:
        scal = SpectralCalibration(*args.dispersion)
    elif cal.spectral is not None:
        scal = cal.spectral
    else:
        raise UsageError("anticorr needs a spectral calibration (--calibration) "
                         "or --dispersion A,B")
    if args.dt_center_ns is not None:
        center = args.dt_center_ns * 1e3
    else:
        center = float(hist.centers[int(np.argmax(hist.counts))])
    sel = np.abs(pairs["dt_ps"] - center) <= args.dt_half_width_ns * 1e3
    ac = anticorrelation(pairs[sel], scal, args.pump_nm)
    doc = ac.to_dict()
    doc.update({"pump_omega_rad_s": 2 * math.pi * C_NM_PER_S / args.pump_nm,
                "dt_center_ps": center, "dt_half_width_ps": args.dt_half_width_ns * 1e3})
    if _fmt(args, "json") == "csv":
        run.emit(dict_csv(doc))
    else:
        doc["hist2d"] = {"signal_edges_nm": ac.xedges_nm.tolist(),
                         "idler_edges_nm": ac.yedges_nm.tolist(),
                         "counts": ac.hist2d.astype(int).tolist()}
        run.emit(dumps_json(doc))


def cmd_hup(run: Run) -> None:
    args = run.args
    if (args.dt_ps is None) == (args.dt_s is None):
        raise UsageError("give exactly one of --dt-ps and --dt-s")
    dt_s = args.dt_s if args.dt_s is not None else args.dt_ps * 1e-12
    res = hup_benchmark(args.lambda_nm, args.dlambda_nm, dt_s)
    _result(run, res.to_dict())


def cmd_model_sweep(run: Run) -> None:
    args = run.args
    if args.omega_p is not None:
        omega_p = args.omega_p
    else:
        omega_p = 2 * math.pi * C_NM_PER_S / args.pump_nm
    BiphotonParams(omega_p, 0.0, 1.0)  # validates omega_p
    rows = sweep(omega_p, args.pump_widths, args.filter_widths, numeric=not args.no_numeric)
    if _fmt(args, "csv") == "csv":
        run.emit(rows_csv(rows, SWEEP_COLUMNS))
    else:
        run.emit(dumps_json({"omega_p": omega_p, "rows": rows}))


def cmd_bench(run: Run) -> None:
    from .bench import make_bench_file, run_bench
    args = run.args
    path = args.input
    made = False
    if path is None:
        tmp = tempfile.mkdtemp(prefix="spadspec-bench-")
        path = os.path.join(tmp, "bench.pspd")
        make_bench_file(path, args.records, seed=args.seed)
        made = True
    try:
        res = run_bench(path, (args.window_ns or 20.0) * 1e3)
    finally:
        if made:
            shutil.rmtree(os.path.dirname(path), ignore_errors=True)
    res["target_hits_per_s"] = 8.0e6
    res["meets_target"] = res["hits_per_s"] >= 8.0e6
    _result(run, res)


def _strip_manifest_flag(argv: list[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--manifest":
            skip = True
        elif not a.startswith("--manifest="):
            out.append(a)
    return out


def cmd_rerun(run: Run) -> None:
    args = run.args
    with open(args.manifest_path) as f:
        man = json.load(f)
    if man.get("schema") != MANIFEST_SCHEMA:
        raise ConfigurationError(f"{args.manifest_path} is not a run manifest")
    old_cwd = os.getcwd()
    os.chdir(man["cwd"])
    tmp = tempfile.mkdtemp(prefix="spadspec-rerun-")
    try:
        for p, digest in man["inputs"].items():
            if sha256_file(p) != digest:
                raise ConfigurationError(f"input {p} changed since the recorded run")
        argv = _strip_manifest_flag(man["argv"])
        primary = man["primary_output"]
        new_primary = None
        if primary is not None:
            new_primary = os.path.join(tmp, os.path.basename(primary))
            argv = [new_primary if a == primary else
                    f"--output={new_primary}" if a == f"--output={primary}" else a
                    for a in argv]
        captured = io.StringIO()
        code = main(argv, _stdout=captured)
        if code != 0:
            raise ConfigurationError(f"replayed run exited with status {code}")
        report = {}
        for key, digest in man["outputs"].items():
            if key == "<stdout>":
                new = _sha256_text(captured.getvalue())
                name = key
            else:
                new = sha256_file(new_primary + key)
                name = primary + key
            report[name] = {"recorded": digest, "replayed": new, "identical": new == digest}
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
        os.chdir(old_cwd)
    ok = all(v["identical"] for v in report.values())
    run.print(dumps_json({"reproduced": ok, "outputs": report}))
    if not ok:
        raise ConfigurationError("replayed outputs differ from the manifest")


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--input", help="input raw file")
    common.add_argument("--output", help="output path (default: stdout)")
    common.add_argument("--config", help="JSON file of option values or a simulation scenario")
    common.add_argument("--seed", type=_u64, default=0, help="RNG seed (unsigned 64-bit)")
    common.add_argument("--window-ns", type=float, help="time window in ns")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")

    p = _Parser(prog="spadspec", description="SPAD line-spectrometer simulation and analysis")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="generate a raw hit file")
    s.add_argument("--cycles", type=int, help="number of acquisition cycles")
    s.add_argument("--no-truth", action="store_true", help="skip the truth CSV")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate-tdc", parents=[common], help="code density TDC calibration")
    s.add_argument("--calibration", help="existing calibration to extend")
    s.add_argument("--min-counts", type=int, default=MIN_COUNTS_PER_TDC)
    s.set_defaults(func=cmd_calibrate_tdc)

    s = sub.add_parser("calibrate-offset", parents=[common], help="per-pixel offsets from a laser")
    s.add_argument("--calibration", help="calibration with TDC widths to apply first")
    s.add_argument("--min-count", type=int, default=MIN_PAIR_COUNT)
    s.set_defaults(func=cmd_calibrate_offset)

    s = sub.add_parser("spectrum", parents=[common], help="per-pixel spectrum and line fits")
    s.add_argument("--fit", action="store_true", help="fit every located peak")
    s.add_argument("--half-width", type=float, default=3.0, help="fit half width in pixels")
    s.add_argument("--min-counts", type=float, default=100)
    s.add_argument("--lines", help="'argon', a file, or comma-separated reference lines (nm)")
    s.add_argument("--guess", type=_pair, help="provisional dispersion A,B in nm and nm/pixel")
    s.add_argument("--tolerance-nm", type=float, default=0.3)
    s.add_argument("--calibration", help="calibration to extend with the spectral fit")
    s.set_defaults(func=cmd_spectrum)

    for name, func, helptext in (("coincidence", cmd_coincidence, "coincidence histogram"),
                                 ("anticorr", cmd_anticorr, "signal/idler anti-correlation")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--calibration")
        s.add_argument("--group-a", default="0-127", help="pixel set, e.g. 0-127")
        s.add_argument("--group-b", default="128-255")
        s.add_argument("--bin-ps", type=float, help="histogram bin width (default 1 LSB)")
        s.set_defaults(func=func)
        if name == "coincidence":
            s.add_argument("--fit", action="store_true", help="fit the coincidence peak")
            s.add_argument("--fit-half-width-ps", type=float, default=1000.0)
            s.add_argument("--pairs", action="store_true", help="also write <output>.pairs.csv")
        else:
            s.add_argument("--pump-nm", type=float, help="pump wavelength (required)")
            s.add_argument("--dispersion", type=_pair, help="A,B in nm and nm/pixel")
            s.add_argument("--dt-center-ns", type=float, help="default: histogram maximum")
            s.add_argument("--dt-half-width-ns", type=float, default=0.3)

    s = sub.add_parser("hup", parents=[common], help="time-energy uncertainty benchmark")
    s.add_argument("--lambda-nm", type=float, help="(required)")
    s.add_argument("--dlambda-nm", type=float, help="(required)")
    s.add_argument("--dt-ps", type=float)
    s.add_argument("--dt-s", type=float)
    s.set_defaults(func=cmd_hup)

    s = sub.add_parser("model-sweep", parents=[common], help="biphoton model over a width grid")
    s.add_argument("--pump-nm", type=float, default=405.0)
    s.add_argument("--omega-p", type=float, help="pump angular frequency (rad/s)")
    s.add_argument("--pump-widths", type=_floats, default=[0.0, 1e11, 1e12, 1e13],
                   help="comma-separated pump widths (rad/s)")
    s.add_argument("--filter-widths", type=_floats, default=[1e11, 1e12, 1e13],
                   help="comma-separated filter widths (rad/s)")
    s.add_argument("--no-numeric", action="store_true", help="skip the Fourier oracle")
    s.set_defaults(func=cmd_model_sweep)

    s = sub.add_parser("bench", parents=[common], help="read + coincidence throughput")
    s.add_argument("--records", type=int, default=100_000_000,
                   help="records in the generated file when --input is absent")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("rerun", help="replay a run manifest and compare outputs")
    s.add_argument("manifest_path")
    s.set_defaults(func=cmd_rerun, output=None, seed=None, config=None, manifest=None)
    return p


# checked after --config is merged, so a config file can supply them
REQUIRED = {"hup": ("lambda_nm", "dlambda_nm"), "anticorr": ("pump_nm",)}


def _check_required(parser: argparse.ArgumentParser, args) -> None:
    missing = [d for d in REQUIRED.get(args.command, ()) if getattr(args, d) is None]
    if missing:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        raise UsageError("the following arguments are required: "
                         + ", ".join("--" + d.replace("_", "-") for d in missing))


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], args):
    """Reparse with option defaults taken from ``--config``; the rest is kept."""
    args.config_data = {}
    if not getattr(args, "config", None):
        return args
    with open(args.config) as f:
        try:
            data = json.load(f)
        except ValueError as exc:
            raise ConfigurationError(f"{args.config}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{args.config}: expected a JSON object")
    dests = set(vars(args))
    opts = {k.replace("-", "_"): v for k, v in data.items() if k.replace("-", "_") in dests}
    rest = {k: v for k, v in data.items() if k.replace("-", "_") not in dests}
    if rest and args.command != "simulate":
        raise UsageError(f"unknown config keys for {args.command}: {sorted(rest)}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**opts)
    args = parser.parse_args(argv)
    args.config_data = rest
    return args


def main(argv: list[str] | None = None, _stdout=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    saved = sys.stdout
    if _stdout is not None:
        sys.stdout = _stdout
    try:
        try:
            args = parser.parse_args(argv)
        except UsageError as exc:
            print(exc, file=sys.stderr)
            return 2
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        try:
            args = _apply_config(parser, argv, args)
            _check_required(parser, args)
            run = Run(args)
            args.func(run)
            if args.command != "rerun" and (args.manifest or args.output):
                write_manifest(run, argv, args.manifest or args.output + ".manifest.json")
        except UsageError as exc:
            print(f"spadspec {argv[0] if argv else ''}: error: {exc}", file=sys.stderr)
            return 2
        except (SpadSpecError, OSError) as exc:
            print(f"spadspec {argv[0] if argv else ''}: error: {exc}", file=sys.stderr)
            return 1
        return 0
    finally:
        sys.stdout = saved


if __name__ == "__main__":
    sys.exit(main())
