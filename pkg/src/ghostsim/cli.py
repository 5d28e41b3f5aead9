"""Command line entry point: ``ghostsim <scenario> --config FILE``.

Every run writes CSV data with a ``#`` header block (tool version, scenario,
seed and the normalised configuration) and a standalone JSON manifest that
also records the thread count and wall time. Failures print one JSON line on
stderr and exit with 2 (configuration), 3 (numerical or geometric) or 4
(insufficient statistics).
"""

import argparse
import json
import math
import os
import sys
import time
import warnings
from importlib import metadata

import numpy as np

from . import config as cfgmod
from . import correlation as corr
from .correlation import tac_histogram
from .detection import (PhotonStream, read_photon_stream, sample_photons,
                        synthesize_intensity_trace)
from .errors import ConfigError, GhostSimError
from .field import Grid1D, SourceSpec, frame_block
from .optics import check_lens_equation, propagate, propagate_array
from .rng import keyed_generator
from .scenarios import (JITTER_GUARD_SIGMAS, analyse_histogram, ideal_ghost_curve,
                        predicted_magnification, run_ghost, run_hbt)

TOOL = "ghostsim"


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.1.0"


class _Run:
    """Output bookkeeping for one invocation."""

    def __init__(self, scenario, rc, out_prefix, config_path):
        self.scenario = scenario
        self.rc = rc
        self.out = out_prefix
        self.config_path = config_path
        self.files = []
        self.results = {}
        self.started = time.perf_counter()

    def header(self):
        lines = [f"{TOOL} {tool_version()}", f"scenario = {self.scenario}", f"seed = {self.rc.seed}"]
        lines.append("config:")
        lines.extend("  " + ln for ln in cfgmod.format_config(self.rc, include_run=False).splitlines()
                     if ln)
        return lines

    def path(self, suffix, record=True):
        p = f"{self.out}_{suffix}"
        directory = os.path.dirname(p)
        if directory:
            os.makedirs(directory, exist_ok=True)
        if record:
            self.files.append(p)
        return p

    def write_manifest(self):
        manifest = {
            "tool": TOOL, "version": tool_version(), "scenario": self.scenario,
            "seed": self.rc.seed, "threads": self.rc.threads,
            "config_file": self.config_path,
            "config": cfgmod.format_config(self.rc),
            "outputs": list(self.files),
            "results": self.results,
            "wall_time_s": round(time.perf_counter() - self.started, 3),
        }
        with open(self.path("manifest.json", record=False), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


class _TagWriter:
    """Writes jittered segment timestamps in ascending order across segments."""

    def __init__(self, paths, margin, duration, seed):
        self.files = [open(p, "w") for p in paths]
        self.margin = margin
        self.pending = [np.empty(0), np.empty(0)]
        for fh in self.files:
            fh.write(f"# duration_s = {duration!r}\n# seed = {seed}\n")

    def __call__(self, k, starts, stops, segment_end):
        cut = segment_end - self.margin
        for c, times in enumerate((starts, stops)):
            merged = np.sort(np.concatenate([self.pending[c], times]))
            n = int(np.searchsorted(merged, cut))
            self._write(c, merged[:n])
            self.pending[c] = merged[n:]

    def _write(self, c, times):
        self.files[c].write("".join(f"{t!r}\n" for t in times.tolist()))

    def close(self):
        for c, fh in enumerate(self.files):
            self._write(c, self.pending[c])
            fh.close()


def _hbt_summary(res):
    fit = res.fit
    return {
        "fwhm_ns": fit.fwhm * 1e9 if fit else None,
        "fwhm_err_ns": fit.fwhm_err * 1e9 if fit else None,
        "fit_center_ns": fit.center * 1e9 if fit else None,
        "fit_residual_norm": fit.residual_norm if fit else None,
        "g2_zero": res.g2_zero.value,
        "g2_zero_err": res.g2_zero.std_error,
        "coherence_time_ns": res.coherence_time * 1e9 if res.coherence_time else None,
        "coincidences": res.coincidences,
        "starts": res.histogram.n_starts,
        "singles": list(res.singles),
        "integration_time_s": res.integration_time,
    }


def _resolve(path, config_path):
    if os.path.isabs(path) or config_path is None:
        return path
    return os.path.join(os.path.dirname(os.path.abspath(config_path)), path)


def cmd_hbt(run: _Run):
    rc = run.rc
    if rc.has("tags"):
        tags = rc.section("tags")
        tac = rc.section("tac")
        try:
            streams = []
            for key in ("start_file", "stop_file"):
                with open(_resolve(tags[key], run.config_path)) as fh:
                    streams.append(read_photon_stream(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read time tags: {exc}", key="tags") from None
        h = tac_histogram(streams[0], streams[1], (tac["range_min"], tac["range_max"]),
                          tac["bin_width"], tac["mode"])
        res = analyse_histogram(h, tac["peak_halfwidth"], tac["baseline_exclusion"],
                                center=tac["stop_delay"],
                                lineshape=rc.section("hbt")["lineshape"],
                                singles=(len(streams[0]), len(streams[1])),
                                integration_time=max(streams[0].duration, streams[1].duration))
    else:
        hc = cfgmod.hbt_config(rc)
        writer = None
        if rc.section("hbt")["save_tags"]:
            sigma = max(d.jitter_fwhm for d in hc.detectors) / corr.FWHM_PER_SIGMA
            margin = JITTER_GUARD_SIGMAS * sigma + abs(hc.stop_delay)
            writer = _TagWriter([run.path("start.txt"), run.path("stop.txt")], margin,
                                hc.integration_time, hc.master_seed)

        def on_segment(k, starts, stops):
            if writer is not None:
                end = min(hc.integration_time, (k + 1) * hc.segment_duration)
                writer(k, starts, stops, end)

        try:
            res = run_hbt(hc, rc.threads, on_segment)
        finally:
            if writer is not None:
                writer.close()
    with open(run.path("histogram.csv"), "w") as fh:
        res.histogram.write_csv(fh, run.header())
    run.results = _hbt_summary(res)
    return run.results


def cmd_ghost(run: _Run):
    gc = cfgmod.ghost_config(run.rc)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        scan = run_ghost(gc, run.rc.threads)
    for w in caught:
        print(json.dumps({"warning": str(w.message)}), file=sys.stderr)
    with open(run.path("scan.csv"), "w") as fh:
        scan.write_csv(fh, run.header())
    run.results = {
        "visibility": scan.visibility,
        "peak_positions_mm": [p * 1e3 for p in scan.peak_positions],
        "temporal_modes": scan.temporal_modes,
        "frames": scan.n_frames,
        "magnification": predicted_magnification(gc.geometry),
    }
    return run.results


def cmd_check_lens(run: _Run):
    geom = cfgmod.bench_geometry(run.rc)
    report = check_lens_equation(geom, run.rc.section("geometry")["tolerance"])
    run.results = {
        "residual_per_m": report.residual,
        "scaled_residual": report.scaled_residual,
        "tolerance": report.tolerance,
        "satisfied": report.satisfied,
        "magnification": report.magnification,
        "infinite_conjugate": report.infinite_conjugate,
    }
    return run.results


def cmd_ideal_curve(run: _Run):
    geom, mask, n, det, width, positions = cfgmod.ideal_inputs(run.rc)
    values = ideal_ghost_curve(geom, mask, n, det, width, positions)
    with open(run.path("ideal.csv"), "w") as fh:
        for line in run.header():
            fh.write(f"# {line}\n")
        fh.write("position_mm,value\n")
        for x, v in zip(positions, values):
            fh.write(f"{x * 1e3:.6f},{v:.12g}\n")
    run.results = {"visibility": corr.visibility(values), "n_features": n,
                   "coherence_width_mm": width * 1e3}
    return run.results


# -- self test ---------------------------------------------------------------------

def _check_gaussian_beam():
    lam, w0, z = 780e-9, 0.2e-3, 0.5
    grid = Grid1D(4096, 10e-6)
    from .field import SampledField
    beam = SampledField(grid, np.exp(-(grid.x / w0) ** 2), lam)
    out = propagate(beam, z)
    p = out.intensity
    width = 2 * math.sqrt(np.sum(grid.x ** 2 * p) / np.sum(p))
    expected = w0 * math.sqrt(1 + (z * lam / (math.pi * w0 ** 2)) ** 2)
    rel = abs(width / expected - 1)
    return rel < 1e-3, f"width {width * 1e3:.6f} mm vs {expected * 1e3:.6f} mm (rel {rel:.1e})"


def _check_exponential_moments():
    gen = keyed_generator(1, "selftest-exponential")
    i = gen.exponential(size=100_000)
    est = corr.g2_from_pairs(np.column_stack([i, i]))
    ok = abs(est.value - 2) < 5 * est.std_error
    return ok, f"g2 = {est.value:.4f} +- {est.std_error:.4f} (expected 2)"


def _check_poisson_counts():
    rate, duration = 1e5, 1e-3
    from .detection import IntensityTrace
    trace = IntensityTrace(1e-7, np.full(int(round(duration / 1e-7)), rate))
    counts = np.array([len(sample_photons(trace, 1.0, 7, index=k)) for k in range(100)])
    expected = rate * duration
    z = (counts.mean() - expected) / math.sqrt(expected / len(counts))
    return abs(z) < 3, f"mean count {counts.mean():.2f} vs {expected:.0f} ({z:+.2f} sigma)"


def _check_siegert():
    source = SourceSpec(1e-3, 780e-9, 0.2e-9, 1.0)
    grid = Grid1D(4096, 10e-6)
    frames = frame_block(source, grid, 3, 0, 4000)
    far = np.abs(propagate_array(frames, grid.pitch, source.wavelength, 0.5)) ** 2
    picks = np.arange(grid.n_points // 2 - 200, grid.n_points // 2 + 200, 40)
    values = [corr.g2_from_pairs(np.column_stack([far[:, p], far[:, p]])) for p in picks]
    mean = float(np.mean([v.value for v in values]))
    err = float(np.sqrt(np.sum([v.std_error ** 2 for v in values]))) / len(values)
    return abs(mean - 2) < 5 * err + 0.02, f"pooled g2 = {mean:.4f} +- {err:.4f} (expected 2)"


SELFTESTS = (
    ("gaussian-beam", _check_gaussian_beam),
    ("exponential-moments", _check_exponential_moments),
    ("poisson-counts", _check_poisson_counts),
    ("siegert", _check_siegert),
)


def cmd_selftest(run: _Run):
    results = {}
    for name, check in SELFTESTS:
        ok, detail = check()
        results[name] = {"pass": bool(ok), "detail": detail}
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    run.results = results
    if not all(r["pass"] for r in results.values()):
        raise GhostSimError("self test failed: " +
                            ", ".join(k for k, r in results.items() if not r["pass"]))
    return results


COMMANDS = {
    "hbt": cmd_hbt,
    "ghost": cmd_ghost,
    "check-lens": cmd_check_lens,
    "ideal-curve": cmd_ideal_curve,
    "selftest": cmd_selftest,
}
WRITES_DATA = ("hbt", "ghost", "ideal-curve")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"command line: {message}")


def build_parser():
    parser = _Parser(prog=TOOL, description="Thermal-light ghost imaging and "
                                     "HBT simulator.")
    parser.add_argument("scenario", choices=list(COMMANDS))
    parser.add_argument("--config", help="configuration file")
    parser.add_argument("--seed", type=int, help="master seed (overrides the file)")
    parser.add_argument("--out", help="output path prefix")
    parser.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    return parser


def _fail(exc, scenario, code):
    record = {"error": type(exc).__name__, "exit_code": code, "scenario": scenario,
              "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        return _fail(exc, None, exc.exit_code)
    scenario = args.scenario
    try:
        if args.config is not None:
            try:
                with open(args.config, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
        elif scenario == "selftest":
            text = ""
        else:
            raise ConfigError(f"scenario '{scenario}' needs --config")
        rc = cfgmod.parse_config(text)
        if rc.scenario is not None and rc.scenario != scenario:
            raise ConfigError(f"config is for scenario '{rc.scenario}', not '{scenario}'",
                              line=rc.line_of("run", "scenario"), key="run.scenario")
        if args.seed is not None:
            rc.seed = args.seed
        if args.threads is not None:
            rc.threads = args.threads
        if rc.threads < 1:
            raise ConfigError("threads must be >= 1", key="run.threads")
        out = args.out if args.out is not None else f"{TOOL}-{scenario}"
        run = _Run(scenario, rc, out, args.config)
        results = COMMANDS[scenario](run)
        if scenario in WRITES_DATA or args.out is not None:
            run.write_manifest()
        print(json.dumps({"scenario": scenario, "results": results}, default=_jsonable))
        return 0
    except GhostSimError as exc:
        return _fail(exc, scenario, exc.exit_code)
    except OSError as exc:
        return _fail(exc, scenario, 2)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(exc, scenario, 3)


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"cannot serialise {type(value).__name__}")


if __name__ == "__main__":
    sys.exit(main())
