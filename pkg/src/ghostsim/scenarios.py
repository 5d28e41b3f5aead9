"""The two experiments end to end: HBT photon bunching and the ghost-image scan.

The HBT run is a time-domain simulation of photon detections, timing jitter
and the TAC/MCA chain. The ghost scan is a spatial frame-ensemble
simulation; the temporal averaging that the real coincidence window performs
over many coherence times is applied afterwards as a dilution of the
correlation excess by ``temporal_modes``.
"""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import find_peaks

from . import correlation as corr
from .correlation import (CoincidenceHistogram, G2Accumulator, G2Estimate, GaussianFit,
                          PairStats, TacConverter)
from .detection import (DetectorSpec, PhotonStream, add_dark_counts, aperture_selection,
                        apply_jitter, sample_photons, synthesize_intensity_trace,
                        thermal_photon_streams, _dead_time_carry)
from .errors import DegenerateGeometryError, InvalidArgumentError, NoPeakError
from .field import Grid1D, SourceSpec, frame_block, source_support
from .optics import (BenchGeometry, MaskSpec, check_lens_equation, check_sampling, lens_phase,
                     propagate_array)

FWHM_PER_SIGMA = corr.FWHM_PER_SIGMA

# Gaussian jitter is unbounded; events are assumed to move by less than this
# many standard deviations (probability about 1.5e-23 per event)
JITTER_GUARD_SIGMAS = 10.0

GHOST_BLOCK = 100


# -- HBT ------------------------------------------------------------------------

@dataclass(frozen=True)
class HbtConfig:
    """Two detectors behind a 50/50 beamsplitter feeding a TAC.

    Each detector sees half of ``source.mean_rate`` times its efficiency.
    ``shared_intensity=False`` gives each detector its own independent
    intensity history (two unrelated sources). ``route`` chooses the
    event-driven sampler (``"events"``) or the explicit intensity trace
    (``"trace"``, only practical for short runs). ``stop_delay`` is a cable
    delay added to every stop.
    """

    source: SourceSpec
    detectors: Tuple[DetectorSpec, DetectorSpec]
    tau_range: Tuple[float, float] = (-10e-9, 10e-9)
    bin_width: float = 0.05e-9
    integration_time: float = 1.0
    master_seed: int = 0
    segment_duration: float = 5.0
    tac_mode: str = "first-stop"
    peak_halfwidth: float = 0.25e-9
    baseline_exclusion: float = 5e-9
    stop_delay: float = 0.0
    shared_intensity: bool = True
    route: str = "events"
    dark_rate: float = 0.0
    dead_time: float = 0.0
    lineshape: str = "lorentzian"

    def __post_init__(self):
        if len(self.detectors) != 2:
            raise InvalidArgumentError("HBT needs exactly two detectors")
        if not self.integration_time >= 1e4 * self.source.coherence_time * (1 - 1e-12):
            raise InvalidArgumentError(
                "integration time must be at least 10^4 coherence times")
        if not self.segment_duration > 0:
            raise InvalidArgumentError("segment_duration must be positive")
        if not (self.bin_width > 0 and self.tau_range[0] < self.tau_range[1]):
            raise InvalidArgumentError("TAC needs bin_width > 0 and tau_min < tau_max")
        if self.tac_mode not in corr.TAC_MODES:
            raise InvalidArgumentError(f"tac_mode must be one of {corr.TAC_MODES}")
        if self.route not in ("events", "trace"):
            raise InvalidArgumentError("route must be 'events' or 'trace'")
        if self.lineshape not in corr.LINESHAPES:
            raise InvalidArgumentError(f"lineshape must be one of {corr.LINESHAPES}")
        if not (self.dark_rate >= 0 and self.dead_time >= 0):
            raise InvalidArgumentError("dark_rate and dead_time must be >= 0")

    @property
    def singles_rates(self) -> Tuple[float, float]:
        half = self.source.mean_rate / 2
        return tuple(half * d.efficiency for d in self.detectors)

    @property
    def combined_jitter(self) -> float:
        return math.hypot(self.detectors[0].jitter_fwhm, self.detectors[1].jitter_fwhm)

    @property
    def n_segments(self) -> int:
        return max(1, int(math.ceil(self.integration_time / self.segment_duration - 1e-9)))


@dataclass(frozen=True)
class HbtResult:
    histogram: CoincidenceHistogram
    fit: Optional[GaussianFit]
    g2_zero: G2Estimate
    coherence_time: Optional[float]
    singles: Tuple[int, int]
    integration_time: float

    @property
    def coincidences(self) -> int:
        return self.histogram.total


# trace-route segments are split so that one trace stays below this many samples
_TRACE_SAMPLES = 1 << 22


def _segment_bounds(cfg: HbtConfig, k: int) -> Tuple[float, float]:
    start = k * cfg.segment_duration
    return start, min(cfg.integration_time, start + cfg.segment_duration)


def _raw_segment(cfg: HbtConfig, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Jitter-free detections of both channels in segment ``k``, relative to its start."""
    start, stop = _segment_bounds(cfg, k)
    duration = stop - start
    tau = cfg.source.coherence_time
    if cfg.route == "events":
        streams = thermal_photon_streams(tau, cfg.singles_rates, duration, cfg.master_seed,
                                         index=k, shared=cfg.shared_intensity)
        return streams[0].timestamps, streams[1].timestamps
    dt = tau / 10
    n_pieces = max(1, int(math.ceil(duration / dt / _TRACE_SAMPLES)))
    piece = duration / n_pieces
    out = ([], [])
    for p in range(n_pieces):
        index = k * n_pieces + p
        if cfg.shared_intensity:
            trace = synthesize_intensity_trace(tau, cfg.source.mean_rate / 2, piece, dt,
                                               cfg.master_seed, index)
            traces = (trace, trace)
        else:
            traces = tuple(synthesize_intensity_trace(tau, cfg.source.mean_rate / 2, piece, dt,
                                                      cfg.master_seed, index, channel=c)
                           for c in (0, 1))
        for c, det in enumerate(cfg.detectors):
            stream = sample_photons(traces[c], det.efficiency, cfg.master_seed, index, channel=c)
            out[c].append(stream.timestamps + p * piece)
    return np.concatenate(out[0]), np.concatenate(out[1])


def _detected_segment(cfg: HbtConfig, k: int):
    start, stop = _segment_bounds(cfg, k)
    raw = _raw_segment(cfg, k)
    result = []
    for c, det in enumerate(cfg.detectors):
        stream = PhotonStream(raw[c], stop - start)
        stream = add_dark_counts(stream, cfg.dark_rate, cfg.master_seed, k, channel=c)
        result.append(stream)
    return result


def hbt_streams(cfg: HbtConfig, threads: int = 1):
    """Yield ``(segment, starts, stops)`` with absolute, jittered timestamps.

    Segments are generated concurrently by up to ``threads`` workers but
    always yielded in order; each is a pure function of the seed and its
    index. Dead time is applied across segment boundaries.
    """
    if threads < 1:
        raise InvalidArgumentError("threads must be >= 1")
    last = [-math.inf, -math.inf]
    indices = range(cfg.n_segments)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for first in range(0, cfg.n_segments, threads):
            batch = list(pool.map(lambda k: _detected_segment(cfg, k),
                                  indices[first:first + threads]))
            for k, streams in zip(indices[first:first + threads], batch):
                start, _ = _segment_bounds(cfg, k)
                out = []
                for c, (stream, det) in enumerate(zip(streams, cfg.detectors)):
                    times = stream.timestamps + start
                    if cfg.dead_time > 0:
                        keep, last[c] = _dead_time_carry(times, cfg.dead_time, last[c])
                        times = times[keep]
                    jittered = apply_jitter(PhotonStream(times, stream.duration),
                                            det.jitter_fwhm, cfg.master_seed, k, channel=c)
                    out.append(jittered.timestamps)
                yield k, out[0], out[1] + cfg.stop_delay


def run_hbt(cfg: HbtConfig, threads: int = 1, on_segment=None) -> HbtResult:
    """Simulate the HBT measurement and analyse the coincidence histogram.

    The fit is ``None`` when the histogram shows no significant peak. The
    coherence time is inverted from the measured zero-delay excess using the
    fitted FWHM as the combined jitter; it is ``None`` without a fit or when
    the excess is not positive. ``on_segment(k, starts, stops)`` is called for
    every segment, for example to write time tags.
    """
    tac = TacConverter(cfg.tau_range, cfg.bin_width, cfg.tac_mode)
    sigma = max(d.jitter_fwhm for d in cfg.detectors) / FWHM_PER_SIGMA
    margin = JITTER_GUARD_SIGMAS * sigma + max(0.0, -cfg.stop_delay)
    singles = [0, 0]
    for k, starts, stops in hbt_streams(cfg, threads):
        if on_segment is not None:
            on_segment(k, starts, stops)
        singles[0] += len(starts)
        singles[1] += len(stops)
        _, end = _segment_bounds(cfg, k)
        tac.feed(starts, stops, end - margin)
    return analyse_histogram(tac.finish(), cfg.peak_halfwidth, cfg.baseline_exclusion,
                             cfg.stop_delay, cfg.lineshape, tuple(singles),
                             cfg.integration_time)


def analyse_histogram(h: CoincidenceHistogram, peak_halfwidth: float = 0.25e-9,
                      baseline_exclusion: float = 5e-9, center: float = 0.0,
                      lineshape: str = "lorentzian", singles=(0, 0),
                      integration_time: float = 0.0) -> HbtResult:
    """Fit, zero-delay g2 and coherence time for a coincidence histogram."""
    try:
        fit = corr.fit_gaussian_peak(h)
    except NoPeakError:
        fit = None
    g2 = corr.g2_zero_from_histogram(h, peak_halfwidth, baseline_exclusion, center)
    tau0 = None
    if fit is not None and g2.value > 1:
        try:
            tau0 = corr.coherence_time_from_excess(g2.value - 1, fit.fwhm, lineshape)
        except InvalidArgumentError:
            tau0 = None
    return HbtResult(h, fit, g2, tau0, tuple(int(s) for s in singles), integration_time)


# -- ghost imaging -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GhostConfig:
    """Ghost-imaging bench: arm A images the mask onto a bucket, arm B is scanned.

    ``reference`` gives the scanned detector's aperture and efficiency (its
    ``center`` is ignored). ``bucket`` optionally restricts the bucket's
    collection; by default it collects everything behind the mask.
    ``lens_aperture`` is the clear diameter of the imaging lens; by default
    the widest aperture over which the lens phase is still sampled without
    aliasing, ``wavelength * f / pitch``.
    """

    source: SourceSpec
    geometry: BenchGeometry
    mask: MaskSpec
    reference: DetectorSpec
    positions: Tuple[float, ...]
    frames_per_position: int = 2000
    temporal_modes: float = 1.0
    master_seed: int = 0
    grid: Grid1D = field(default_factory=lambda: Grid1D(8192, 10e-6))
    lens_aperture: Optional[float] = None
    bucket: Optional[DetectorSpec] = None
    bucket_efficiency: float = 1.0
    lens_tolerance: float = 0.01

    def __post_init__(self):
        positions = tuple(float(p) for p in self.positions)
        object.__setattr__(self, "positions", positions)
        if len(positions) < 1:
            raise InvalidArgumentError("need at least one scan position")
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise InvalidArgumentError("scan positions must be strictly increasing")
        if int(self.frames_per_position) != self.frames_per_position or \
                self.frames_per_position < 100:
            raise InvalidArgumentError("frames_per_position must be an integer >= 100")
        if not self.temporal_modes >= 1:
            raise InvalidArgumentError("temporal_modes must be >= 1")
        if self.lens_aperture is not None and not self.lens_aperture > 0:
            raise InvalidArgumentError("lens_aperture must be positive")
        if not 0 < self.bucket_efficiency <= 1:
            raise InvalidArgumentError("bucket_efficiency must lie in (0, 1]")

    @property
    def effective_lens_aperture(self) -> float:
        if self.lens_aperture is not None:
            return self.lens_aperture
        return self.source.wavelength * self.geometry.f / self.grid.pitch


@dataclass(frozen=True, eq=False)
class GhostScan:
    """Scan result. ``g2`` is diluted by ``temporal_modes``; ``raw_g2`` is not."""

    positions: np.ndarray
    g2: List[G2Estimate]
    raw_g2: List[G2Estimate]
    visibility: float
    peak_positions: np.ndarray
    temporal_modes: float
    n_frames: int

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.g2])

    @property
    def errors(self) -> np.ndarray:
        return np.array([e.std_error for e in self.g2])

    def write_csv(self, fh, header: Sequence[str] = ()):
        for line in header:
            fh.write(f"# {line}\n")
        fh.write("position_mm,g2,g2_err\n")
        for x, e in zip(self.positions, self.g2):
            fh.write(f"{x * 1e3:.6f},{e.value:.12g},{e.std_error:.6g}\n")


class _GhostPlan:
    """Everything per-frame work needs, precomputed once."""

    def __init__(self, cfg: GhostConfig):
        grid, geom, lam = cfg.grid, cfg.geometry, cfg.source.wavelength
        for z in (geom.z1, geom.z2, geom.z3):
            check_sampling(grid, lam, z)
        source_support(cfg.source, grid)
        x = grid.x
        self.cfg = cfg
        self.lens = lens_phase(x, lam, geom.f)
        self.lens[np.abs(x) > cfg.effective_lens_aperture / 2 + 1e-12] = 0
        self.mask = cfg.mask(x)
        if cfg.bucket is None:
            self.bucket = np.full(grid.n_points, cfg.bucket_efficiency)
        else:
            sel = aperture_selection(grid, cfg.bucket)
            self.bucket = sel * (cfg.bucket.efficiency * cfg.bucket_efficiency)
        rows = []
        for p in cfg.positions:
            det = replace(cfg.reference, center=p)
            rows.append(aperture_selection(grid, det) * det.efficiency)
        self.reference = np.array(rows).T

    def block(self, start: int, count: int) -> PairStats:
        cfg, grid = self.cfg, self.cfg.grid
        lam, geom, pitch = cfg.source.wavelength, cfg.geometry, grid.pitch
        amp = frame_block(cfg.source, grid, cfg.master_seed, start, count) * math.sqrt(0.5)
        arm_a = propagate_array(amp, pitch, lam, geom.z2) * self.lens
        arm_a = propagate_array(arm_a, pitch, lam, geom.z3) * self.mask
        bucket = (np.abs(arm_a) ** 2 @ self.bucket) * pitch
        arm_b = propagate_array(amp, pitch, lam, geom.z1)
        reference = (np.abs(arm_b) ** 2 @ self.reference) * pitch
        return PairStats.from_samples(bucket, reference)


def ghost_accumulate(cfg: GhostConfig, threads: int = 1) -> G2Accumulator:
    """Frame-block statistics for the whole ensemble, keyed by block index."""
    if threads < 1:
        raise InvalidArgumentError("threads must be >= 1")
    plan = _GhostPlan(cfg)
    n = cfg.frames_per_position
    starts = list(range(0, n, GHOST_BLOCK))
    acc = G2Accumulator()

    def work(k):
        return plan.block(starts[k], min(GHOST_BLOCK, n - starts[k]))

    if threads == 1:
        for k in range(len(starts)):
            acc.add(k, work(k))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for k, stats in enumerate(pool.map(work, range(len(starts)))):
                acc.add(k, stats)
    return acc


def run_ghost(cfg: GhostConfig, threads: int = 1) -> GhostScan:
    """Monte Carlo ghost-image scan.

    Warns (``UserWarning``) when the bench violates the lens equation by more
    than ``cfg.lens_tolerance``. The raw excess ``g2 - 1`` is divided by
    ``temporal_modes`` before visibility and peaks are extracted.
    """
    report = check_lens_equation(cfg.geometry, cfg.lens_tolerance)
    if not report.satisfied:
        warnings.warn(
            f"bench violates the lens equation: |r f| = {abs(report.scaled_residual):.3g} "
            f"> {cfg.lens_tolerance:g}", UserWarning, stacklevel=2)
    acc = ghost_accumulate(cfg, threads)
    value, err, n = acc.estimate()
    value = np.atleast_1d(value)
    err = np.atleast_1d(err)
    m = cfg.temporal_modes
    diluted = 1 + (value - 1) / m
    diluted_err = err / m
    raw = [G2Estimate(float(max(v, 0.0)), float(e), n) for v, e in zip(value, err)]
    est = [G2Estimate(float(max(v, 0.0)), float(e), n) for v, e in zip(diluted, diluted_err)]
    positions = np.array(cfg.positions)
    vis = corr.visibility(diluted) if len(diluted) >= 2 else 0.0
    peaks = curve_peaks(positions, diluted, diluted_err)
    return GhostScan(positions, est, raw, vis, peaks, m, n)


def curve_peaks(positions, values, errors=None, significance: float = 3.0) -> np.ndarray:
    """Local maxima standing out by ``significance`` errors, refined by a parabola."""
    positions = np.asarray(positions, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(values) < 3:
        return np.empty(0)
    if errors is None:
        prominence = 0.0
    else:
        prominence = significance * float(np.median(np.asarray(errors, dtype=float)))
    idx, _ = find_peaks(values, prominence=max(prominence, 1e-15))
    refined = []
    for i in idx:
        x0, x1, x2 = positions[i - 1:i + 2]
        y0, y1, y2 = values[i - 1:i + 2]
        # vertex of the parabola through three (possibly unevenly spaced) points
        num = (x1 - x0) ** 2 * (y1 - y2) - (x1 - x2) ** 2 * (y1 - y0)
        den = (x1 - x0) * (y1 - y2) - (x1 - x2) * (y1 - y0)
        refined.append(x1 - 0.5 * num / den if den != 0 else x1)
    return np.array(refined)


# -- analytic reference and helpers ----------------------------------------------------

def predicted_magnification(geometry: BenchGeometry) -> float:
    """Image-plane distance per object-plane distance, ``(z1 - z2) / z3``."""
    if geometry.z3 == 0:
        raise DegenerateGeometryError("z3 == 0")
    return (geometry.z1 - geometry.z2) / geometry.z3


def suggested_temporal_modes(coherence_time: float, combined_jitter_fwhm: float,
                             peak_halfwidth: float = 0.25e-9) -> float:
    """``(2 * peak_halfwidth + combined jitter FWHM) / coherence_time``, at least 1."""
    if not coherence_time > 0 or combined_jitter_fwhm < 0 or peak_halfwidth < 0:
        raise InvalidArgumentError("coherence time must be positive, widths non-negative")
    return max(1.0, (2 * peak_halfwidth + combined_jitter_fwhm) / coherence_time)


def ideal_ghost_curve(geometry: BenchGeometry, mask: MaskSpec, n_features: int,
                      detector: Optional[DetectorSpec], coherence_width: float,
                      positions, oversample: int = 64) -> np.ndarray:
    """``N + |T(x2 z3 / (z1 - z2))|^2`` smoothed by the detector and coherence.

    The reference aperture enters as a normalised top-hat of its diameter and
    the coherence as a normalised Gaussian of FWHM ``coherence_width``, both
    measured in the scanned (x2) plane; zero widths (or ``detector=None``)
    skip the corresponding smoothing. The curve keeps background ``N``.
    """
    positions = np.asarray(positions, dtype=float)
    if int(n_features) != n_features or n_features < 1:
        raise InvalidArgumentError("N must be a positive integer")
    if mask.n_features is not None and mask.n_features != n_features:
        raise InvalidArgumentError(
            f"N = {n_features} does not match the mask's {mask.n_features} features")
    if coherence_width < 0:
        raise InvalidArgumentError("coherence_width must be >= 0")
    scale = 1.0 / predicted_magnification(geometry)
    aperture = detector.aperture_diameter if detector is not None else 0.0

    def bare(x2):
        return n_features + mask(x2 * scale) ** 2

    if aperture == 0 and coherence_width == 0:
        return bare(positions)
    # fine grid resolving the narrowest of: smoothing widths, mask features
    widths = [w for w in (aperture, coherence_width) if w > 0]
    step = min(widths) / oversample
    reach = aperture / 2 + 4 * coherence_width + step
    lo, hi = positions.min() - reach, positions.max() + reach
    n = int(math.ceil((hi - lo) / step)) + 1
    x = lo + np.arange(n) * step
    y = bare(x)
    if aperture > 0:
        half = max(1, int(round(aperture / 2 / step)))
        kernel = np.ones(2 * half + 1)
        y = _smooth(y, kernel / kernel.sum())
    if coherence_width > 0:
        sigma = coherence_width / FWHM_PER_SIGMA
        half = int(math.ceil(4 * sigma / step))
        u = np.arange(-half, half + 1) * step
        kernel = np.exp(-0.5 * (u / sigma) ** 2)
        y = _smooth(y, kernel / kernel.sum())
    return np.interp(positions, x, y)


def _smooth(y, kernel):
    half = len(kernel) // 2
    padded = np.concatenate([np.full(half, y[0]), y, np.full(half, y[-1])])
    return np.convolve(padded, kernel, mode="valid")


def image_plane_coherence_width(source: SourceSpec, z1: float) -> float:
    """FWHM of ``|mu|^2`` in the scanned plane for the 1-D strip source."""
    return corr.coherence_width(source.wavelength, z1, source.diameter, "strip")
