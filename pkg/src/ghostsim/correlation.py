"""Correlation estimators, TAC/MCA emulation and peak analysis.

Second-order correlations are accumulated as per-block statistics
``(n, mean1, mean2, C12)`` with ``C12 = sum (I1 - mean1)(I2 - mean2)``. Blocks
merge with the pairwise update of Chan et al., and estimates always merge
blocks in block-index order, so a result does not depend on how the blocks
were distributed over workers.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numba
import numpy as np
from scipy.optimize import brentq, least_squares
from scipy.special import j1

from .errors import (DegenerateDataError, InsufficientBaselineError, InvalidArgumentError,
                     NoPeakError)

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

JACKKNIFE_BLOCK = 100
TAC_MODES = ("first-stop", "all-pairs")


@dataclass(frozen=True)
class G2Estimate:
    value: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if not (self.value >= 0 and self.std_error >= 0):
            raise InvalidArgumentError(
                f"G2Estimate needs value >= 0 and std_error >= 0, got {self.value}, "
                f"{self.std_error}")


# -- block statistics -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PairStats:
    """Moments of a block of intensity pairs.

    ``mean2`` and ``c12`` may be arrays when one first intensity (a bucket)
    is paired with several second intensities (scan positions).
    """

    n: int
    mean1: float
    mean2: np.ndarray
    c12: np.ndarray

    @classmethod
    def from_samples(cls, i1, i2) -> "PairStats":
        i1 = np.asarray(i1, dtype=float)
        i2 = np.asarray(i2, dtype=float)
        if len(i1) == 0 or len(i1) != len(i2):
            raise InvalidArgumentError("need equal, non-zero numbers of I1 and I2 samples")
        m1 = i1.mean()
        m2 = i2.mean(axis=0)
        d1 = i1 - m1
        if i2.ndim == 1:
            c12 = np.dot(d1, i2 - m2)
        else:
            c12 = d1 @ (i2 - m2)
        return cls(len(i1), float(m1), m2, c12)

    def merge(self, other: "PairStats") -> "PairStats":
        n = self.n + other.n
        wb = other.n / n
        d1 = other.mean1 - self.mean1
        d2 = other.mean2 - self.mean2
        return PairStats(n, self.mean1 + d1 * wb, self.mean2 + d2 * wb,
                         self.c12 + other.c12 + d1 * d2 * (self.n * wb))

    def g2(self):
        """``<I1 I2> / (<I1><I2>)``; NaN where a mean vanishes."""
        denom = self.mean1 * np.asarray(self.mean2)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(denom != 0, 1.0 + self.c12 / (self.n * np.where(denom != 0, denom, 1)),
                            np.nan)


def _merge_all(blocks: Sequence[PairStats]) -> PairStats:
    total = blocks[0]
    for b in blocks[1:]:
        total = total.merge(b)
    return total


def _jackknife(blocks: Sequence[PairStats]):
    """Leave-one-block-out standard error of the pooled g2 (0 for one block)."""
    nb = len(blocks)
    if nb < 2:
        return np.zeros_like(np.asarray(blocks[0].g2(), dtype=float))
    prefix = [blocks[0]]
    for b in blocks[1:]:
        prefix.append(prefix[-1].merge(b))
    suffix = [blocks[-1]]
    for b in reversed(blocks[:-1]):
        suffix.append(b.merge(suffix[-1]))
    suffix.reverse()
    loo = []
    for k in range(nb):
        if k == 0:
            part = suffix[1]
        elif k == nb - 1:
            part = prefix[-2]
        else:
            part = prefix[k - 1].merge(suffix[k + 1])
        loo.append(part.g2())
    loo = np.array(loo, dtype=float)
    spread = loo - loo.mean(axis=0)
    return np.sqrt((nb - 1) / nb * np.sum(spread ** 2, axis=0))


@dataclass
class G2Accumulator:
    """Mergeable collection of :class:`PairStats` keyed by block index."""

    blocks: Dict[int, PairStats] = field(default_factory=dict)

    def add(self, index: int, stats: PairStats):
        if index in self.blocks:
            raise InvalidArgumentError(f"block {index} already accumulated")
        self.blocks[index] = stats

    def add_samples(self, index: int, i1, i2):
        self.add(index, PairStats.from_samples(i1, i2))

    def merge(self, other: "G2Accumulator") -> "G2Accumulator":
        overlap = self.blocks.keys() & other.blocks.keys()
        if overlap:
            raise InvalidArgumentError(f"blocks accumulated twice: {sorted(overlap)[:5]}")
        return G2Accumulator({**self.blocks, **other.blocks})

    @property
    def n_samples(self) -> int:
        return sum(b.n for b in self.blocks.values())

    def ordered(self):
        return [self.blocks[k] for k in sorted(self.blocks)]

    def estimate(self):
        """Pooled g2 and jackknife error, arrays if the blocks carry arrays."""
        if not self.blocks:
            raise DegenerateDataError("no samples accumulated")
        blocks = self.ordered()
        total = _merge_all(blocks)
        if np.any(total.mean1 * np.asarray(total.mean2) == 0):
            raise DegenerateDataError("mean intensity is zero; g2 undefined")
        return total.g2(), _jackknife(blocks), total.n


def g2_from_pairs(samples) -> G2Estimate:
    """Normalised intensity correlation of ``(I1, I2)`` pairs.

    The standard error is a leave-one-block-out jackknife over consecutive
    blocks of 100 pairs (single pairs when fewer than 200 are given).
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise InvalidArgumentError("samples must be a sequence of (I1, I2) pairs")
    n = len(samples)
    if n < 2:
        raise InvalidArgumentError("need at least 2 samples")
    if np.any(samples < 0) or not np.all(np.isfinite(samples)):
        raise InvalidArgumentError("intensities must be finite and non-negative")
    block = JACKKNIFE_BLOCK if n >= 2 * JACKKNIFE_BLOCK else 1
    acc = G2Accumulator()
    for k, start in enumerate(range(0, n, block)):
        part = samples[start:start + block]
        acc.add_samples(k, part[:, 0], part[:, 1])
    value, err, count = acc.estimate()
    return G2Estimate(float(value), float(err), count)


def coherence_degree_sq(e1, e2) -> float:
    """``|<E1 E2*>|^2 / (<|E1|^2><|E2|^2>)`` from field samples."""
    e1 = np.asarray(e1)
    e2 = np.asarray(e2)
    p1 = np.mean(np.abs(e1) ** 2)
    p2 = np.mean(np.abs(e2) ** 2)
    if p1 == 0 or p2 == 0:
        raise DegenerateDataError("field power is zero")
    return float(np.abs(np.mean(e1 * np.conj(e2))) ** 2 / (p1 * p2))


# -- coincidence histograms ---------------------------------------------------------

def histogram_bin_count(tau_range, bin_width) -> int:
    lo, hi = tau_range
    ratio = (hi - lo) / bin_width
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9 * max(1.0, nearest):
        return int(nearest)
    return int(math.ceil(ratio))


@dataclass(frozen=True, eq=False)
class CoincidenceHistogram:
    """Start-stop delay histogram; bin ``k`` covers ``[lo + k w, lo + (k+1) w)``."""

    bin_width: float
    range: Tuple[float, float]
    counts: np.ndarray
    n_starts: int

    def __post_init__(self):
        lo, hi = self.range
        if not (self.bin_width > 0 and lo < hi):
            raise InvalidArgumentError("histogram needs bin_width > 0 and tau_min < tau_max")
        counts = np.asarray(self.counts)
        if counts.shape != (histogram_bin_count(self.range, self.bin_width),):
            raise InvalidArgumentError("counts length does not match range and bin width")
        if np.any(counts < 0):
            raise InvalidArgumentError("counts must be non-negative")
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "range", (float(lo), float(hi)))

    @property
    def edges(self) -> np.ndarray:
        return self.range[0] + np.arange(len(self.counts) + 1) * self.bin_width

    @property
    def centers(self) -> np.ndarray:
        return self.range[0] + (np.arange(len(self.counts)) + 0.5) * self.bin_width

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "CoincidenceHistogram") -> "CoincidenceHistogram":
        if self.range != other.range or self.bin_width != other.bin_width:
            raise InvalidArgumentError("histograms have different binning")
        return CoincidenceHistogram(self.bin_width, self.range, self.counts + other.counts,
                                    self.n_starts + other.n_starts)

    def shifted(self, delta: float) -> "CoincidenceHistogram":
        lo, hi = self.range
        return CoincidenceHistogram(self.bin_width, (lo + delta, hi + delta), self.counts,
                                    self.n_starts)

    def write_csv(self, fh, header: Sequence[str] = ()):
        for line in header:
            fh.write(f"# {line}\n")
        fh.write("delay_ns,counts\n")
        for c, k in zip(self.centers, self.counts):
            fh.write(f"{c * 1e9:.6f},{int(k)}\n")


@numba.njit(cache=True, nogil=True)
def _bin_index(offset, width):
    # delays within 1e-9 bin of an upper edge (decimal round-off) go to the next bin
    x = offset / width
    k = int(x)
    if x - k > 1.0 - 1e-9:
        k += 1
    return k


@numba.njit(cache=True, nogil=True)
def _tac_first_stop(starts, stops, n_process, j, lo, hi, width, counts):
    # one conversion per start: the first unused stop with delay in [lo, hi)
    n_bins = len(counts)
    n_stops = len(stops)
    for s in range(n_process):
        t = starts[s]
        while j < n_stops and stops[j] < t + lo:
            j += 1
        if j < n_stops:
            d = stops[j] - t
            if d < hi:
                k = _bin_index(d - lo, width)
                if k >= n_bins:
                    k = n_bins - 1
                counts[k] += 1
                j += 1
    return j


@numba.njit(cache=True, nogil=True)
def _tac_all_pairs(starts, stops, n_process, j, lo, hi, width, counts):
    n_bins = len(counts)
    n_stops = len(stops)
    for s in range(n_process):
        t = starts[s]
        while j < n_stops and stops[j] < t + lo:
            j += 1
        m = j
        while m < n_stops and stops[m] - t < hi:
            k = _bin_index(stops[m] - t - lo, width)
            if k >= n_bins:
                k = n_bins - 1
            counts[k] += 1
            m += 1
    return j


def _times(stream) -> np.ndarray:
    times = getattr(stream, "timestamps", stream)
    return np.ascontiguousarray(np.asarray(times, dtype=float))


class TacConverter:
    """Streaming TAC/MCA: feeds time-ordered chunks, histograms finished starts.

    ``feed`` takes the next chunk of start and stop timestamps together with
    ``complete_until``, a time before which no later chunk will contribute
    events. Starts whose whole delay window lies before that time are
    converted; the rest wait for the next chunk. The final histogram is the
    one :func:`tac_histogram` gives for all chunks concatenated.
    """

    def __init__(self, tau_range, bin_width: float, mode: str = "first-stop"):
        lo, hi = (float(v) for v in tau_range)
        if not (bin_width > 0 and lo < hi):
            raise InvalidArgumentError("TAC needs bin_width > 0 and tau_min < tau_max")
        if mode not in TAC_MODES:
            raise InvalidArgumentError(f"TAC mode must be one of {TAC_MODES}, got {mode!r}")
        self.range = (lo, hi)
        self.bin_width = float(bin_width)
        self.mode = mode
        self.counts = np.zeros(histogram_bin_count(self.range, bin_width), dtype=np.int64)
        self.n_starts = 0
        self._starts = np.empty(0)
        self._stops = np.empty(0)

    def feed(self, starts, stops, complete_until: float = math.inf):
        starts = np.concatenate([self._starts, _times(starts)])
        stops = np.concatenate([self._stops, _times(stops)])
        starts.sort(kind="stable")
        stops.sort(kind="stable")
        lo, hi = self.range
        n_process = int(np.searchsorted(starts, complete_until - hi, side="left"))
        if complete_until == math.inf:
            n_process = len(starts)
        kernel = _tac_first_stop if self.mode == "first-stop" else _tac_all_pairs
        j = kernel(starts, stops, n_process, 0, lo, hi, self.bin_width, self.counts)
        self.n_starts += n_process
        self._starts = starts[n_process:].copy()
        self._stops = stops[j:].copy()

    def finish(self) -> "CoincidenceHistogram":
        self.feed(np.empty(0), np.empty(0))
        return CoincidenceHistogram(self.bin_width, self.range, self.counts.copy(), self.n_starts)


def tac_histogram(starts, stops, tau_range, bin_width: float,
                  mode: str = "first-stop") -> CoincidenceHistogram:
    """Histogram of start-stop delays ``stop - start`` within ``tau_range``.

    In ``first-stop`` mode each start converts at most once, with the first
    stop whose delay is in range, and that stop is not reused by a later
    start. ``all-pairs`` histograms every start-stop pair in range.
    """
    tac = TacConverter(tau_range, bin_width, mode)
    tac.feed(starts, stops)
    return tac.finish()


def g2_zero_from_histogram(h: CoincidenceHistogram, peak_halfwidth: float = 0.25e-9,
                           baseline_exclusion: float = 5e-9, center: float = 0.0,
                           min_baseline_bins: int = 2) -> G2Estimate:
    """Peak-to-baseline ratio of mean counts per bin.

    Bins whose centres lie within ``peak_halfwidth`` of ``center`` form the
    peak; bins at least ``baseline_exclusion`` away form the baseline, which
    must have ``min_baseline_bins`` bins on each side.
    """
    if not (peak_halfwidth > 0 and baseline_exclusion > peak_halfwidth):
        raise InvalidArgumentError("need 0 < peak_halfwidth < baseline_exclusion")
    offset = h.centers - center
    tol = 1e-9 * h.bin_width
    peak = np.abs(offset) <= peak_halfwidth + tol
    left = offset <= -baseline_exclusion + tol
    right = offset >= baseline_exclusion - tol
    if left.sum() < min_baseline_bins or right.sum() < min_baseline_bins:
        raise InsufficientBaselineError(
            f"baseline |tau| >= {baseline_exclusion * 1e9:g} ns has {int(left.sum())} bins on the "
            f"left and {int(right.sum())} on the right; need {min_baseline_bins} on each side")
    if not peak.any():
        raise InvalidArgumentError(
            f"no bin centre within {peak_halfwidth * 1e9:g} ns of the peak centre")
    base = h.counts[left | right].astype(float)
    top = h.counts[peak].astype(float)
    n_base, n_top = len(base), len(top)
    mean_base = base.sum() / n_base
    mean_top = top.sum() / n_top
    if mean_base == 0:
        raise DegenerateDataError("baseline is empty; no accidental coincidences recorded")
    value = mean_top / mean_base
    var = top.sum() / n_top ** 2 / mean_base ** 2 + value ** 2 * base.sum() / n_base ** 2 / mean_base ** 2
    return G2Estimate(float(value), float(math.sqrt(var)), int(top.sum() + base.sum()))


# -- peak fitting ------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianFit:
    """``baseline + amplitude * exp(-(t - center)^2 / (2 sigma^2))``.

    Uncertainties are one-sigma, from the Jacobian at the optimum.
    """

    amplitude: float
    center: float
    fwhm: float
    baseline: float
    residual_norm: float
    amplitude_err: float = 0.0
    center_err: float = 0.0
    fwhm_err: float = 0.0
    baseline_err: float = 0.0
    n_iterations: int = 0

    def __post_init__(self):
        if not self.fwhm > 0:
            raise InvalidArgumentError("fitted FWHM must be positive")

    @property
    def sigma(self) -> float:
        return self.fwhm / FWHM_PER_SIGMA

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.baseline + self.amplitude * np.exp(-0.5 * ((t - self.center) / self.sigma) ** 2)


def _gauss_model(p, x):
    a, c, s, b = p
    return b + a * np.exp(-0.5 * ((x - c) / s) ** 2)


def _gauss_jac(p, x):
    a, c, s, b = p
    z = (x - c) / s
    e = np.exp(-0.5 * z * z)
    return np.column_stack([e, a * e * z / s, a * e * z * z / s, np.ones_like(x)])


def fit_gaussian_peak(h: CoincidenceHistogram, max_iterations: int = 200,
                      xtol: float = 1e-9) -> GaussianFit:
    """Least-squares Gaussian-plus-constant fit to a histogram (bin centres).

    See :func:`fit_gaussian`.
    """
    return fit_gaussian(h.centers, h.counts, max_iterations, xtol, poisson=True)


def fit_gaussian(t, y, max_iterations: int = 200, xtol: float = 1e-9,
                 poisson: bool = False) -> GaussianFit:
    """Least-squares fit of ``baseline + amplitude exp(-(t-center)^2/(2 sigma^2))``.

    Damped Gauss-Newton (Levenberg-Marquardt) from a moment-based start,
    stopping when the relative step falls below ``xtol`` or after
    ``max_iterations`` evaluations. ``t`` is rescaled to unit sample spacing
    internally so the parameters are well conditioned.

    Parameter errors use Poisson variances equal to the fitted model when
    ``poisson`` is set (counts), otherwise the residual variance.

    Raises
    ------
    NoPeakError
        If ``y`` is constant, the fit fails, or the fitted amplitude is not
        positive at three standard errors.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise InvalidArgumentError("t and y must be 1-D arrays of equal length")
    if len(y) < 5:
        raise NoPeakError("need at least 5 points to fit a peak")
    if np.ptp(y) == 0:
        raise NoPeakError("histogram is constant")
    origin = t[0]
    w = float(np.median(np.diff(t)))
    if not w > 0:
        raise InvalidArgumentError("t must be increasing")
    x = (t - origin) / w

    # moment start: baseline from the outer tenths, peak from the excess
    k = max(1, len(y) // 10)
    b0 = float(np.median(np.concatenate([y[:k], y[-k:]])))
    excess = np.clip(y - b0, 0, None)
    if excess.sum() == 0:
        raise NoPeakError("no counts above the baseline")
    c0 = float(np.sum(x * excess) / excess.sum())
    s0 = float(np.sqrt(np.sum((x - c0) ** 2 * excess) / excess.sum()))
    s0 = min(max(s0, 0.5), len(y) / 4)
    a0 = float(y.max() - b0)
    scale = max(float(np.abs(y).max()), 1e-300)

    def residual(p):
        return (_gauss_model(p, x) - y) / scale

    def jac(p):
        return _gauss_jac(p, x) / scale

    try:
        res = least_squares(residual, [a0, c0, s0, b0], jac=jac, method="lm", xtol=xtol,
                            ftol=1e-15, gtol=1e-15, max_nfev=max_iterations)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NoPeakError(f"peak fit failed: {exc}") from None
    if res.status < 0:
        raise NoPeakError(f"peak fit failed: {res.message}")
    a, c, s, b = res.x
    s = abs(s)
    if not np.all(np.isfinite(res.x)) or s == 0:
        raise NoPeakError("peak fit diverged")
    J = _gauss_jac([a, c, s, b], x)
    model = _gauss_model([a, c, s, b], x)
    try:
        bread = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        raise NoPeakError("peak fit is singular") from None
    if poisson:
        cov = bread @ (J.T * np.maximum(model, 1.0)) @ J @ bread
    else:
        cov = bread * np.sum((model - y) ** 2) / max(len(y) - 4, 1)
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    if not (a > 0 and a > 3 * err[0]):
        raise NoPeakError(
            f"fitted amplitude {a:.4g} is not positive at 3 sigma (sigma = {err[0]:.3g})")
    return GaussianFit(amplitude=float(a), center=float(origin + c * w),
                       fwhm=float(FWHM_PER_SIGMA * s * w), baseline=float(b),
                       residual_norm=float(np.linalg.norm(model - y)),
                       amplitude_err=float(err[0]), center_err=float(err[1] * w),
                       fwhm_err=float(FWHM_PER_SIGMA * err[2] * w), baseline_err=float(err[3]),
                       n_iterations=int(res.nfev))


# -- coherence time, visibility, coherence width ----------------------------------------

LINESHAPES = ("lorentzian", "gaussian")


def coherence_time_from_excess(g2_zero_excess: float, combined_jitter_fwhm: float,
                               lineshape: str = "lorentzian") -> float:
    """Coherence time from the jitter-smeared zero-delay excess ``g2(0) - 1``.

    ``lorentzian``: the true excess is ``exp(-2|tau|/tau0)``, of area
    ``tau0``; for ``tau0`` much shorter than the jitter the measured excess is
    that area times the jitter kernel's peak ``1/(sigma sqrt(2 pi))``, so
    ``tau0 = excess * sigma * sqrt(2 pi)``.

    ``gaussian``: the true excess is ``exp(-tau^2/tau0^2)``; its convolution
    with the jitter kernel peaks at ``tau0 / sqrt(tau0^2 + 2 sigma^2)``,
    which is inverted exactly.
    """
    if not g2_zero_excess > 0:
        raise InvalidArgumentError(f"g2(0) excess must be positive, got {g2_zero_excess}")
    if not combined_jitter_fwhm > 0:
        raise InvalidArgumentError("combined jitter FWHM must be positive")
    sigma = combined_jitter_fwhm / FWHM_PER_SIGMA
    if lineshape == "lorentzian":
        return g2_zero_excess * sigma * math.sqrt(2.0 * math.pi)
    if lineshape == "gaussian":
        if g2_zero_excess >= 1:
            raise InvalidArgumentError("gaussian lineshape needs an excess below 1")
        return g2_zero_excess * sigma * math.sqrt(2.0 / (1.0 - g2_zero_excess ** 2))
    raise InvalidArgumentError(f"lineshape must be one of {LINESHAPES}, got {lineshape!r}")


def visibility(curve) -> float:
    """``(max - min) / (max + min)`` of a curve.

    ``curve`` is a sequence of ``(position, value)`` pairs or a 1-D array of
    values.
    """
    arr = np.asarray(curve, dtype=float)
    values = arr[:, 1] if arr.ndim == 2 else arr
    if values.ndim != 1 or len(values) < 2:
        raise InvalidArgumentError("visibility needs at least 2 points")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise InvalidArgumentError("curve values must be finite and non-negative")
    top, bottom = values.max(), values.min()
    if top == 0:
        raise DegenerateDataError("curve is identically zero")
    return float((top - bottom) / (top + bottom))


def coherence_width(wavelength: float, distance: float, source_diameter: float,
                    source_shape: str = "strip") -> float:
    """Full transverse width over which ``|mu|^2 >= 1/2`` for an incoherent source.

    ``strip``: a uniform source of width ``D`` (the 1-D model simulated
    here), ``|mu| = sinc``, giving ``0.8859 lambda z / D``. ``disk``: a
    uniform circular source, ``|mu| = 2 J1(v) / v``, giving
    ``1.0290 lambda z / D``.
    """
    if not (wavelength > 0 and distance > 0 and source_diameter > 0):
        raise InvalidArgumentError("wavelength, distance and diameter must be positive")
    if source_shape == "strip":
        # |sin(u)/u|^2 = 1/2 with u = pi D x / (lambda z)
        u = brentq(lambda u: (math.sin(u) / u) ** 2 - 0.5, 0.1, 3.0)
        return 2 * u * wavelength * distance / (math.pi * source_diameter)
    if source_shape == "disk":
        # |2 J1(v)/v|^2 = 1/2 with v = pi D x / (lambda z)
        v = brentq(lambda v: (2 * j1(v) / v) ** 2 - 0.5, 0.1, 3.8)
        return 2 * v * wavelength * distance / (math.pi * source_diameter)
    raise InvalidArgumentError("source_shape must be 'strip' or 'disk'")
