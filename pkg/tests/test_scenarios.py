import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ghostsim.correlation import visibility
from ghostsim.detection import DetectorSpec
from ghostsim.errors import AliasingError, InvalidArgumentError
from ghostsim.field import Grid1D, SourceSpec
from ghostsim.optics import BenchGeometry, MaskSpec, double_pinhole, pinhole_array, uniform_mask
from ghostsim.scenarios import (GhostConfig, HbtConfig, curve_peaks, ideal_ghost_curve,
                                image_plane_coherence_width, predicted_magnification, run_ghost,
                                run_hbt, suggested_temporal_modes)

NS = 1e-9


def hbt(tau0=0.2 * NS, jitter=0.92 * NS, rate=6e5, **kw):
    det = DetectorSpec(0.0, 2e-3, 1.0, jitter)
    return HbtConfig(SourceSpec(1e-3, 780e-9, tau0, rate), (det, det), **kw)


# -- HBT ----------------------------------------------------------------------------

def test_integration_time_floor():
    with pytest.raises(InvalidArgumentError):
        hbt(tau0=1e-3, integration_time=1.0)


def test_singles_and_combined_jitter():
    cfg = hbt()
    assert cfg.singles_rates == (3e5, 3e5)
    assert cfg.combined_jitter == pytest.approx(math.sqrt(2) * 0.92 * NS)


def test_zero_jitter_gives_siegert_bunching():
    tau0 = 20 * NS
    cfg = hbt(tau0=tau0, jitter=0.0, tau_range=(-200 * NS, 200 * NS), bin_width=0.5 * NS,
              integration_time=10.0, peak_halfwidth=0.25 * NS, baseline_exclusion=100 * NS,
              tac_mode="all-pairs", master_seed=3)
    res = run_hbt(cfg)
    assert res.g2_zero.value == pytest.approx(2.0, abs=0.1)
    assert res.fit is not None


def test_independent_sources_give_flat_histogram():
    cfg = hbt(shared_intensity=False, integration_time=20.0, master_seed=4)
    res = run_hbt(cfg)
    assert abs(res.g2_zero.value - 1) < 5 * res.g2_zero.std_error


def test_trace_route_agrees_with_event_route():
    tau0 = 1e-6
    kw = dict(tau0=tau0, jitter=0.0, rate=1e5, tau_range=(-40 * tau0, 40 * tau0),
              bin_width=tau0 / 10, integration_time=2.0, peak_halfwidth=tau0 / 20,
              baseline_exclusion=10 * tau0, tac_mode="all-pairs", segment_duration=1.0)
    events = run_hbt(hbt(route="events", master_seed=1, **kw)).g2_zero
    trace = run_hbt(hbt(route="trace", master_seed=1, **kw)).g2_zero
    for est in (events, trace):
        assert est.value == pytest.approx(1 + math.exp(-0.05), abs=0.1)
    assert abs(events.value - trace.value) < 5 * math.hypot(events.std_error, trace.std_error)


def test_hbt_independent_of_thread_count():
    cfg = hbt(integration_time=6.0, segment_duration=1.0, master_seed=8)
    a = run_hbt(cfg, threads=1)
    b = run_hbt(cfg, threads=3)
    assert np.array_equal(a.histogram.counts, b.histogram.counts)
    assert a.singles == b.singles


def test_dark_counts_and_dead_time_knobs():
    base = run_hbt(hbt(integration_time=2.0, master_seed=2))
    dark = run_hbt(hbt(integration_time=2.0, master_seed=2, dark_rate=1e5))
    dead = run_hbt(hbt(integration_time=2.0, master_seed=2, dead_time=1e-6))
    assert dark.singles[0] - base.singles[0] == pytest.approx(2e5, abs=5 * math.sqrt(2e5))
    assert dead.singles[0] < base.singles[0]
    expected = 3e5 / (1 + 3e5 * 1e-6) * 2.0
    assert dead.singles[0] == pytest.approx(expected, rel=0.01)


def test_stop_delay_moves_the_peak():
    res = run_hbt(hbt(integration_time=40.0, stop_delay=3 * NS, master_seed=6))
    assert res.fit.center == pytest.approx(3 * NS, abs=0.3 * NS)
    assert res.g2_zero.value > 1.04


# -- ghost imaging -----------------------------------------------------------------

BENCH = BenchGeometry(1.8, 1.475, 0.124, 0.2)
LAMP = SourceSpec(1e-3, 780e-9, 0.2e-9, 6e5)


def ghost(positions, mask=None, aperture=0.0, frames=2000, geometry=BENCH, **kw):
    return GhostConfig(LAMP, geometry, mask or double_pinhole(1.3e-3, 0.5e-3),
                       DetectorSpec(0.0, aperture), tuple(positions),
                       frames_per_position=frames, **kw)


def test_magnification_examples():
    assert predicted_magnification(BENCH) == pytest.approx(2.62, abs=0.005)
    assert predicted_magnification(BenchGeometry(1.0, 0.8, 0.2, 0.1)) == pytest.approx(1.0)
    assert 1.3e-3 * predicted_magnification(BENCH) == pytest.approx(3.41e-3, abs=5e-6)


def test_suggested_modes():
    assert suggested_temporal_modes(0.2 * NS, 1.3 * NS, 0.25 * NS) == pytest.approx(9.0)
    assert suggested_temporal_modes(10 * NS, 0.1 * NS) == 1.0


def test_ghost_config_validation():
    with pytest.raises(InvalidArgumentError):
        ghost([1e-3, 0.0])
    with pytest.raises(InvalidArgumentError):
        ghost([0.0], frames=50)
    with pytest.raises(InvalidArgumentError):
        ghost([0.0], temporal_modes=0.5)


def test_default_lens_aperture():
    cfg = ghost([0.0])
    assert cfg.effective_lens_aperture == pytest.approx(780e-9 * 0.2 / 10e-6)


def test_aliasing_propagated():
    with pytest.raises(AliasingError):
        run_ghost(ghost([0.0], grid=Grid1D(4096, 5e-6)))


@pytest.fixture(scope="module")
def bench_scan():
    positions = np.round(np.arange(-6e-3, 6e-3 + 1e-9, 0.5e-3), 9)
    return run_ghost(ghost(positions, master_seed=21))


def test_two_peaks_at_magnified_pinholes(bench_scan):
    peaks = bench_scan.peak_positions
    assert len(peaks) == 2
    assert peaks[1] - peaks[0] == pytest.approx(3.41e-3, abs=0.5e-3)
    assert np.all(np.abs(np.abs(peaks) - 1.70e-3) < 0.5e-3)


def test_background_flat_away_from_peaks(bench_scan):
    far = np.abs(bench_scan.positions) >= 5e-3
    excess = bench_scan.values[far] - 1
    assert np.all(np.abs(excess) < 5 * bench_scan.errors[far])


def test_dilution_by_temporal_modes(bench_scan):
    positions = bench_scan.positions
    diluted = run_ghost(ghost(positions, master_seed=21, temporal_modes=4.0))
    assert np.allclose(diluted.values - 1, (bench_scan.values - 1) / 4, rtol=1e-12, atol=1e-15)
    assert np.allclose(diluted.errors, bench_scan.errors / 4, rtol=1e-12)
    assert np.allclose([e.value for e in diluted.raw_g2], bench_scan.values, rtol=1e-12)


def test_ghost_scan_independent_of_threads():
    positions = [-2e-3, -1.5e-3, 0.0, 1.5e-3]
    a = run_ghost(ghost(positions, frames=400, master_seed=2), threads=1)
    b = run_ghost(ghost(positions, frames=400, master_seed=2), threads=2)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.errors, b.errors)


def test_bucket_translation_changes_nothing():
    positions = [-1.5e-3, 0.0, 1.5e-3]
    scans = [run_ghost(ghost(positions, frames=500, master_seed=3,
                             bucket=DetectorSpec(c, 10e-3))) for c in (-1e-3, 0.0, 1.5e-3)]
    whole = run_ghost(ghost(positions, frames=500, master_seed=3))
    for s in scans:
        assert np.allclose(s.values, whole.values, rtol=1e-10)


def test_peak_positions_invariant_under_common_scaling():
    positions = np.round(np.arange(-4e-3, 4e-3 + 1e-9, 0.5e-3), 9)
    # keep z1; scale z1 - z2, z3 and f by 0.8
    scaled = BenchGeometry(1.8, 1.8 - 0.325 * 0.8, 0.124 * 0.8, 0.2 * 0.8)
    base = run_ghost(ghost(positions, master_seed=5))
    other = run_ghost(ghost(positions, master_seed=5, geometry=scaled))
    assert predicted_magnification(scaled) == pytest.approx(predicted_magnification(BENCH))
    assert len(base.peak_positions) == len(other.peak_positions) == 2
    assert np.allclose(base.peak_positions, other.peak_positions, atol=0.5e-3)
    ideal = [ideal_ghost_curve(g, double_pinhole(1.3e-3, 0.5e-3), 2, None, 0.0,
                               np.linspace(-4e-3, 4e-3, 801)) for g in (BENCH, scaled)]
    assert np.array_equal(ideal[0], ideal[1])


def test_lens_warning():
    off = BenchGeometry(1.8, 1.475, 0.15, 0.2)
    with pytest.warns(UserWarning, match="lens equation"):
        run_ghost(ghost([0.0], frames=100, geometry=off))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run_ghost(ghost([0.0], frames=100))


# -- ideal curve -------------------------------------------------------------------

X = np.linspace(-4e-3, 4e-3, 1601)


def test_opaque_mask_gives_background():
    blocked = MaskSpec(lambda x: np.zeros(np.shape(x)), "opaque", 2)
    assert np.all(ideal_ghost_curve(BENCH, blocked, 2, None, 0.0, X) == 2)


def test_bare_curve_peaks_and_plateau():
    y = ideal_ghost_curve(BENCH, double_pinhole(1.3e-3, 0.5e-3), 2, None, 0.0, X)
    assert y.max() == 3 and y.min() == 2
    plateau = X[y == 3]
    centres = [plateau[plateau < 0].mean(), plateau[plateau > 0].mean()]
    m = predicted_magnification(BENCH)
    assert centres == pytest.approx([-0.65e-3 * m, 0.65e-3 * m], abs=X[1] - X[0])
    assert abs(centres[1]) == pytest.approx(1.70e-3, abs=0.01e-3)
    assert visibility(y) == pytest.approx(0.2)


def test_n_mismatch():
    with pytest.raises(InvalidArgumentError):
        ideal_ghost_curve(BENCH, double_pinhole(1.3e-3, 0.5e-3), 3, None, 0.0, X)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_ideal_visibility_one_over_2n_plus_1(n):
    y = ideal_ghost_curve(BENCH, pinhole_array(n, 1.3e-3, 0.5e-3), n, None, 0.0,
                          np.linspace(-8e-3, 8e-3, 3201))
    assert visibility(y) == pytest.approx(1 / (2 * n + 1))


def _direct_convolution(geometry, mask, n, aperture, coherence, x):
    # brute-force reference: average the bare curve over the aperture, then
    # weight by the coherence Gaussian, by explicit quadrature at every x
    m = predicted_magnification(geometry)
    bare = lambda u: n + mask(u / m) ** 2
    s = coherence / (2 * math.sqrt(2 * math.log(2)))
    v = np.linspace(-4 * s, 4 * s, 401) if coherence > 0 else np.zeros(1)
    wv = np.exp(-0.5 * (v / s) ** 2) if coherence > 0 else np.ones(1)
    u = np.linspace(-aperture / 2, aperture / 2, 401) if aperture > 0 else np.zeros(1)
    out = []
    for xi in x:
        grid = xi - v[:, None] - u[None, :]
        vals = bare(grid).mean(axis=1)
        out.append(np.sum(wv * vals) / np.sum(wv))
    return np.array(out)


@pytest.mark.parametrize("aperture, coherence", [(2e-3, 0.0), (0.0, 1.2e-3), (2e-3, 1.2e-3)])
def test_smoothing_matches_direct_convolution(aperture, coherence):
    x = np.linspace(-5e-3, 5e-3, 41)
    mask = double_pinhole(1.3e-3, 0.5e-3)
    fast = ideal_ghost_curve(BENCH, mask, 2, DetectorSpec(0, aperture), coherence, x)
    slow = _direct_convolution(BENCH, mask, 2, aperture, coherence, x)
    assert np.allclose(fast, slow, atol=0.01)


def test_aperture_broadens_peaks():
    mask = double_pinhole(1.3e-3, 0.5e-3)
    x = np.linspace(0, 4e-3, 4001)

    def fwhm(y):
        half = (y.max() + y.min()) / 2
        above = x[y >= half]
        return above.max() - above.min()

    bare = fwhm(ideal_ghost_curve(BENCH, mask, 2, None, 0.0, x))
    wide = fwhm(ideal_ghost_curve(BENCH, mask, 2, DetectorSpec(0, 2e-3), 0.0, x))
    direct = fwhm(_direct_convolution(BENCH, mask, 2, 2e-3, 0.0, x[::20]).repeat(20)[:len(x)])
    assert wide > bare
    assert wide == pytest.approx(direct, abs=0.05e-3)


def test_image_plane_coherence_width():
    assert image_plane_coherence_width(LAMP, 1.8) == pytest.approx(1.244e-3, abs=2e-6)


@given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=40))
def test_curve_peaks_are_local_maxima(values):
    x = np.arange(len(values)) * 0.5e-3
    peaks = curve_peaks(x, values)
    for p in peaks:
        assert x[0] <= p <= x[-1]
