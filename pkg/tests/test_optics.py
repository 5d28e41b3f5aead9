import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import gaussian_field
from ghostsim.correlation import g2_from_pairs
from ghostsim.errors import (AliasingError, ContractError, DegenerateGeometryError,
                             InvalidArgumentError)
from ghostsim.field import SampledField, make_grid
from ghostsim.optics import (BenchGeometry, MaskSpec, apply_lens, apply_mask, beamsplit,
                             check_lens_equation, conjugate_separation, double_pinhole,
                             max_propagation_distance, pinhole_array, propagate, uniform_mask)

LAM = 780e-9
GRID = make_grid(4096, 10e-6)


def second_moment_width(field):
    p = field.intensity
    x = field.grid.x
    mean = np.sum(x * p) / np.sum(p)
    return 2 * math.sqrt(np.sum((x - mean) ** 2 * p) / np.sum(p))


def test_zero_distance_is_identity():
    f = gaussian_field(GRID, 0.3e-3, LAM)
    assert np.array_equal(propagate(f, 0.0).amplitude, f.amplitude)


def test_gaussian_beam_width():
    w0, z = 0.2e-3, 0.5
    out = propagate(gaussian_field(GRID, w0, LAM), z)
    zr = math.pi * w0 ** 2 / LAM
    expected = w0 * math.sqrt(1 + (z / zr) ** 2)
    assert second_moment_width(out) == pytest.approx(expected, rel=1e-3)


confined = st.lists(st.tuples(st.floats(-5e-3, 5e-3), st.floats(0.15e-3, 0.6e-3),
                              st.floats(-2e-3, 2e-3), st.floats(0, 2 * math.pi)),
                    min_size=1, max_size=4)


def _superposition(beams):
    amp = np.zeros(GRID.n_points, complex)
    for c, w, tilt, phase in beams:
        amp += gaussian_field(GRID, w, LAM, c, tilt).amplitude * np.exp(1j * phase)
    return SampledField(GRID, amp, LAM)


@given(confined, st.lists(st.floats(0.0, 0.2), min_size=1, max_size=5))
def test_energy_conserved_for_confined_fields(beams, distances):
    f = _superposition(beams)
    e0 = f.energy()
    for d in distances:
        f = propagate(f, d)
    assert abs(f.energy() / e0 - 1) < 1e-10


@given(confined, st.floats(0.0, 0.3), st.floats(0.0, 0.3))
def test_propagation_composes(beams, a, b):
    f = _superposition(beams)
    two = propagate(propagate(f, a), b).amplitude
    one = propagate(f, a + b).amplitude
    assert np.linalg.norm(two - one) <= 1e-8 * np.linalg.norm(one)


def test_aliasing_bound_reported():
    grid = make_grid(4096, 5e-6)
    limit = max_propagation_distance(grid, LAM)
    assert limit == pytest.approx(5e-6 * 2 * 4096 * 5e-6 / LAM)
    f = SampledField(grid, np.ones(4096), LAM)
    with pytest.raises(AliasingError) as info:
        propagate(f, 1.8)
    assert info.value.distance == 1.8
    assert info.value.max_distance == pytest.approx(limit)
    propagate(f, 0.99 * limit)


def test_default_ghost_grid_reaches_reference_plane():
    assert max_propagation_distance(make_grid(8192, 10e-6), LAM) > 1.8


def test_negative_distance_rejected():
    with pytest.raises(InvalidArgumentError):
        propagate(gaussian_field(GRID, 1e-3, LAM), -0.1)


def test_lens_is_pure_phase():
    f = gaussian_field(GRID, 1e-3, LAM)
    out = apply_lens(f, 0.2)
    assert np.allclose(np.abs(out.amplitude), np.abs(f.amplitude), rtol=1e-14, atol=0)
    assert out.energy() == pytest.approx(f.energy(), rel=1e-14)


def test_lens_zero_focal_length():
    with pytest.raises(InvalidArgumentError):
        apply_lens(gaussian_field(GRID, 1e-3, LAM), 0.0)


def test_plane_wave_focuses_on_axis():
    plane = SampledField(GRID, np.ones(GRID.n_points), LAM)
    out = propagate(apply_lens(plane, 0.2, aperture=10e-3), 0.2)
    assert np.argmax(out.intensity) == GRID.n_points // 2


def test_point_source_imaged_at_conjugate_distance():
    s0, f = 0.4, 0.2
    at_lens = apply_lens(propagate(gaussian_field(GRID, 20e-6, LAM), s0), f, aperture=12e-3)
    distances = np.arange(0.30, 0.5001, 0.01)
    widths = [second_moment_width(propagate(at_lens, d)) for d in distances]
    best = distances[int(np.argmin(widths))]
    assert best == pytest.approx(1 / (1 / f - 1 / s0), abs=0.0101)


def test_lens_and_mask_commute():
    f = gaussian_field(GRID, 1e-3, LAM)
    m = double_pinhole(1.3e-3, 0.5e-3)
    a = apply_mask(apply_lens(f, 0.2), m).amplitude
    b = apply_lens(apply_mask(f, m), 0.2).amplitude
    assert np.allclose(a, b, rtol=1e-15, atol=0)


def test_trivial_masks():
    f = gaussian_field(GRID, 1e-3, LAM)
    assert np.array_equal(apply_mask(f, uniform_mask(1.0)).amplitude, f.amplitude)
    assert np.all(apply_mask(f, uniform_mask(0.0)).amplitude == 0)


def test_double_pinhole_energy_fraction():
    flat = SampledField(GRID, np.ones(GRID.n_points), LAM)
    out = apply_mask(flat, double_pinhole(1.3e-3, 0.5e-3))
    assert out.energy() / flat.energy() == pytest.approx(2 * 0.5e-3 / GRID.span, rel=0.05)


def test_double_pinhole_transmission():
    m = double_pinhole(1.3e-3, 0.5e-3)
    assert m.n_features == 2
    assert m(0.65e-3) == 1 and m(-0.65e-3) == 1
    assert m(0.0) == 0
    assert m(0.91e-3) == 0 and m(-0.91e-3) == 0


def test_overlapping_pinholes_rejected():
    with pytest.raises(InvalidArgumentError):
        double_pinhole(0.4e-3, 0.5e-3)


def test_pinhole_array_centres():
    m = pinhole_array(3, 1.3e-3, 0.1e-3)
    assert m.n_features == 3
    assert all(m(x) == 1 for x in (-1.3e-3, 0.0, 1.3e-3))
    assert m(0.65e-3) == 0


def test_transmission_outside_unit_interval():
    bad = MaskSpec(lambda x: np.full(np.shape(x), 1.5), "gain")
    with pytest.raises(ContractError):
        apply_mask(gaussian_field(GRID, 1e-3, LAM), bad)


@given(confined)
def test_mask_never_adds_energy(beams):
    f = _superposition(beams)
    assert apply_mask(f, double_pinhole(1.3e-3, 0.5e-3)).energy() <= f.energy()


def test_beamsplitter_halves_energy_and_copies():
    f = gaussian_field(GRID, 1e-3, LAM, tilt=1e-4)
    a, b = beamsplit(f)
    assert a.energy() == pytest.approx(f.energy() / 2, rel=1e-12)
    assert b.energy() == pytest.approx(f.energy() / 2, rel=1e-12)
    assert np.array_equal(a.amplitude, b.amplitude)


def test_beamsplitter_keeps_g2():
    gen = np.random.default_rng(1)
    grid = make_grid(64, 10e-6)
    i_a, i_b, i_in = [], [], []
    for _ in range(500):
        amp = (gen.standard_normal(64) + 1j * gen.standard_normal(64)) / math.sqrt(2)
        a, b = beamsplit(SampledField(grid, amp, LAM))
        i_a.append(a.intensity[10]); i_b.append(b.intensity[10])
        i_in.append(abs(amp[10]) ** 2)
    split = g2_from_pairs(np.column_stack([i_a, i_b]))
    whole = g2_from_pairs(np.column_stack([i_in, i_in]))
    assert split.value == pytest.approx(whole.value, rel=1e-12)


def test_bench_lens_equation(bench_geometry):
    r = check_lens_equation(bench_geometry, 0.005)
    assert r.residual == pytest.approx(1 / (1.475 - 1.8) + 1 / 0.124 - 1 / 0.2)
    assert abs(r.scaled_residual) == pytest.approx(2.48e-3, abs=5e-5)
    assert r.satisfied
    assert r.magnification == pytest.approx(0.325 / 0.124)
    assert r.magnification == pytest.approx(2.62, abs=0.005)


def test_conjugate_of_30_cm():
    assert conjugate_separation(0.3, 0.2) == pytest.approx(0.6)


def test_infinite_conjugate():
    r = check_lens_equation(BenchGeometry(1.8, 1.5, 0.2, 0.2))
    assert r.infinite_conjugate and not r.satisfied


def test_degenerate_geometry():
    with pytest.raises(DegenerateGeometryError):
        check_lens_equation(BenchGeometry(1.5, 1.5, 0.1, 0.2))


@given(st.floats(0.05, 20.0), st.floats(0.3, 3.0), st.floats(0.05, 0.5), st.floats(0.05, 0.5),
       st.floats(0.05, 0.95))
def test_lens_verdict_invariant_under_scaling(k, z1, z3, f, frac):
    g = BenchGeometry(z1, z1 * frac, z3, f)
    a = check_lens_equation(g, 0.005)
    b = check_lens_equation(g.scaled(k), 0.005)
    assert b.scaled_residual == pytest.approx(a.scaled_residual, rel=1e-9, abs=1e-12)
    if abs(abs(a.scaled_residual) - 0.005) > 1e-9:
        assert a.satisfied == b.satisfied
