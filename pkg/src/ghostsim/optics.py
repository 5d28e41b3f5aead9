"""Linear optical elements acting on :class:`~ghostsim.field.SampledField`.

Free-space propagation uses the paraxial transfer function
``H(fx) = exp(-i pi lambda z fx^2)`` on a zero-padded copy of the grid. The
padded window acts as a guard band; after the inverse transform the central
``n_points`` samples are kept, so light that leaves the window is absorbed.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import fft as sfft

from .errors import (AliasingError, ContractError, DegenerateGeometryError, InvalidArgumentError)
from .field import Grid1D, SampledField

# samples closer than this to an aperture edge count as inside
_EDGE_TOL = 1e-12


def max_propagation_distance(grid: Grid1D, wavelength: float, pad_factor: int = 2) -> float:
    """Largest distance for which the transfer function is Nyquist sampled.

    The chirp ``exp(-i pi lambda z fx^2)`` is sampled at ``1/(pad*span)`` in
    frequency; its phase step at the band edge stays below pi while
    ``lambda * z <= pitch * pad * span``.
    """
    return grid.pitch * pad_factor * grid.span / wavelength


def transfer_function(n_padded: int, pitch: float, wavelength: float, distance: float):
    fx = sfft.fftfreq(n_padded, d=pitch)
    return np.exp(-1j * np.pi * wavelength * distance * fx ** 2)


def propagate_array(amplitude: np.ndarray, pitch: float, wavelength: float, distance: float,
                    pad_factor: int = 2) -> np.ndarray:
    """Propagate amplitudes along the last axis (rows are independent fields).

    No sampling check is made here; :func:`propagate` is the checked entry
    point.
    """
    amplitude = np.asarray(amplitude, dtype=np.complex128)
    if distance == 0:
        return amplitude.copy()
    n = amplitude.shape[-1]
    n_padded = pad_factor * n
    offset = (n_padded - n) // 2
    padded = np.zeros(amplitude.shape[:-1] + (n_padded,), dtype=np.complex128)
    padded[..., offset:offset + n] = amplitude
    spectrum = sfft.fft(padded, axis=-1)
    spectrum *= transfer_function(n_padded, pitch, wavelength, distance)
    out = sfft.ifft(spectrum, axis=-1, overwrite_x=True)
    return np.ascontiguousarray(out[..., offset:offset + n])


def check_sampling(grid: Grid1D, wavelength: float, distance: float, pad_factor: int = 2):
    if distance < 0 or not np.isfinite(distance):
        raise InvalidArgumentError(f"propagation distance must be finite and >= 0, got {distance}")
    limit = max_propagation_distance(grid, wavelength, pad_factor)
    if distance > limit:
        raise AliasingError(
            f"transfer function undersampled: lambda*z = {wavelength * distance:.4g} m^2 exceeds "
            f"pitch*padded_span = {grid.pitch * pad_factor * grid.span:.4g} m^2 "
            f"(max distance {limit:.4g} m for this grid)",
            distance=distance, max_distance=limit)


def propagate(field: SampledField, distance: float, pad_factor: int = 2) -> SampledField:
    """Paraxial free-space propagation by ``distance`` metres.

    Raises
    ------
    AliasingError
        If ``wavelength * distance > pitch * pad_factor * span``.
    """
    if pad_factor < 1 or int(pad_factor) != pad_factor:
        raise InvalidArgumentError("pad_factor must be a positive integer")
    check_sampling(field.grid, field.wavelength, distance, pad_factor)
    if distance == 0:
        return field.replace(field.amplitude.copy())
    out = propagate_array(field.amplitude, field.grid.pitch, field.wavelength, distance,
                          int(pad_factor))
    return field.replace(out)


def lens_phase(x: np.ndarray, wavelength: float, f: float) -> np.ndarray:
    return np.exp(-1j * np.pi * x ** 2 / (wavelength * f))


def apply_lens(field: SampledField, f: float, aperture: Optional[float] = None) -> SampledField:
    """Thin lens of focal length ``f`` centred on the optical axis.

    ``aperture`` is an optional clear diameter; samples outside it are
    blocked. A negative ``f`` is a diverging lens.
    """
    if f == 0 or not np.isfinite(f):
        raise InvalidArgumentError("focal length must be finite and non-zero")
    x = field.grid.x
    out = field.amplitude * lens_phase(x, field.wavelength, f)
    if aperture is not None:
        if not aperture > 0:
            raise InvalidArgumentError("lens aperture must be positive")
        out[np.abs(x) > aperture / 2 + _EDGE_TOL] = 0
    return field.replace(out)


@dataclass(frozen=True)
class MaskSpec:
    """Amplitude transmission ``transmission(x)`` with values in [0, 1].

    ``n_features`` counts transparent features (pinholes); ``None`` when the
    notion does not apply.
    """

    transmission: Callable[[np.ndarray], np.ndarray]
    description: str = ""
    n_features: Optional[int] = None

    def __call__(self, x) -> np.ndarray:
        values = np.asarray(self.transmission(np.asarray(x, dtype=float)), dtype=float)
        values = np.broadcast_to(values, np.shape(x))
        if np.any(~np.isfinite(values)) or np.any(values < 0) or np.any(values > 1):
            raise ContractError(f"mask '{self.description}' transmission outside [0, 1]")
        return values


def apply_mask(field: SampledField, mask: MaskSpec) -> SampledField:
    return field.replace(field.amplitude * mask(field.grid.x))


def pinhole_array(count: int, separation: float, hole_diameter: float) -> MaskSpec:
    """``count`` equal pinholes on a line, centred on the axis, ``separation`` apart."""
    if count < 1:
        raise InvalidArgumentError("pinhole count must be >= 1")
    if not hole_diameter > 0:
        raise InvalidArgumentError("hole diameter must be positive")
    if count > 1 and not separation > hole_diameter:
        raise InvalidArgumentError(
            f"pinholes overlap: separation {separation:g} m <= diameter {hole_diameter:g} m")
    centers = (np.arange(count) - (count - 1) / 2) * separation
    half = hole_diameter / 2 + _EDGE_TOL

    def transmission(x):
        x = np.asarray(x, dtype=float)
        inside = np.abs(x[..., None] - centers) <= half
        return inside.any(axis=-1).astype(float)

    label = f"{count} pinhole(s), diameter {hole_diameter:g} m, pitch {separation:g} m"
    return MaskSpec(transmission, label, count)


def double_pinhole(separation: float, hole_diameter: float) -> MaskSpec:
    return pinhole_array(2, separation, hole_diameter)


def uniform_mask(value: float, description: str = "") -> MaskSpec:
    return MaskSpec(lambda x: np.full(np.shape(x), float(value)),
                    description or f"uniform {value:g}", None)


def beamsplit(field: SampledField):
    """50/50 split: two identical copies, each with amplitude scaled by 1/sqrt(2)."""
    half = field.amplitude * np.sqrt(0.5)
    return field.replace(half), field.replace(half.copy())


@dataclass(frozen=True)
class BenchGeometry:
    """Ghost-imaging bench distances (metres).

    z1: reference collimator to source; z2: imaging lens to source;
    z3: imaging lens to mask; f: focal length of the imaging lens.
    """

    z1: float
    z2: float
    z3: float
    f: float

    def __post_init__(self):
        for name in ("z1", "z2", "z3", "f"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"BenchGeometry.{name} must be positive")

    def scaled(self, k: float) -> "BenchGeometry":
        return BenchGeometry(self.z1 * k, self.z2 * k, self.z3 * k, self.f * k)


@dataclass(frozen=True)
class LensReport:
    residual: float          # 1/(z2-z1) + 1/z3 - 1/f, in 1/m
    scaled_residual: float   # residual * f
    tolerance: float
    satisfied: bool
    magnification: float     # (z1 - z2) / z3
    infinite_conjugate: bool


def check_lens_equation(geom: BenchGeometry, tolerance: float = 0.005) -> LensReport:
    """Evaluate ``1/(z2-z1) + 1/z3 = 1/f`` for the bench.

    ``z2 - z1`` is signed: on the usual bench the lens sits closer to the
    source than the reference detector does, so it is negative.
    """
    if geom.z2 == geom.z1:
        raise DegenerateGeometryError("z2 == z1: reference plane coincides with the lens plane")
    if geom.z3 == 0:
        raise DegenerateGeometryError("z3 == 0: mask in the lens plane")
    residual = 1.0 / (geom.z2 - geom.z1) + 1.0 / geom.z3 - 1.0 / geom.f
    scaled = residual * geom.f
    infinite = bool(np.isclose(geom.z3, geom.f, rtol=1e-12, atol=0.0))
    satisfied = (not infinite) and abs(scaled) <= tolerance
    return LensReport(residual=residual, scaled_residual=scaled, tolerance=tolerance,
                      satisfied=bool(satisfied), magnification=(geom.z1 - geom.z2) / geom.z3,
                      infinite_conjugate=infinite)


def conjugate_separation(z3: float, f: float) -> float:
    """Signed ``z2 - z1`` that satisfies the lens equation for given ``z3`` and ``f``."""
    if z3 == 0 or f == 0:
        raise DegenerateGeometryError("z3 and f must be non-zero")
    inverse = 1.0 / f - 1.0 / z3
    return np.inf if inverse == 0 else 1.0 / inverse
