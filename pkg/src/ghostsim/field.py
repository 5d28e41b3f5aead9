"""Transverse grids and thermal source fields.

A source frame is one spatial snapshot of an incoherent disk source: every
grid sample inside the disk carries an independent circular complex Gaussian
amplitude with unit mean square, samples outside are exactly zero.
"""

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import GeometryError, InvalidArgumentError
from .rng import keyed_generator

FRAME_STREAM = "source-frame"


@dataclass(frozen=True)
class Grid1D:
    n_points: int
    pitch: float
    center: float = 0.0

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2 or self.n_points % 2:
            raise InvalidArgumentError(
                f"n_points must be an even integer >= 2, got {self.n_points}")
        object.__setattr__(self, "n_points", int(self.n_points))
        if not self.pitch > 0 or not np.isfinite(self.pitch):
            raise InvalidArgumentError(f"pitch must be positive, got {self.pitch}")

    @property
    def span(self) -> float:
        return self.n_points * self.pitch

    @property
    def x(self) -> np.ndarray:
        """Sample coordinates, ``center + (i - n_points/2) * pitch``."""
        i = np.arange(self.n_points) - self.n_points // 2
        return self.center + i * self.pitch

    @property
    def lower(self) -> float:
        return self.center - (self.n_points // 2) * self.pitch

    @property
    def upper(self) -> float:
        return self.center + (self.n_points // 2 - 1) * self.pitch


def make_grid(n_points: int, pitch: float, center: float = 0.0) -> Grid1D:
    return Grid1D(n_points, float(pitch), float(center))


@dataclass(frozen=True, eq=False)
class SampledField:
    """Complex scalar amplitude on a :class:`Grid1D` at one wavelength."""

    grid: Grid1D
    amplitude: np.ndarray
    wavelength: float

    def __post_init__(self):
        amplitude = np.asarray(self.amplitude, dtype=np.complex128)
        if amplitude.shape != (self.grid.n_points,):
            raise InvalidArgumentError(
                f"amplitude has shape {amplitude.shape}, grid needs ({self.grid.n_points},)")
        if not self.wavelength > 0:
            raise InvalidArgumentError(f"wavelength must be positive, got {self.wavelength}")
        object.__setattr__(self, "amplitude", amplitude)

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.amplitude) ** 2

    def energy(self) -> float:
        """Total energy ``sum |E|^2 * pitch``."""
        return float(np.sum(self.intensity) * self.grid.pitch)

    def replace(self, amplitude) -> "SampledField":
        return SampledField(self.grid, amplitude, self.wavelength)


@dataclass(frozen=True)
class SourceSpec:
    """Quasi-monochromatic incoherent disk source.

    ``mean_rate`` is the photon rate delivered to the beamsplitter at unit
    detector efficiency; each arm of a 50/50 split receives half of it.
    """

    diameter: float
    wavelength: float
    coherence_time: float
    mean_rate: float

    def __post_init__(self):
        for name in ("diameter", "wavelength", "coherence_time", "mean_rate"):
            value = getattr(self, name)
            if not value > 0:
                raise InvalidArgumentError(f"SourceSpec.{name} must be positive, got {value}")


@dataclass(frozen=True)
class EnsembleSeed:
    master_seed: int
    frame_index: int = 0

    def __post_init__(self):
        if self.frame_index < 0:
            raise InvalidArgumentError("frame_index must be non-negative")


def source_support(spec: SourceSpec, grid: Grid1D) -> np.ndarray:
    """Boolean mask of the samples inside the source disk (centred on x = 0)."""
    half = spec.diameter / 2
    if not (grid.lower < -half and half < grid.upper):
        raise GeometryError(
            f"source of diameter {spec.diameter:g} m does not fit inside the grid "
            f"[{grid.lower:g}, {grid.upper:g}] m")
    return np.abs(grid.x) <= half


def _frame_values(master_seed, frame_index, n_inside):
    gen = keyed_generator(master_seed, FRAME_STREAM, frame_index)
    draws = gen.standard_normal((n_inside, 2))
    return (draws[:, 0] + 1j * draws[:, 1]) * np.sqrt(0.5)


def generate_source_frame(spec: SourceSpec, grid: Grid1D, seed: EnsembleSeed) -> SampledField:
    support = source_support(spec, grid)
    amplitude = np.zeros(grid.n_points, dtype=np.complex128)
    amplitude[support] = _frame_values(seed.master_seed, seed.frame_index, int(support.sum()))
    return SampledField(grid, amplitude, spec.wavelength)


def frame_ensemble(spec: SourceSpec, grid: Grid1D, master_seed: int,
                   count: int) -> Iterator[SampledField]:
    """Yield frames ``0 .. count-1`` for ``master_seed``."""
    if count < 1:
        raise InvalidArgumentError(f"count must be >= 1, got {count}")
    source_support(spec, grid)
    for index in range(count):
        yield generate_source_frame(spec, grid, EnsembleSeed(master_seed, index))


def frame_block(spec: SourceSpec, grid: Grid1D, master_seed: int, start: int,
                count: int) -> np.ndarray:
    """Amplitudes of frames ``start .. start+count-1`` stacked as rows.

    Row ``k`` is bit-identical to ``generate_source_frame`` at index
    ``start + k``.
    """
    support = source_support(spec, grid)
    n_inside = int(support.sum())
    block = np.zeros((count, grid.n_points), dtype=np.complex128)
    for k in range(count):
        block[k, support] = _frame_values(master_seed, start + k, n_inside)
    return block
