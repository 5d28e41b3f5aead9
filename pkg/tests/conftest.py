import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def bench_geometry():
    from ghostsim.optics import BenchGeometry
    return BenchGeometry(1.8, 1.475, 0.124, 0.2)


@pytest.fixture
def lamp():
    from ghostsim.field import SourceSpec
    return SourceSpec(1e-3, 780e-9, 0.2e-9, 6e5)


def gaussian_field(grid, w0, wavelength, center=0.0, tilt=0.0):
    from ghostsim.field import SampledField
    x = grid.x - center
    amp = np.exp(-(x / w0) ** 2) * np.exp(2j * np.pi * tilt * grid.x / wavelength)
    return SampledField(grid, amp, wavelength)
