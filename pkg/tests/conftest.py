import numpy as np
import pytest

from polarring.phantom import PhantomConfig


def tube_config(**kw) -> PhantomConfig:
    """Noiseless straight tube centred on voxel (20, 20) of a 41x41 slice grid."""
    base = dict(
        dims=(41, 41, 8),
        spacing=(0.5, 0.5, 0.5),
        lumen_radius_mm=(3.0, 3.0),
        lumen_radius_variation_mm=(0.0, 0.0),
        ellipticity=(0.0, 0.0),
        thickness_mm=(1.0, 1.0),
        plaque_amplitude_mm=(0.0, 0.0),
        center_amplitude_mm=(0.0, 0.0),
        center_offset_mm=(0.0, 0.0),
        noise_sigma=0.0,
    )
    base.update(kw)
    return PhantomConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
