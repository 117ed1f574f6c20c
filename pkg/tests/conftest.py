import numpy as np
import pytest

from guideseg.shapeworld import (
    IDENTITY_SHIFT,
    DomainShift,
    SceneSpec,
    generate_dataset,
)

ACCEPTANCE_SHIFT = DomainShift(hue_shift=0.3, brightness_scale=0.8, texture_noise_std=0.05)


@pytest.fixture
def tiny_spec():
    return SceneSpec(rng_seed=7, image_size=32)


@pytest.fixture
def tiny_domain_pair(tiny_spec):
    """Eight source and eight target images on disjoint scene indices."""
    source = generate_dataset(tiny_spec, range(8), IDENTITY_SHIFT)
    target = generate_dataset(tiny_spec, range(8, 16), ACCEPTANCE_SHIFT)
    return source, target


def random_labels(rng: np.random.Generator, shape, num_classes: int) -> np.ndarray:
    return rng.integers(0, num_classes, size=shape).astype(np.uint8)
