import numpy as np
import pytest

from eacnet import data


@pytest.fixture
def face_landmarks():
    """Canonical symmetric schematic face on a 224x224 frame."""
    return data.schematic_landmarks(112.0, 112.0, 0.34 * 224, 0.40 * 224, 224)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
