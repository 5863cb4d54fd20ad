import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_volume(rng, channels=1, dims=(6, 7, 8), spacing=(1.0, 1.0, 1.0)):
    from sparsewarp.volume import Volume3

    data = rng.normal(size=(channels, *dims)).astype(np.float32)
    return Volume3(data, spacing=spacing)
