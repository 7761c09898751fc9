import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hanet import kernels  # noqa: E402
from hanet.data import AugmentPolicy, make_synthetic  # noqa: E402

BACKENDS = sorted(kernels.backends())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return kernels.backends()[request.param]


@pytest.fixture(scope="session")
def synthetic64(tmp_path_factory):
    """8 images, 64x64, 5-20 heads, seed 7; whole-image patches."""
    out = tmp_path_factory.mktemp("syn64")
    return make_synthetic(out, 8, (64, 64), (5, 20), seed=7, policy=AugmentPolicy(M=1, m=64))
