import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import numpy as np
import pytest

from gsmc import codec
from gsmc.models import GaussianCloud, SH_AC_CHANNELS


@pytest.fixture(autouse=True)
def internal_backend():
    """Pin the built-in codec so a developer's GSMC_* environment never leaks into tests."""

    codec.set_backend_for_testing(codec.INTERNAL_BACKEND)
    yield
    codec.set_backend_for_testing(None)


def make_cloud(count: int, seed: int = 0) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        positions=rng.uniform(-5.0, 5.0, size=(count, 3)),
        sh_dc=rng.normal(size=(count, 3)),
        sh_ac=rng.normal(size=(count, SH_AC_CHANNELS)) * 0.2,
        opacity=rng.normal(size=(count, 1)),
        scale=rng.normal(-4.0, 0.5, size=(count, 3)),
        rotation=rng.normal(size=(count, 4)),
    )
