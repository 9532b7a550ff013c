import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

PS = (1.0, 2.0, float("inf"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
