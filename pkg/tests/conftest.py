import numpy as np
import pytest

from retseg.synthetic import write_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def synth_root(tmp_path):
    """Tiny on-disk dataset: 6 originals of 32x32."""
    root = tmp_path / "data"
    write_synthetic_dataset(root, count=6, size=32, seed=50)
    return root
