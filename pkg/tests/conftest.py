import numpy as np
import pytest

from narxkit.dataset import TimeSeries


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def ts_from(u, y, **kwargs) -> TimeSeries:
    return TimeSeries(np.asarray(u, dtype=float), np.asarray(y, dtype=float), **kwargs)
