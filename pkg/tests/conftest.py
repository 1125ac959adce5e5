import numpy as np
import pytest

from dynlsm.data_model import FEATURE_INDEX, N_FEATURES, FeatureVector, LabeledSample, YearTask


def random_raw_features(rng, n):
    """Raw factor matrix with plausible ranges for every slot."""
    X = np.empty((n, N_FEATURES))
    X[:, FEATURE_INDEX["elev"]] = rng.uniform(0, 900, n)
    X[:, FEATURE_INDEX["slope"]] = rng.uniform(0, 60, n)
    X[:, FEATURE_INDEX["curv"]] = rng.normal(0, 1, n)
    X[:, FEATURE_INDEX["aspect"]] = rng.uniform(0, 360, n)
    X[:, FEATURE_INDEX["litho"]] = rng.integers(1, 4, n)
    X[:, FEATURE_INDEX["landuse"]] = rng.integers(1, 4, n)
    X[:, FEATURE_INDEX["ndvi"]] = np.round(rng.uniform(-2000, 9000, n))
    X[:, FEATURE_INDEX["spi"]] = rng.gamma(2.0, 10.0, n)
    X[:, FEATURE_INDEX["twi"]] = rng.normal(6, 2, n)
    X[:, FEATURE_INDEX["ar"]] = rng.uniform(1500, 3500, n)
    X[:, FEATURE_INDEX["aerd"]] = rng.integers(0, 20, n)
    for name in ("d_fault", "d_drain", "d_catch", "d_road"):
        X[:, FEATURE_INDEX[name]] = rng.uniform(0, 2000, n)
    return X


def make_samples(X, y, year=2000, start_id=0):
    return [
        LabeledSample(FeatureVector(tuple(row)), int(lab), year, (float(i), 0.0), sid=start_id + i)
        for i, (row, lab) in enumerate(zip(X, y))
    ]


def slope_task(rng, n=200, year=2000):
    """Separable task: slope > 30 means landslide."""
    X = random_raw_features(rng, n)
    y = (X[:, FEATURE_INDEX["slope"]] > 30).astype(int)
    return YearTask(year, make_samples(X, y, year))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
