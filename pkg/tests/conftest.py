import numpy as np
import pytest

from tactforge import dataio


@pytest.fixture(scope="session")
def small_geom():
    from tactforge import gelsim
    return gelsim.SensorGeometry(resolution=64)


@pytest.fixture(scope="session")
def odd_geom():
    # odd resolution so one pixel direction is exactly the optical axis
    from tactforge import gelsim
    return gelsim.SensorGeometry(resolution=65)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """80-record dataset (4 sphere indenters x 20 steps) at 32x32."""
    out = tmp_path_factory.mktemp("tinyset")
    plan = dataio.DatasetPlan.default(
        n_indenters=4, steps=20, sensor=dataio.SensorConfig(resolution=32))
    return dataio.build_dataset(plan, str(out), seed=11)


@pytest.fixture(scope="session")
def tiny_dataset_split(tiny_dataset):
    held = sorted({r.indenter_id for r in tiny_dataset.records})[-1]
    return dataio.split(tiny_dataset, [held])


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
