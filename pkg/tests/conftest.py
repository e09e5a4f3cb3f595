import numpy as np
import pytest

from vunfold.config import PipelineConfig
from vunfold.phantom import gen_phantom
from vunfold.pipeline import prepare, unfold


@pytest.fixture(scope="session")
def straight():
    return gen_phantom(shape="straight", radius=20.0, wall=4.0, length=100.0)


@pytest.fixture(scope="session")
def jtube():
    return gen_phantom(shape="j-tube", radius=20.0, wall=4.0, length=100.0)


def _config(truth, **kw):
    return PipelineConfig(cardia=truth.cardia.tolist(), pylorus=truth.pylorus.tolist(), **kw)


@pytest.fixture(scope="session")
def straight_prepared(straight):
    scalar, _, truth = straight
    return prepare(scalar, _config(truth))


@pytest.fixture(scope="session")
def jtube_prepared(jtube):
    scalar, _, truth = jtube
    return prepare(scalar, _config(truth))


@pytest.fixture(scope="session")
def straight_model(straight_prepared):
    from vunfold.wall_model import build_hex_model

    p = straight_prepared
    return build_hex_model(p.wall, p.air, p.incision, 8, centerline=p.centerline)


@pytest.fixture(scope="session")
def straight_unfolded(straight, straight_prepared):
    """Default end-to-end unfolding of the straight tube, shared by several tests."""
    _, _, truth = straight
    return unfold(straight_prepared, _config(truth))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
