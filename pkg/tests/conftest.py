import numpy as np
import pytest

from fedseg.data import ClientSpec, GeneratorConfig, split_clients
from fedseg.nn import NORM_PARAM, NORM_STAT, OTHER, ParamSet

TINY_GEN = GeneratorConfig(resolution=16, slices=4)


def scalar_set(other=0.0, norm=0.0, stat=0.0):
    """Three-entry ParamSet, one scalar per tag class."""
    return ParamSet([
        ("conv.w", np.array([other], dtype=np.float64), OTHER),
        ("norm.alpha", np.array([norm], dtype=np.float64), NORM_PARAM),
        ("norm.run_mean", np.array([stat], dtype=np.float64), NORM_STAT),
    ])


@pytest.fixture(scope="session")
def tiny_specs():
    return [
        ClientSpec("ct", "CT", patients=5),
        ClientSpec("mri", "MRI", patients=5, mri_variant=1),
        ClientSpec("mix", "Mixed", patients=6),
    ]


@pytest.fixture(scope="session")
def tiny_datasets(tiny_specs):
    return split_clients(tiny_specs, 3, TINY_GEN)
