import numpy as np
import pytest
from hypothesis import settings

from pspinn.components import SmParams, SynchronousMachine, load_params, bundled_params_path

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def params():
    return load_params(bundled_params_path())


@pytest.fixture(scope="session")
def machine(params):
    return SynchronousMachine(params)


@pytest.fixture
def nominal_state():
    # delta, omega, e_q', e_d', e_fd, r_f, v_r, p_m, p_sv
    return np.array([0.5, 0.0, 1.0, 0.0, 1.08, 1.0, 1.105, 0.7048, 0.7048])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
