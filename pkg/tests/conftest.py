import numpy as np
import pytest

from rwpm.homogeneous import build_model
from rwpm.kernel import KernelSpec, build_kernel

_KERNELS = {}
_MODELS = {}


def kernel_for(gamma, slow_var="constant", kappa=0.0):
    key = (gamma, slow_var, kappa)
    if key not in _KERNELS:
        _KERNELS[key] = build_kernel(KernelSpec(gamma, slow_var, kappa))
    return _KERNELS[key]


def model_for(gamma, slow_var="constant", kappa=0.0):
    key = (gamma, slow_var, kappa)
    if key not in _MODELS:
        _MODELS[key] = build_model(kernel_for(gamma, slow_var, kappa))
    return _MODELS[key]


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


@pytest.fixture(scope="session")
def k75():
    return kernel_for(0.75)


@pytest.fixture(scope="session")
def m75():
    return model_for(0.75)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
