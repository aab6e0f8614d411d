"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from vwe.core import CameraModel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def pinhole():
    return CameraModel(100.0, 100.0, 173.0, 130.0, 346, 260)


@pytest.fixture
def distorted():
    return CameraModel(200.0, 210.0, 172.5, 129.5, 346, 260, (-0.25, 0.06, 1e-3, -6e-4, -0.004))


@pytest.fixture(scope="session")
def long_bundle():
    from vwe import synth

    return synth.make_suite("long", seed=0)


@pytest.fixture(scope="session")
def short_circle():
    from vwe import synth

    return synth.circle_bundle(seed=1, duration=0.8)
