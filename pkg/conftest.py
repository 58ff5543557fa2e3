"""
Shared fixtures for the IDS Lab test suite
"""

import math
from typing import List

import numpy as np
import pytest

from idslab.backend import Condition, GaussianMixtureBackend, ScoreBackend
from idslab.core import NoiseSchedule, check_same_shape
from idslab.tasks import VectorWorldSpec, make_vector_world


def single_gaussian(mu=(0.0, 0.0), sigma=1.0, schedule=None) -> GaussianMixtureBackend:
    """One-component mixture; label 0 and null both select it"""
    means = np.array([mu], dtype=np.float64)
    return GaussianMixtureBackend(means, [sigma], [1.0], {0: [0]}, schedule or NoiseSchedule())


def reference_eps(means, sigmas, weights, x, alpha) -> np.ndarray:
    """Noise prediction of a diffused isotropic mixture, written out term by term"""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    dens = []
    grads = []
    for mu, sigma, w in zip(means, sigmas, weights):
        mu = np.asarray(mu, dtype=np.float64)
        v = alpha * sigma ** 2 + 1.0 - alpha
        diff = math.sqrt(alpha) * mu - x
        dens.append(w * (2 * math.pi * v) ** (-n / 2) * math.exp(-float(diff @ diff) / (2 * v)))
        grads.append(diff / v)
    dens = np.array(dens) / np.sum(dens)
    score = sum(g * d for g, d in zip(grads, dens))
    return -math.sqrt(1.0 - alpha) * score


def fd_jacobian(fn, z: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a latent-to-latent map, columns per input coordinate"""
    flat = z.reshape(-1)
    cols = []
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        plus = fn((flat + step).reshape(z.shape)).reshape(-1)
        minus = fn((flat - step).reshape(z.shape)).reshape(-1)
        cols.append((plus - minus) / (2 * h))
    return np.stack(cols, axis=1)


def fd_gradient(fn, z: np.ndarray, h: float = 1e-5) -> np.ndarray:
    flat = z.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        grad[i] = (fn((flat + step).reshape(z.shape)) - fn((flat - step).reshape(z.shape))) / (2 * h)
    return grad.reshape(z.shape)


def relative_error(actual, expected) -> float:
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    return float(np.linalg.norm(actual - expected) / max(np.linalg.norm(expected), 1e-12))


class StubBackend(ScoreBackend):
    """Backend whose prediction is a fixed function of (z_t, label)"""

    def __init__(self, fn, shape, labels: List[int] = (0, 1), schedule=None):
        self.fn = fn
        self.shape = tuple(shape)
        self.schedule = schedule or NoiseSchedule()
        self._labels = list(labels)

    @property
    def labels(self):
        return self._labels

    def score(self, z_t, cond: Condition, t):
        return np.asarray(self.fn(np.asarray(z_t), cond), dtype=np.float64)

    def score_vjp(self, z_t, cond, t, u):
        check_same_shape(z_t, u)
        return np.zeros(self.shape)

    def to_dict(self):
        return {}


@pytest.fixture
def two_mode_world():
    return make_vector_world(VectorWorldSpec.two_mode())


@pytest.fixture
def two_mode(two_mode_world):
    return two_mode_world.backend


@pytest.fixture
def standard_gaussian():
    return single_gaussian()
