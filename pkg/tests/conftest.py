import numpy as np
import pytest

from anisoebm.energy import GaussianEnergy, MixtureEnergy, NeuralEnergy, RingsEnergy
from anisoebm.rng import generator


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def std_gauss_1d():
    return GaussianEnergy([0.0], sigma=1.0)


@pytest.fixture
def std_gauss_2d():
    return GaussianEnergy([0.0, 0.0], sigma=1.0)


@pytest.fixture
def mixture_1d():
    return MixtureEnergy([[-1.0], [1.0]], [0.5, 0.5], sigma=1.0)


@pytest.fixture
def rings():
    return RingsEnergy(radii=(0.5, 1.0, 1.5), width=0.05)


@pytest.fixture
def small_net():
    return NeuralEnergy(2, hidden=(8, 6), leak=0.05,
                        init_rng=generator(99, "net-init"))


def central_diff_x(model, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp = model.eval_batch((x + e)[None, :])[0]
        fm = model.eval_batch((x - e)[None, :])[0]
        out[i] = (fp - fm) / (2 * h)
    return out


def central_diff_theta(model, x, h=1e-5):
    from anisoebm.energy import ParamVector
    x = np.asarray(x, dtype=np.float64)
    theta0 = model.param.values.copy()
    layout = model.param.layout
    out = np.zeros_like(theta0)
    for i in range(theta0.size):
        tp = theta0.copy()
        tp[i] += h
        model.param = ParamVector(tp, layout)
        fp = model.eval_batch(x[None, :])[0]
        tm = theta0.copy()
        tm[i] -= h
        model.param = ParamVector(tm, layout)
        fm = model.eval_batch(x[None, :])[0]
        out[i] = (fp - fm) / (2 * h)
    model.param = ParamVector(theta0, layout)
    return out
