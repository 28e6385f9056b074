import math

import numpy as np
import pytest
from scipy import integrate

from anisoebm.energy import (GaussianEnergy, MixtureEnergy, NeuralEnergy,
                             ParamVector, RingsEnergy, eval_energy, grad_theta,
                             grad_x, log_density, model_from_text,
                             model_to_text, params_from_bytes, params_to_bytes,
                             read_params, trapezoid_log_partition,
                             write_params)
from anisoebm.errors import (DimensionMismatchError, ParseError,
                             UnsupportedOperationError)
from anisoebm.rng import generator

from conftest import central_diff_theta, central_diff_x


class TestEval:
    def test_gaussian_at_mode(self, std_gauss_2d):
        assert eval_energy(std_gauss_2d, [0.0, 0.0]) == 0.0

    def test_gaussian_off_mode(self, std_gauss_2d):
        assert eval_energy(std_gauss_2d, [2.0, 0.0]) == -2.0

    def test_zero_network_returns_final_bias(self):
        net = NeuralEnergy(2, hidden=(4, 3), leak=0.05)
        # Zero weights: output is the last-layer bias regardless of input
        # and of the other biases.
        net.param.segment("b0")[:] = [0.3, -0.2, 0.1, 0.05]
        net.param.segment("b2")[:] = [0.7]
        assert eval_energy(net, [1.5, -2.5]) == pytest.approx(0.7, abs=0)
        assert eval_energy(net, [0.0, 0.0]) == pytest.approx(0.7, abs=0)

    def test_dimension_mismatch_names_dims(self, std_gauss_2d):
        with pytest.raises(DimensionMismatchError) as err:
            eval_energy(std_gauss_2d, [1.0, 2.0, 3.0])
        assert err.value.expected == 2
        assert err.value.actual == 3

    def test_eval_finite_on_finite_inputs(self, rings, mixture_1d, rng):
        pts2 = rng.normal(0, 50, size=(200, 2))
        assert np.isfinite(rings.eval_batch(pts2)).all()
        pts1 = rng.normal(0, 50, size=(200, 1))
        assert np.isfinite(mixture_1d.eval_batch(pts1)).all()


class TestGradX:
    def test_gaussian(self, std_gauss_2d):
        np.testing.assert_allclose(grad_x(std_gauss_2d, [2.0, 0.0]),
                                   [-2.0, 0.0], atol=0)

    def test_mixture_symmetry(self, mixture_1d):
        assert grad_x(mixture_1d, [0.0])[0] == pytest.approx(0.0, abs=1e-15)

    def test_neural_matches_finite_differences(self, small_net, rng):
        for _ in range(5):
            x = rng.normal(size=2)
            g = grad_x(small_net, x)
            fd = central_diff_x(small_net, x)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-10)


class TestGradTheta:
    def test_gaussian_mean_family(self):
        model = GaussianEnergy([0.0], sigma=1.0)
        assert grad_theta(model, [1.0]).values[0] == pytest.approx(1.0)

    def test_zero_input_kills_first_layer_weight_grads(self):
        net = NeuralEnergy(2, hidden=(5,), leak=0.05,
                           init_rng=generator(7, "z"))
        g = grad_theta(net, [0.0, 0.0])
        assert np.all(g.segment("W0") == 0.0)
        assert np.any(g.segment("b0") != 0.0)

    def test_neural_matches_finite_differences(self, small_net, rng):
        x = rng.normal(size=2)
        g = grad_theta(small_net, x).values
        fd = central_diff_theta(small_net, x)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


class TestFiniteDifferenceSweep:
    """100 random draws per model class, max relative error < 1e-5."""

    def _sweep(self, model, rng, n=100, theta_too=False, x_scale=1.0):
        worst = 0.0
        for _ in range(n):
            x = x_scale * rng.normal(size=model.dim)
            g = grad_x(model, x)
            fd = central_diff_x(model, x)
            denom = np.maximum(np.abs(fd), 1e-6)
            worst = max(worst, float(np.max(np.abs(g - fd) / denom)))
            if theta_too and len(model.param):
                gt = grad_theta(model, x).values
                fdt = central_diff_theta(model, x)
                denom = np.maximum(np.abs(fdt), 1e-6)
                worst = max(worst, float(np.max(np.abs(gt - fdt) / denom)))
        return worst

    def test_gaussian(self, std_gauss_2d, rng):
        assert self._sweep(std_gauss_2d, rng, theta_too=True) < 1e-5

    def test_mixture(self, mixture_1d, rng):
        assert self._sweep(mixture_1d, rng) < 1e-5

    def test_rings_away_from_ridges(self, rings, rng):
        # Stay off the measure-zero non-smooth set (ring-distance ties).
        worst = 0.0
        count = 0
        while count < 100:
            x = rng.normal(0, 1.0, size=2)
            r = np.linalg.norm(x)
            d = np.abs(r - np.array(rings.radii))
            d_sorted = np.sort(d)
            if r < 1e-3 or d_sorted[1] - d_sorted[0] < 1e-3:
                continue
            count += 1
            g = grad_x(rings, x)
            fd = central_diff_x(rings, x)
            denom = np.maximum(np.abs(fd), 1e-6)
            worst = max(worst, float(np.max(np.abs(g - fd) / denom)))
        assert worst < 1e-5

    def test_neural(self, small_net, rng):
        assert self._sweep(small_net, rng, theta_too=True) < 1e-5


class TestLogDensity:
    def test_std_normal_1d(self, std_gauss_1d):
        assert log_density(std_gauss_1d, [0.0]) == pytest.approx(
            -0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_std_normal_2d(self, std_gauss_2d):
        assert log_density(std_gauss_2d, [0.0, 0.0]) == pytest.approx(
            -math.log(2 * math.pi), abs=1e-12)

    def test_mixture_matches_direct_pdf(self, mixture_1d):
        # Oracle: average of the two component normal pdfs at a symmetric
        # point, evaluated directly.
        x = 0.5
        pdf = 0.5 * (math.exp(-0.5 * (x + 1) ** 2)
                     + math.exp(-0.5 * (x - 1) ** 2)) / math.sqrt(2 * math.pi)
        assert log_density(mixture_1d, [x]) == pytest.approx(math.log(pdf),
                                                             abs=1e-12)

    def test_missing_log_norm_raises(self, small_net):
        with pytest.raises(UnsupportedOperationError):
            log_density(small_net, [0.0, 0.0])

    @pytest.mark.parametrize("factory", [
        lambda: GaussianEnergy([0.3], sigma=0.8),
        lambda: MixtureEnergy([[-1.0], [2.0]], [0.3, 0.7], sigma=0.6),
        lambda: GaussianEnergy([0.1, -0.2], sigma=1.2),
        lambda: RingsEnergy(),
    ])
    def test_density_integrates_to_one(self, factory):
        model = factory()
        # Independent oracle: the package's adaptive trapezoid of
        # exp(log_density) must integrate to 1 over the bounding box.
        log_z = trapezoid_log_partition(model.eval_batch, model.default_box(),
                                        tol=1e-12)
        assert math.exp(log_z - model.log_norm) == pytest.approx(1.0, abs=1e-3)

    def test_rings_log_norm_against_dblquad(self, rings):
        val, _ = integrate.dblquad(
            lambda y, x: math.exp(rings.eval_batch(np.array([[x, y]]))[0]),
            -2.0, 2.0, -2.0, 2.0, epsabs=1e-10)
        assert rings.log_norm == pytest.approx(math.log(val), abs=1e-6)


class TestStructuralInvariants:
    def test_translation_equivariance(self, rng):
        # Dyadic inputs keep every addition exact, so equality is bitwise.
        for _ in range(20):
            m = rng.integers(-4096, 4096, size=2) / 1024.0
            v = rng.integers(-4096, 4096, size=2) / 1024.0
            x = rng.integers(-4096, 4096, size=2) / 1024.0
            a = GaussianEnergy(m, sigma=1.3)
            b = GaussianEnergy(m + v, sigma=1.3)
            assert eval_energy(b, x + v) == eval_energy(a, x)

    def test_radial_gradient_decreases_unboundedly(self, std_gauss_2d):
        # Inward-pointing radial derivative must decrease without bound.
        vals = []
        for r in (10.0, 100.0, 1000.0):
            z = np.array([r, 0.0])
            vals.append(float(z / np.linalg.norm(z) @ grad_x(std_gauss_2d, z)))
        assert vals[0] > vals[1] > vals[2]
        assert vals[2] == -1000.0


class TestParamVector:
    def test_partition_enforced(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(4), (("a", 0, 2), ("b", 3, 1)))
        with pytest.raises(ValueError):
            ParamVector(np.zeros(4), (("a", 0, 2), ("b", 2, 1)))
        pv = ParamVector(np.arange(4.0), (("a", 0, 2), ("b", 2, 2)))
        np.testing.assert_array_equal(pv.segment("b"), [2.0, 3.0])

    def test_from_segments_roundtrip(self, rng):
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=3)
        pv = ParamVector.from_segments([("W", w), ("b", b)])
        np.testing.assert_array_equal(pv.segment("W"), w.ravel())
        np.testing.assert_array_equal(pv.segment("b"), b)


class TestSerialization:
    def test_roundtrip_bit_exact(self, small_net, tmp_path):
        path = tmp_path / "p.bin"
        write_params(small_net.param, path)
        back = read_params(path)
        assert back.layout == small_net.param.layout
        assert np.array_equal(back.values, small_net.param.values)

    def test_known_bytes(self):
        pv = ParamVector(np.array([1.5]), (("w", 0, 1),))
        blob = params_to_bytes(pv)
        assert blob[:6] == b"ANISO1"
        assert blob == (b"ANISO1" + b"\x01\x00\x00\x00" + b"\x01\x00" + b"w"
                        + b"\x00\x00\x00\x00" + b"\x01\x00\x00\x00"
                        + np.array([1.5]).tobytes())

    def test_bad_magic(self):
        with pytest.raises(ParseError) as err:
            params_from_bytes(b"NOPE!!rest")
        assert err.value.offset == 0

    def test_truncated_payload_offset(self, small_net):
        blob = params_to_bytes(small_net.param)
        with pytest.raises(ParseError) as err:
            params_from_bytes(blob[:-8])
        assert err.value.offset is not None
        assert "truncated" in str(err.value)

    @pytest.mark.parametrize("factory", [
        lambda: GaussianEnergy([0.5, -1.0], sigma=0.7),
        lambda: MixtureEnergy([[0.0, 1.0], [2.0, 3.0]], [0.25, 0.75], sigma=2.0),
        lambda: RingsEnergy(radii=(0.4, 1.2), width=0.08),
        lambda: NeuralEnergy(3, hidden=(4,), leak=0.1,
                             init_rng=generator(1, "x")),
    ])
    def test_model_text_roundtrip(self, factory):
        model = factory()
        text = model_to_text(model)
        back = model_from_text(text, params=model.param if len(model.param)
                               else None)
        assert type(back) is type(model)
        assert back.dim == model.dim
        x = np.array([[0.3] * model.dim])
        np.testing.assert_allclose(back.eval_batch(x), model.eval_batch(x),
                                   rtol=1e-15)
