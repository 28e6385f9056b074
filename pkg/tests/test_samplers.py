import math

import numpy as np
import pytest

from anisoebm.energy import GaussianEnergy, MixtureEnergy
from anisoebm.errors import ConfigError, DivergenceError
from anisoebm.samplers import (ChainEnsemble, SamplerConfig, SamplerKind,
                               StepsizeMode, StepsizeRefresh,
                               anisotropic_stepsize, gd_step, hamiltonian,
                               hmc_step, leapfrog, mala_step,
                               refresh_stepsizes, run_chain, rwmh_step,
                               stanley_step, ula_step, write_trajectory_csv)


def make_ens(states, seed=0):
    return ChainEnsemble.create(np.atleast_2d(np.asarray(states, float)),
                                seed=seed)


def long_run_moments(model, cfg, steps, burn, n_chains=10, seed=0, dim=1):
    ens = make_ens(np.zeros((n_chains, dim)), seed=seed)
    acc = {"s": 0.0, "ss": 0.0, "n": 0}

    def hook(k, e):
        if k > burn:
            acc["s"] += e.states.sum()
            acc["ss"] += (e.states ** 2).sum()
            acc["n"] += e.states.size

    run_chain(model, ens, cfg, steps, hook=hook)
    mean = acc["s"] / acc["n"]
    return mean, acc["ss"] / acc["n"] - mean ** 2, ens


class TestAnisotropicStepsize:
    def test_formula_fixtures(self):
        np.testing.assert_allclose(anisotropic_stepsize([0.5], 0.01), [0.02])
        np.testing.assert_allclose(anisotropic_stepsize([0.005], 0.01), [1.0])
        np.testing.assert_allclose(anisotropic_stepsize([0.01, -0.02], 0.01),
                                   [1.0, 0.5])

    def test_range_property_random_gradients(self, rng):
        grads = rng.standard_cauchy(size=(10000, 3)) * 10.0 ** rng.integers(
            -6, 6, size=(10000, 1))
        th = 0.01
        gamma = anisotropic_stepsize(grads, th)
        assert np.all(gamma > 0.0)
        assert np.all(gamma <= 1.0)
        # gamma hits 1 exactly iff the gradient entry is within the threshold
        np.testing.assert_array_equal(gamma == 1.0, np.abs(grads) <= th)

    def test_nonfinite_gradient_raises(self):
        with pytest.raises(DivergenceError):
            anisotropic_stepsize([1.0, np.inf], 0.01)

    def test_refresh_carries_chain_index(self):
        class BadGrad(GaussianEnergy):
            def grad_x_batch(self, x):
                g = super().grad_x_batch(x)
                g[1] = np.nan
                return g

        model = BadGrad([0.0, 0.0])
        ens = make_ens(np.zeros((3, 2)))
        with pytest.raises(DivergenceError) as err:
            refresh_stepsizes(model, ens, SamplerConfig())
        assert err.value.chain == 1

    def test_scalar_mode_uses_gradient_norm(self):
        model = GaussianEnergy([0.0, 0.0])
        ens = make_ens([[3.0, 4.0]])
        cfg = SamplerConfig(th=1.0, stepsize_mode=StepsizeMode.SCALAR)
        refresh_stepsizes(model, ens, cfg)
        np.testing.assert_allclose(ens.stepsizes, 1.0 / 5.0)


class TestStanleyStep:
    def test_fixed_point_at_mode_without_noise(self):
        model = GaussianEnergy([1.5, -0.5])
        ens = make_ens([[1.5, -0.5]])
        cfg = SamplerConfig(kind=SamplerKind.STANLEY, eps=0.0)
        stanley_step(model, ens, cfg)
        np.testing.assert_array_equal(ens.states, [[1.5, -0.5]])

    def test_one_dim_update_law(self):
        # f = -z^2/2, gamma=0.1, eps=1: z' = 0.95 z + sqrt(0.1) xi.
        model = GaussianEnergy([0.0])
        ens = make_ens([[2.0]], seed=123)
        xi = ens.noise_rngs[0].standard_normal(1)[0]
        ens2 = make_ens([[2.0]], seed=123)
        ens2.stepsizes[:] = 0.1
        stanley_step(model, ens2, SamplerConfig(kind=SamplerKind.STANLEY, eps=1.0))
        assert ens2.states[0, 0] == 0.95 * 2.0 + math.sqrt(0.1) * xi

    def test_long_run_variance_matches_ar1_fixed_point(self):
        model = GaussianEnergy([0.0])
        cfg = SamplerConfig(kind=SamplerKind.STANLEY, th=1e9, eps=1.0,
                            stepsize_refresh=StepsizeRefresh.PER_STEP)
        # th huge on bounded gradients keeps gamma pinned at... 1; instead
        # pin the anisotropic stepsizes by hand to 0.1 via a frozen refresh.
        ens = make_ens(np.zeros((10, 1)), seed=5)
        ens.stepsizes[:] = 0.1
        acc = {"ss": 0.0, "n": 0}

        def hook(k, e):
            if k > 1000:
                acc["ss"] += (e.states ** 2).sum()
                acc["n"] += e.states.size

        cfg = SamplerConfig(kind=SamplerKind.STANLEY, eps=1.0,
                            stepsize_refresh=StepsizeRefresh.PER_OUTER)
        run_chain(model, ens, cfg, 60000, hook=hook)
        var = acc["ss"] / acc["n"]
        assert var == pytest.approx(1.0 / (1.0 - 0.1 / 4.0), rel=0.02)


class TestUlaStep:
    def test_gamma_zero_is_identity_on_states(self):
        model = GaussianEnergy([0.0, 0.0])
        ens = make_ens([[1.0, 2.0], [3.0, -4.0]])
        ula_step(model, ens, SamplerConfig(kind=SamplerKind.ULA, gamma=0.0))
        np.testing.assert_array_equal(ens.states, [[1.0, 2.0], [3.0, -4.0]])

    def test_eps_zero_equals_gd_step(self):
        model = GaussianEnergy([0.5])
        a = make_ens([[2.0], [-1.0]], seed=9)
        b = a.clone()
        cfg_ula = SamplerConfig(kind=SamplerKind.ULA, gamma=0.3, eps=0.0)
        cfg_gd = SamplerConfig(kind=SamplerKind.GD, gamma=0.3)
        ula_step(model, a, cfg_ula)
        gd_step(model, b, cfg_gd)
        np.testing.assert_array_equal(a.states, b.states)

    @pytest.mark.parametrize("gamma", [0.05, 0.1, 0.2])
    def test_stationary_variance_bias_law(self, gamma):
        model = GaussianEnergy([0.0])
        cfg = SamplerConfig(kind=SamplerKind.ULA, gamma=gamma, eps=1.0)
        _, var, _ = long_run_moments(model, cfg, 40000, 1000, seed=31)
        assert var == pytest.approx(1.0 / (1.0 - gamma / 4.0), rel=0.02)


class TestMalaStep:
    def test_always_accepts_self_proposal(self):
        # sigma = 0 random walk proposes the current state: alpha = 1.
        model = GaussianEnergy([0.0])
        ens = make_ens([[1.0], [2.0], [3.0]])
        rwmh_step(model, ens, SamplerConfig(kind=SamplerKind.RWMH,
                                            rwmh_sigma=0.0))
        assert ens.accept_counts.sum() == 3
        np.testing.assert_array_equal(ens.states.ravel(), [1.0, 2.0, 3.0])

    def test_uphill_symmetric_proposals_always_accepted(self):
        # Monotone 1-D energy: proposals that increase f have rho >= 1.
        model = GaussianEnergy([0.0])
        for seed in range(5):
            ens = make_ens([[4.0]], seed=seed)
            before = ens.states.copy()
            rwmh_step(model, ens, SamplerConfig(kind=SamplerKind.RWMH,
                                                rwmh_sigma=0.5))
            moved_up = abs(ens.states[0, 0]) < abs(before[0, 0])
            accepted = ens.accept_counts[0] == 1
            if moved_up:
                assert accepted

    def test_long_run_moments_exact(self):
        model = GaussianEnergy([0.0])
        cfg = SamplerConfig(kind=SamplerKind.MALA, gamma=0.5)
        mean, var, _ = long_run_moments(model, cfg, 30000, 500, seed=3)
        assert mean == pytest.approx(0.0, abs=0.02)
        assert var == pytest.approx(1.0, rel=0.02)

    def test_anisotropic_variant_is_exact_too(self):
        model = GaussianEnergy([0.0, 0.0])
        cfg = SamplerConfig(kind=SamplerKind.MALA, mala_anisotropic=True,
                            th=0.5, eps=1.0)
        _, var, ens = long_run_moments(model, cfg, 20000, 500, seed=13, dim=2)
        assert var == pytest.approx(1.0, rel=0.03)
        assert 0.0 < ens.accept_rate() <= 1.0


class TestRwmh:
    def test_constant_energy_accepts_everything(self):
        model = GaussianEnergy([0.0], sigma=1e12)  # effectively flat inside box
        ens = make_ens(np.zeros((5, 1)))
        run_chain(model, ens, SamplerConfig(kind=SamplerKind.RWMH,
                                            rwmh_sigma=0.3), 50)
        assert ens.accept_counts.sum() == 250

    def test_long_run_variance(self):
        model = GaussianEnergy([0.0])
        cfg = SamplerConfig(kind=SamplerKind.RWMH, rwmh_sigma=2.4)
        _, var, _ = long_run_moments(model, cfg, 30000, 500, seed=21)
        assert var == pytest.approx(1.0, rel=0.02)


class TestHmc:
    def test_zero_stepsize_keeps_state_and_accepts(self):
        model = GaussianEnergy([0.0])
        ens = make_ens([[2.0], [-1.0]])
        hmc_step(model, ens, SamplerConfig(kind=SamplerKind.HMC, hmc_step=0.0,
                                           hmc_leapfrog=5))
        np.testing.assert_array_equal(ens.states.ravel(), [2.0, -1.0])
        assert ens.accept_counts.sum() == 2

    def test_leapfrog_energy_error_order(self, rng):
        # Harmonic oscillator: |dH| stays tiny at step 1e-3 over 10 steps.
        model = GaussianEnergy([0.0])
        z = rng.normal(size=(6, 1))
        p = rng.normal(size=(6, 1))
        h0 = hamiltonian(model, z, p)
        z1, p1 = leapfrog(model, z, p, 1e-3, 10)
        h1 = hamiltonian(model, z1, p1)
        assert np.max(np.abs(h1 - h0)) < 1e-4

    def test_long_run_variance(self):
        model = GaussianEnergy([0.0])
        cfg = SamplerConfig(kind=SamplerKind.HMC, hmc_step=0.1,
                            hmc_leapfrog=20)
        _, var, _ = long_run_moments(model, cfg, 8000, 200, seed=17)
        assert var == pytest.approx(1.0, rel=0.02)


class TestGd:
    def test_contraction_monotone(self):
        model = GaussianEnergy([2.0])
        ens = make_ens([[10.0]])
        cfg = SamplerConfig(kind=SamplerKind.GD, gamma=1.5)
        dist = abs(ens.states[0, 0] - 2.0)
        for _ in range(40):
            gd_step(model, ens, cfg)
            new = abs(ens.states[0, 0] - 2.0)
            assert new < dist or new == 0.0
            dist = new

    def test_mode_is_fixed_point(self):
        model = GaussianEnergy([0.7, -0.3])
        ens = make_ens([[0.7, -0.3]])
        gd_step(model, ens, SamplerConfig(kind=SamplerKind.GD, gamma=0.5))
        np.testing.assert_array_equal(ens.states, [[0.7, -0.3]])

    def test_closed_form_three_steps(self):
        model = GaussianEnergy([0.0])
        ens = make_ens([[1.0]])
        cfg = SamplerConfig(kind=SamplerKind.GD, gamma=0.5)
        for _ in range(3):
            gd_step(model, ens, cfg)
        assert ens.states[0, 0] == 0.75 ** 3


class TestRunChain:
    def test_zero_steps_returns_input_unchanged(self):
        model = GaussianEnergy([0.0])
        ens = make_ens([[1.0]])
        before = ens.states.copy()
        out = run_chain(model, ens, SamplerConfig(kind=SamplerKind.ULA), 0)
        assert out is ens
        np.testing.assert_array_equal(ens.states, before)

    @pytest.mark.parametrize("kind,extra", [
        (SamplerKind.ULA, {"gamma": 0.2}),
        (SamplerKind.STANLEY, {"stepsize_refresh": StepsizeRefresh.PER_STEP}),
        (SamplerKind.MALA, {"gamma": 0.5}),
        (SamplerKind.RWMH, {"rwmh_sigma": 1.0}),
        (SamplerKind.HMC, {"hmc_step": 0.2, "hmc_leapfrog": 3}),
        (SamplerKind.GD, {"gamma": 0.1}),
    ])
    def test_composition(self, kind, extra):
        model = GaussianEnergy([0.0, 0.0])
        cfg = SamplerConfig(kind=kind, **extra)
        a = make_ens([[1.0, -1.0], [0.5, 2.0]], seed=8)
        b = a.clone()
        run_chain(model, a, cfg, 23)
        run_chain(model, a, cfg, 17)
        run_chain(model, b, cfg, 40)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.accept_counts, b.accept_counts)

    @pytest.mark.parametrize("kind,step_fn,extra", [
        (SamplerKind.ULA, ula_step, {"gamma": 0.2}),
        (SamplerKind.MALA, mala_step, {"gamma": 0.5}),
        (SamplerKind.RWMH, rwmh_step, {"rwmh_sigma": 0.8}),
        (SamplerKind.HMC, hmc_step, {"hmc_step": 0.15, "hmc_leapfrog": 4}),
    ])
    def test_run_chain_equals_repeated_steps(self, kind, step_fn, extra):
        model = MixtureEnergy([[-1.0], [1.0]], [0.5, 0.5], sigma=0.8)
        cfg = SamplerConfig(kind=kind, **extra)
        a = make_ens([[0.3], [-0.7], [1.2]], seed=41)
        b = a.clone()
        run_chain(model, a, cfg, 31)
        for _ in range(31):
            step_fn(model, b, cfg)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.accept_counts, b.accept_counts)

    def test_per_step_refresh_equals_manual_refresh_loop(self):
        model = GaussianEnergy([0.0, 0.0])
        cfg = SamplerConfig(kind=SamplerKind.STANLEY, th=0.05, eps=0.5,
                            stepsize_refresh=StepsizeRefresh.PER_STEP)
        a = make_ens([[2.0, -3.0]], seed=6)
        b = a.clone()
        run_chain(model, a, cfg, 19)
        for _ in range(19):
            refresh_stepsizes(model, b, cfg)
            stanley_step(model, b, cfg)
        np.testing.assert_array_equal(a.states, b.states)

    def test_per_outer_leaves_stepsizes_frozen(self):
        model = GaussianEnergy([0.0, 0.0])
        cfg = SamplerConfig(kind=SamplerKind.STANLEY, th=0.05,
                            stepsize_refresh=StepsizeRefresh.PER_OUTER)
        ens = make_ens([[2.0, -3.0]], seed=6)
        refresh_stepsizes(model, ens, cfg)
        frozen = ens.stepsizes.copy()
        run_chain(model, ens, cfg, 7)
        np.testing.assert_array_equal(ens.stepsizes, frozen)

    def test_reproducible_bit_exact(self):
        model = GaussianEnergy([0.0, 0.0])
        cfg = SamplerConfig(kind=SamplerKind.STANLEY, th=0.01,
                            stepsize_refresh=StepsizeRefresh.PER_STEP)
        runs = []
        for _ in range(2):
            ens = make_ens(np.full((5, 2), 0.2), seed=77)
            run_chain(model, ens, cfg, 100)
            runs.append(ens.states.copy())
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_ablation_stanley_th_inf_equals_ula_gamma_one(self):
        # On a standard Gaussian the chain stays in a region with gradients
        # far below 1e3, so every coordinate clamps to gamma = 1 exactly.
        model = GaussianEnergy([0.0, 0.0], sigma=1.0)
        cfg_st = SamplerConfig(kind=SamplerKind.STANLEY, th=1e9, eps=0.7,
                               stepsize_refresh=StepsizeRefresh.PER_STEP)
        cfg_ula = SamplerConfig(kind=SamplerKind.ULA, gamma=1.0, eps=0.7)
        a = make_ens(np.full((4, 2), 0.5), seed=55)
        b = a.clone()
        run_chain(model, a, cfg_st, 150)
        run_chain(model, b, cfg_ula, 150)
        np.testing.assert_array_equal(a.states, b.states)

    def test_divergence_error_carries_step_index(self):
        class Exploding(GaussianEnergy):
            def grad_x_batch(self, x):
                return np.exp(np.abs(x) * 400.0)  # overflows quickly

        model = Exploding([0.0])
        ens = make_ens([[1.0]], seed=1)
        cfg = SamplerConfig(kind=SamplerKind.ULA, gamma=1.0)
        with pytest.raises(DivergenceError) as err:
            run_chain(model, ens, cfg, 50)
        assert err.value.chain == 0
        assert err.value.step is not None

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            SamplerConfig(th=0.0).validate()
        with pytest.raises(ConfigError):
            SamplerConfig(K=0).validate()
        with pytest.raises(ConfigError):
            SamplerConfig(kind=SamplerKind.MALA, eps=0.0).validate()


class TestTrajectoryExport:
    def test_long_format_columns(self, tmp_path):
        path = tmp_path / "traj.csv"
        snaps = [(0, np.array([[1.0, 2.0]])), (1, np.array([[3.0, 4.0]]))]
        write_trajectory_csv(path, snaps)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,chain,coord,value"
        assert lines[1] == "0,0,0,1"
        assert lines[4] == "1,0,1,4"
