import numpy as np
import pytest
from hypothesis import given, strategies as st

from ambifilter.errors import InvalidArgumentError, MissingFeatureError
from ambifilter.model import (ModelSpec, NoiseBundle, apply_generator,
                              build_time_grid, evolve_observation,
                              evolve_signal, evolve_weight,
                              girsanov_log_density, sample_noise,
                              simulate_bundle)
from ambifilter.policies import (constant_policy, mixture_policy,
                                 time_table_policy, zero_policy)
from ambifilter.presets import make_coef, poly_fn

from conftest import mc_se


def model_of(b, sigma, h, f, x0=0.0, T=1.0, k=0.0):
    return ModelSpec(b=b, sigma=sigma, h=h, f=f, x0=x0, T=T, k=k)


CONST = make_coef("constant", 0.0)


class TestTimeGrid:
    def test_quarters(self):
        g = build_time_grid(1.0, 4)
        np.testing.assert_allclose(g.times, [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_single_step(self):
        g = build_time_grid(1.0, 1)
        np.testing.assert_allclose(g.times, [0.0, 1.0])

    def test_dt(self):
        assert build_time_grid(2.0, 50).dt == pytest.approx(0.04)

    @pytest.mark.parametrize("T,n", [(0.0, 4), (-1.0, 4), (1.0, 0)])
    def test_invalid(self, T, n):
        with pytest.raises(InvalidArgumentError):
            build_time_grid(T, n)


class TestSampleNoise:
    def test_deterministic(self):
        g = build_time_grid(1.0, 20)
        a = sample_noise(g, 7, seed=3)
        b = sample_noise(g, 7, seed=3)
        assert np.array_equal(a.dW, b.dW) and np.array_equal(a.dB, b.dB)

    def test_per_path_keying(self):
        g = build_time_grid(1.0, 10)
        full = sample_noise(g, 20, seed=3)
        part = sample_noise(g, 2, seed=3, path_ids=np.array([5, 17]))
        np.testing.assert_array_equal(part.dW[0], full.dW[5])
        np.testing.assert_array_equal(part.dB[1], full.dB[17])

    def test_moments(self):
        g = build_time_grid(1.0, 100)
        nb = sample_noise(g, 1000, seed=11)   # 1e5 increments per channel
        se = np.sqrt(g.dt / nb.dW.size)
        assert abs(nb.dW.mean()) < 4 * se
        corr = np.corrcoef(nb.dW.ravel(), nb.dB.ravel())[0, 1]
        assert abs(corr) < 4 / np.sqrt(nb.dW.size)


class TestEvolveSignal:
    def test_frozen_dynamics(self):
        m = model_of(CONST, make_coef("constant", 0.0), CONST, CONST, x0=1.3)
        g = build_time_grid(1.0, 8)
        X = evolve_signal(m, zero_policy(), sample_noise(g, 5, 1), g)
        assert np.all(X == 1.3)

    def test_deterministic_drift(self):
        m = model_of(make_coef("constant", 0.5), make_coef("constant", 0.0),
                     CONST, CONST, x0=2.0)
        g = build_time_grid(1.0, 10)
        X = evolve_signal(m, zero_policy(), sample_noise(g, 3, 1), g)
        np.testing.assert_allclose(X[:, -1], 2.5, rtol=1e-12)

    def test_ou_mean(self):
        # dX = -X dt + dW from 2: E X_1 = 2 / e
        m = model_of(make_coef("linear", 0.0, -1.0), make_coef("constant", 1.0),
                     CONST, CONST, x0=2.0)
        g = build_time_grid(1.0, 100)
        X = evolve_signal(m, zero_policy(), sample_noise(g, 10_000, 5), g)
        target = 2.0 * np.exp(-1.0)
        assert abs(X[:, -1].mean() - target) < 3 * mc_se(X[:, -1])

    def test_missing_feature(self, tanh_model):
        from ambifilter.features import RegressionBasis, fit_ridge
        from ambifilter.policies import sign_of_regression_policy
        basis = RegressionBasis("poly_xm", 1)
        F = basis.design({"x": np.arange(30.0), "m": np.ones(30)})
        tab = fit_ridge(F, np.ones(30), 1e-6)
        pol = sign_of_regression_policy([tab] * 11, basis, 0.25, 0.1)
        g = build_time_grid(1.0, 10)
        with pytest.raises(MissingFeatureError):
            evolve_signal(tanh_model, pol, sample_noise(g, 3, 1), g)

    def test_policy_radius_guard(self, tanh_model):
        g = build_time_grid(1.0, 10)
        with pytest.raises(InvalidArgumentError):
            evolve_signal(tanh_model, constant_policy(0.5, radius=0.5),
                          sample_noise(g, 2, 1), g)


class TestEvolveObservation:
    def test_zero_sensor(self, tanh_model):
        g = build_time_grid(1.0, 20)
        nb = sample_noise(g, 4, 2)
        m = model_of(tanh_model.b, tanh_model.sigma, CONST, tanh_model.f)
        X = evolve_signal(m, zero_policy(), nb, g)
        Y = evolve_observation(m, X, nb)
        np.testing.assert_array_equal(Y[:, 1:], np.cumsum(nb.dB, axis=1))

    def test_constant_sensor(self):
        c = 0.7
        m = model_of(CONST, make_coef("constant", 1.0), make_coef("constant", c), CONST)
        g = build_time_grid(1.0, 25)
        nb = sample_noise(g, 4, 2)
        X = evolve_signal(m, zero_policy(), nb, g)
        Y = evolve_observation(m, X, nb, "P")
        B_T = nb.dB.sum(axis=1)
        np.testing.assert_allclose(Y[:, -1] - B_T, c * 1.0, rtol=1e-10)

    def test_qtilde_quadratic_variation(self, tanh_model):
        g = build_time_grid(1.0, 50)   # dt = 0.02
        nb = sample_noise(g, 400, 9)
        X = evolve_signal(tanh_model, zero_policy(), nb, g)
        Y = evolve_observation(tanh_model, X, nb, "Q_tilde")
        qv = (np.diff(Y, axis=1) ** 2).sum(axis=1)
        assert abs(qv.mean() - 1.0) < 0.05


class TestEvolveWeight:
    def test_zero_sensor_unit_weight(self, tanh_model):
        m = model_of(tanh_model.b, tanh_model.sigma, CONST, tanh_model.f)
        g = build_time_grid(1.0, 20)
        nb = sample_noise(g, 4, 3)
        X = evolve_signal(m, zero_policy(), nb, g)
        Y = evolve_observation(m, X, nb, "Q_tilde")
        assert np.all(evolve_weight(m, X, Y, g) == 1.0)

    def test_single_step_value(self):
        # h(X_0) = 1, dY = 0.1, dt = 0.04 -> M = exp(0.1 - 0.02)
        m = model_of(CONST, make_coef("constant", 0.0),
                     make_coef("constant", 1.0), CONST, x0=0.0, T=0.04)
        g = build_time_grid(0.04, 1)
        X = np.zeros((1, 2))
        Y = np.array([[0.0, 0.1]])
        M = evolve_weight(m, X, Y, g)
        assert M[0, 1] == pytest.approx(np.exp(0.1 - 0.02), rel=1e-14)

    def test_martingale_under_qtilde(self, tanh_model, grid50):
        bundle = simulate_bundle(tanh_model, zero_policy(), grid50, 10_000, 21,
                                 measure="Q_tilde")
        MT = bundle.M[:, -1]
        assert abs(MT.mean() - 1.0) < 3 * mc_se(MT)
        assert np.all(bundle.M > 0)


class TestGirsanovLogDensity:
    def test_zero_policy(self, tanh_model, grid50):
        nb = sample_noise(grid50, 6, 4)
        X = evolve_signal(tanh_model, zero_policy(), nb, grid50)
        logL = girsanov_log_density(zero_policy(), X, nb.dW, grid50)
        assert np.all(logL == 0.0)

    def test_constant_policy_recomputation(self, tanh_model, grid50):
        k = 0.25
        nb = sample_noise(grid50, 6, 4)
        X = evolve_signal(tanh_model, zero_policy(), nb, grid50)
        logL = girsanov_log_density(constant_policy(k), X, nb.dW, grid50)
        # independent recomputation from the stored increments
        W_T = nb.dW.sum(axis=1)
        np.testing.assert_allclose(logL[:, -1], k * W_T - 0.5 * k * k, rtol=1e-10)

    def test_density_normalization(self, tanh_model, grid50):
        bundle = simulate_bundle(tanh_model, constant_policy(0.25), grid50,
                                 10_000, 8, measure="P")
        lam = np.exp(bundle.log_density[:, -1])
        assert np.all(lam > 0)
        assert abs(lam.mean() - 1.0) < 3 * mc_se(lam)


class TestApplyGenerator:
    def test_linear_test_function(self, tanh_model):
        x, theta = 0.4, 0.1
        got = apply_generator(tanh_model, theta, poly_fn(0.0, 1.0), x)
        want = float(tanh_model.b.value(x)) + float(tanh_model.sigma.value(x)) * theta
        assert got == pytest.approx(want, rel=1e-12)

    def test_constant_test_function(self, tanh_model):
        assert apply_generator(tanh_model, 0.3, poly_fn(5.0), 1.1) == 0.0

    def test_quadratic(self):
        m = model_of(make_coef("constant", 1.0), make_coef("constant", 2.0),
                     CONST, CONST)
        got = apply_generator(m, 0.5, poly_fn(0.0, 0.0, 1.0), 3.0)
        assert got == pytest.approx(16.0, rel=1e-12)


class TestMeasureConsistency:
    def test_qtilde_weighting_matches_base(self, tanh_model, grid50):
        # same W noise: E_P[phi(X_T)] = E~[M_T phi(X_T)] within 3 SE
        bP = simulate_bundle(tanh_model, zero_policy(), grid50, 8000, 33, measure="P")
        bQt = simulate_bundle(tanh_model, zero_policy(), grid50, 8000, 33,
                              measure="Q_tilde")
        np.testing.assert_array_equal(bP.X, bQt.X)  # same drift, same W noise
        phi = np.tanh(bP.X[:, -1])
        weighted = bQt.M[:, -1] * phi
        se = np.sqrt(mc_se(weighted) ** 2 + mc_se(phi) ** 2)
        assert abs(weighted.mean() - phi.mean()) < 3 * se

    def test_girsanov_change_of_measure(self, tanh_model, grid50):
        # E_P[Lambda_T phi(X_T)] = E_Q[phi(X_T)] within 3 SE, same noise
        pol = constant_policy(0.25)
        bP = simulate_bundle(tanh_model, pol, grid50, 8000, 34, measure="P")
        bQ = simulate_bundle(tanh_model, pol, grid50, 8000, 34, measure="Q")
        lhs = np.exp(bP.log_density[:, -1]) * np.tanh(bP.X[:, -1])
        rhs = np.tanh(bQ.X[:, -1])
        se = np.sqrt(mc_se(lhs) ** 2 + mc_se(rhs) ** 2)
        assert abs(lhs.mean() - rhs.mean()) < 3 * se


class TestStrongConvergence:
    def test_halved_dt_moves_less_than_se(self):
        # refine on a shared Brownian path: coarse increments are sums of
        # fine ones, so the difference is pure discretization bias
        m = model_of(make_coef("linear", 0.0, -1.0), make_coef("constant", 1.0),
                     CONST, CONST, x0=2.0)
        g_f = build_time_grid(1.0, 100)
        nb_f = sample_noise(g_f, 10_000, 6)
        g_c = build_time_grid(1.0, 50)
        nb_c = NoiseBundle(dW=nb_f.dW.reshape(10_000, 50, 2).sum(axis=2),
                           dB=nb_f.dB.reshape(10_000, 50, 2).sum(axis=2),
                           seed=6, path_ids=nb_f.path_ids, dt=g_c.dt)
        Xf = evolve_signal(m, zero_policy(), nb_f, g_f)
        Xc = evolve_signal(m, zero_policy(), nb_c, g_c)
        assert abs(Xf[:, -1].mean() - Xc[:, -1].mean()) < mc_se(Xf[:, -1])


class TestDeterminismAndClamping:
    def test_simulate_bundle_bit_identical(self, tanh_model, grid50):
        a = simulate_bundle(tanh_model, constant_policy(0.2), grid50, 50, 12,
                            measure="Q_tilde")
        b = simulate_bundle(tanh_model, constant_policy(0.2), grid50, 50, 12,
                            measure="Q_tilde")
        for fa, fb in ((a.X, b.X), (a.Y, b.Y), (a.M, b.M),
                       (a.log_density, b.log_density)):
            assert np.array_equal(fa, fb)

    def test_bundle_initial_values(self, tanh_model, grid50):
        for measure in ("P", "Q", "Q_tilde"):
            bundle = simulate_bundle(tanh_model, constant_policy(0.2), grid50,
                                     20, 13, measure=measure)
            assert np.all(bundle.X[:, 0] == tanh_model.x0)
            assert np.all(bundle.Y[:, 0] == 0.0)
            assert np.all(bundle.M[:, 0] == 1.0)
            assert np.all(bundle.log_density[:, 0] == 0.0)
            assert np.all(bundle.M > 0.0)

    @given(st.floats(0.0, 0.5), st.lists(st.floats(-5.0, 5.0), min_size=1,
                                          max_size=6),
           st.floats(-3.0, 3.0))
    def test_policy_always_clamped(self, k, table, x):
        pol = time_table_policy(table, 1.0, radius=k)
        vals = pol.evaluate(0.3, {"x": np.array([x])})
        assert np.all(np.abs(vals) <= k + 1e-15)

    @given(st.floats(0.01, 0.4), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
    def test_mixture_clamped(self, k, a, b):
        mix = mixture_policy([(0.7, constant_policy(a, radius=abs(a))),
                              (0.6, constant_policy(b, radius=abs(b)))], radius=k)
        vals = mix.evaluate(0.1, {"x": np.linspace(-2, 2, 9)})
        assert np.all(np.abs(vals) <= k + 1e-15)


class TestModelSpecValidation:
    def test_sigma_must_be_nonnegative(self):
        with pytest.raises(InvalidArgumentError):
            model_of(CONST, make_coef("linear", 0.0, 1.0), CONST, CONST)

    def test_h1_flags(self, tanh_model, linear_model):
        assert tanh_model.h1_compliant and not tanh_model.oracle_only
        assert linear_model.oracle_only and not linear_model.h1_compliant

    def test_f_sup(self, tanh_model, linear_model):
        assert tanh_model.f_sup == pytest.approx(1.0)
        assert np.isinf(linear_model.f_sup)
