import numpy as np
import pytest

from hbe.core import (
    DegradedPatch,
    FactorizationError,
    GaussianModel,
    HyperpriorParams,
    NumericalError,
    compute_gain,
    minimize_f,
    objective_f,
    objective_terms,
    update_mean,
    update_patches,
    update_precision,
)

from oracles import (
    hand_objective,
    joint_quadratic_minimizer,
    random_spd,
    symmetric_fd_gradient,
)


def scalar_hyper(mu0=5.0, sigma0=1.0, kappa=1.0, nu=2.0):
    return HyperpriorParams(mu0=[mu0], sigma0=[[sigma0]], kappa=kappa, nu=nu)


def random_group(rng, n, m, mask_p=0.5, noise_scale=1.0):
    group = []
    for _ in range(m):
        mask = (rng.random(n) >= mask_p).astype(float)
        var = rng.uniform(0.5, 1.5, n) * noise_scale
        z = np.where(mask == 0, 0.0, rng.normal(0, 3, n))
        group.append(DegradedPatch(z, mask, var))
    return group


def as_tuples(group):
    return [(p.observed, p.mask, p.noise_var) for p in group]


class TestObjective:
    def test_all_terms_zero_but_trace(self):
        group = [DegradedPatch([5.0], [1.0], [1.0])]
        model = GaussianModel([5.0], [[1.0]])
        f = objective_f(group, [np.array([5.0])], model, scalar_hyper())
        assert f == pytest.approx(1.0, abs=1e-15)

    def test_data_term_counts(self):
        group = [DegradedPatch([7.0], [1.0], [1.0])]
        model = GaussianModel([5.0], [[1.0]])
        f = objective_f(group, [np.array([5.0])], model, scalar_hyper())
        assert f == pytest.approx(3.0, abs=1e-15)

    def test_matches_hand_evaluation(self):
        rng = np.random.default_rng(7)
        for scale in (0.1, 1.0, 10.0):  # flips the sign of the log-det term
            n, m = 3, 4
            group = random_group(rng, n, m)
            patches = [rng.normal(0, 2, n) for _ in range(m)]
            lam = random_spd(rng, n) * scale
            mu = rng.normal(0, 2, n)
            mu0 = rng.normal(0, 2, n)
            sigma0 = random_spd(rng, n)
            kappa, nu = 1.7, n + 2.5
            model = GaussianModel(mu, lam)
            hyper = HyperpriorParams(mu0, sigma0, kappa, nu)
            f = objective_f(group, patches, model, hyper)
            expected = hand_objective(
                as_tuples(group), patches, mu, lam, mu0, sigma0, kappa, nu
            )
            assert np.isfinite(f)
            assert f == pytest.approx(expected, rel=1e-12)

    def test_data_term_sums_over_all_patches(self):
        # two identical patches must double the data term of one
        p = DegradedPatch([7.0], [1.0], [1.0])
        model = GaussianModel([5.0], [[1.0]])
        hyper = scalar_hyper(nu=3.0)
        one = objective_terms([p], [np.array([5.0])], model, scalar_hyper())[0]
        two = objective_terms(
            [p, p], [np.array([5.0])] * 2, model, hyper
        )[0]
        assert two == pytest.approx(2 * one)

    def test_rejects_indefinite_precision(self):
        group = [DegradedPatch([1.0, 1.0], [1, 1], [1, 1])]
        model = GaussianModel([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])
        hyper = HyperpriorParams([0.0, 0.0], np.eye(2), 1.0, 3.0)
        with pytest.raises(ValueError):
            objective_f(group, [np.zeros(2)], model, hyper)

    def test_rejects_dimension_mismatch(self):
        group = [DegradedPatch([1.0], [1.0], [1.0])]
        model = GaussianModel([0.0, 0.0], np.eye(2))
        hyper = HyperpriorParams([0.0, 0.0], np.eye(2), 1.0, 3.0)
        with pytest.raises(ValueError):
            objective_f(group, [np.zeros(2)], model, hyper)


class TestComputeGain:
    def test_scalar_closed_form(self):
        for lam, var in [(2.0, 0.5), (0.3, 4.0), (1.0, 1.0)]:
            a = compute_gain([[lam]], [1.0], [var])
            expected = (1 / lam) / ((1 / lam) + var)
            assert a[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_masked_coordinate_gets_zero_gain(self):
        var = 0.7
        a = compute_gain(np.eye(2), [1.0, 0.0], [var, var])
        expected = np.array([[1 / (1 + var), 0.0], [0.0, 0.0]])
        np.testing.assert_allclose(a, expected, atol=1e-14)

    def test_zero_noise_limit_is_identity(self):
        rng = np.random.default_rng(3)
        lam = random_spd(rng, 4)
        a = compute_gain(lam, np.ones(4), np.full(4, 1e-12))
        np.testing.assert_allclose(a, np.eye(4), atol=1e-6)

    def test_masked_columns_exactly_zero(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            n = 6
            lam = random_spd(rng, n, 0.2, 5.0)
            mask = (rng.random(n) > 0.5).astype(float)
            a = compute_gain(lam, mask, rng.uniform(0.1, 2.0, n))
            for j in np.flatnonzero(mask == 0):
                assert np.all(a[:, j] == 0.0)

    def test_gain_identity_isotropic(self):
        # full mask, Sigma_N = s2*I, Lambda = l*I -> A = 1/(1 + l*s2) * I
        lam, s2, n = 0.8, 2.5, 5
        a = compute_gain(lam * np.eye(n), np.ones(n), np.full(n, s2))
        np.testing.assert_allclose(a, np.eye(n) / (1 + lam * s2), rtol=1e-12)

    def test_general_fractional_mask_agrees_with_dense_formula(self):
        rng = np.random.default_rng(5)
        n = 4
        lam = random_spd(rng, n)
        mask = rng.uniform(0.1, 0.9, n)
        var = rng.uniform(0.5, 1.5, n)
        a = compute_gain(lam, mask, var)
        s = np.linalg.inv(lam)
        d = np.diag(mask)
        expected = s @ d @ np.linalg.inv(d @ s @ d + np.diag(var))
        np.testing.assert_allclose(a, expected, rtol=1e-10)

    def test_indefinite_input_raises_with_pivot(self):
        bad = np.array([[1.0, 0.0], [0.0, -1.0]])
        with pytest.raises(FactorizationError) as exc:
            compute_gain(bad, [1.0, 1.0], [1.0, 1.0])
        assert exc.value.pivot == 2


class TestUpdateMeanAndPatches:
    def test_prior_dominated_limit(self):
        rng = np.random.default_rng(2)
        n, m = 3, 4
        group = random_group(rng, n, m, mask_p=0.3)
        mu0 = rng.normal(0, 2, n)
        hyper = HyperpriorParams(mu0, np.eye(n), kappa=1e12, nu=n + 1.0)
        gains = [compute_gain(np.eye(n), p.mask, p.noise_var) for p in group]
        mu = update_mean(group, gains, hyper)
        np.testing.assert_allclose(mu, mu0, rtol=1e-6)

    def test_empty_group_returns_prior_mean_exactly(self):
        mu0 = np.array([1.5, -2.25])
        hyper = HyperpriorParams(mu0, np.eye(2), kappa=0.7, nu=3.0)
        mu = update_mean([], [], hyper)
        assert np.array_equal(mu, mu0)

    def test_matches_joint_quadratic_oracle(self):
        rng = np.random.default_rng(9)
        for trial in range(10):
            n, m = 2, 2
            lam = random_spd(rng, n, 0.3, 3.0)
            group = random_group(rng, n, m)
            mu0 = rng.normal(0, 1, n)
            kappa = rng.uniform(0.5, 3.0)
            hyper = HyperpriorParams(mu0, np.eye(n), kappa=kappa, nu=n + 1.0)
            gains = [compute_gain(lam, p.mask, p.noise_var) for p in group]
            mu = update_mean(group, gains, hyper)
            cs = update_patches(group, gains, mu)
            cs_ref, mu_ref = joint_quadratic_minimizer(as_tuples(group), lam, mu0, kappa)
            np.testing.assert_allclose(mu, mu_ref, rtol=1e-8, atol=1e-10)
            for c, c_ref in zip(cs, cs_ref):
                np.testing.assert_allclose(c, c_ref, rtol=1e-8, atol=1e-10)

    def test_noiseless_full_mask_interpolates_data(self):
        rng = np.random.default_rng(4)
        n = 4
        lam = random_spd(rng, n)
        z = rng.normal(0, 2, n)
        p = DegradedPatch(z, np.ones(n), np.full(n, 1e-12))
        gains = [compute_gain(lam, p.mask, p.noise_var)]
        c = update_patches([p], gains, np.zeros(n))[0]
        np.testing.assert_allclose(c, z, atol=1e-6)

    def test_fully_masked_patch_returns_mean_exactly(self):
        n = 3
        p = DegradedPatch(np.zeros(n), np.zeros(n), np.ones(n))
        gains = [compute_gain(np.eye(n), p.mask, p.noise_var)]
        mu = np.array([1.0, 2.0, 3.0])
        c = update_patches([p], gains, mu)[0]
        assert np.array_equal(c, mu)

    def test_correlated_masked_coordinate_follows_oracle(self):
        # off-diagonal precision pulls the hidden coordinate away from the mean
        lam = np.array([[1.0, 0.5], [0.5, 1.0]])
        z = np.array([4.0, 0.0])
        p = DegradedPatch(z, [1.0, 0.0], [0.25, 1.0])
        mu0 = np.zeros(2)
        hyper = HyperpriorParams(mu0, np.eye(2), kappa=1.0, nu=3.0)
        gains = [compute_gain(lam, p.mask, p.noise_var)]
        mu = update_mean([p], gains, hyper)
        c = update_patches([p], gains, mu)[0]
        cs_ref, mu_ref = joint_quadratic_minimizer(
            [(z, p.mask, p.noise_var)], lam, mu0, 1.0
        )
        np.testing.assert_allclose(mu, mu_ref, rtol=1e-8)
        np.testing.assert_allclose(c, cs_ref[0], rtol=1e-8)
        assert c[1] != pytest.approx(mu[1])  # correlation moved it off the mean


class TestUpdatePrecision:
    def test_scalar_hand_value(self):
        hyper = scalar_hyper(mu0=2.0, sigma0=1.0, kappa=1.0, nu=2.0)
        lam = update_precision([np.array([2.0])], np.array([2.0]), hyper)
        assert lam[0, 0] == pytest.approx(1.0, rel=1e-12)

    def test_empty_group_pure_prior(self):
        rng = np.random.default_rng(6)
        n = 3
        sigma0 = random_spd(rng, n)
        mu0 = rng.normal(0, 1, n)
        hyper = HyperpriorParams(mu0, sigma0, kappa=1.0, nu=n + 2.0)
        lam = update_precision([], mu0, hyper)
        expected = np.linalg.inv(hyper.nu * sigma0 / (hyper.nu - n))
        np.testing.assert_allclose(lam, expected, rtol=1e-9)

    def test_stationarity_of_objective(self):
        rng = np.random.default_rng(8)
        n, m = 3, 5
        group = random_group(rng, n, m)
        patches = [rng.normal(0, 2, n) for _ in range(m)]
        mu = rng.normal(0, 1, n)
        hyper = HyperpriorParams(
            rng.normal(0, 1, n), random_spd(rng, n), kappa=1.3, nu=n + 2.0
        )
        lam_hat = update_precision(patches, mu, hyper)

        def f_of_lam(lam):
            return objective_f(group, patches, GaussianModel(mu, lam), hyper)

        grad = symmetric_fd_gradient(f_of_lam, lam_hat)
        fval = abs(f_of_lam(lam_hat))
        assert np.abs(grad).max() <= 1e-5 * (1 + fval)

    def test_requires_positive_degrees_of_freedom(self):
        hyper = HyperpriorParams(np.zeros(3), np.eye(3), kappa=1.0, nu=2.5)
        with pytest.raises(ValueError):
            update_precision([], np.zeros(3), hyper)  # nu + 0 - 3 < 0

    def test_spd_on_many_random_instances(self):
        rng = np.random.default_rng(123)
        for _ in range(1000):
            n = int(rng.integers(1, 5))
            m = int(rng.integers(0, 7))
            hyper = HyperpriorParams(
                rng.normal(0, 1, n),
                random_spd(rng, n, 0.1, 4.0),
                kappa=float(rng.uniform(0.1, 10)),
                nu=n - 0.5 + float(rng.uniform(0.6, 5)),  # nu > n - 1
            )
            if hyper.nu + m - n <= 0:
                continue
            patches = [rng.normal(0, 3, n) for _ in range(m)]
            lam = update_precision(patches, rng.normal(0, 1, n), hyper)
            np.linalg.cholesky(lam)  # must not raise


class TestMinimizeF:
    def test_single_iteration_trace_length(self):
        rng = np.random.default_rng(1)
        group = random_group(rng, 3, 2)
        hyper = HyperpriorParams(np.zeros(3), np.eye(3), kappa=2.0, nu=5.0)
        sol = minimize_f(group, hyper, max_iters=1, rel_tol=0.0)
        assert sol.iterations == 1
        assert len(sol.objective_trace) == 1

    def test_descent_and_partial_optimality(self):
        rng = np.random.default_rng(42)
        n, m = 4, 6
        group = random_group(rng, n, m, mask_p=0.5)
        sigma0 = random_spd(rng, n)
        alpha = 3.0 / m  # kappa = nu - n = 3
        hyper = HyperpriorParams(
            rng.normal(0, 1, n), sigma0, kappa=m * alpha, nu=m * alpha + n
        )
        # rel_tol=0 runs to the fixed point, where the returned (patches, mean)
        # are the exact quadratic minimizer at the returned precision
        sol = minimize_f(group, hyper, max_iters=120, rel_tol=0.0)
        tr = sol.objective_trace
        assert np.all(np.diff(tr) <= 1e-9 * np.abs(tr[:-1]))
        cs_ref, mu_ref = joint_quadratic_minimizer(
            as_tuples(group), sol.model.precision, hyper.mu0, hyper.kappa
        )
        np.testing.assert_allclose(sol.model.mean, mu_ref, rtol=1e-8, atol=1e-10)
        for c, c_ref in zip(sol.patches, cs_ref):
            np.testing.assert_allclose(c, c_ref, rtol=1e-8, atol=1e-10)

    def test_noiseless_full_mask_recovers_observations(self):
        rng = np.random.default_rng(21)
        n, m = 4, 3
        group = [
            DegradedPatch(rng.normal(0, 5, n), np.ones(n), np.full(n, 1e-10))
            for _ in range(m)
        ]
        hyper = HyperpriorParams(
            rng.normal(0, 5, n), random_spd(rng, n), kappa=5.0, nu=n + 3.0
        )
        sol = minimize_f(group, hyper, max_iters=10)
        for p, c in zip(group, sol.patches):
            np.testing.assert_allclose(c, p.observed, atol=1e-6)

    def test_early_stopping(self):
        rng = np.random.default_rng(33)
        group = random_group(rng, 3, 4)
        hyper = HyperpriorParams(np.zeros(3), np.eye(3), kappa=4.0, nu=7.0)
        sol = minimize_f(group, hyper, max_iters=50, rel_tol=1e-6)
        assert sol.iterations < 50  # converges in a few sweeps

    def test_coercivity_smoke(self):
        # scaling any block of variables far from a random point increases f
        rng = np.random.default_rng(55)
        n, m = 3, 3
        group = random_group(rng, n, m)
        hyper = HyperpriorParams(
            rng.normal(0, 1, n), random_spd(rng, n), kappa=1.0, nu=n + 2.0
        )
        patches = [rng.normal(0, 1, n) for _ in range(m)]
        mu = rng.normal(0, 1, n)
        lam = random_spd(rng, n)
        t = 1e3
        base = objective_f(group, patches, GaussianModel(mu, lam), hyper)
        scaled_c = objective_f(
            group, [t * c for c in patches], GaussianModel(mu, lam), hyper
        )
        scaled_mu = objective_f(group, patches, GaussianModel(t * mu, lam), hyper)
        scaled_lam = objective_f(group, patches, GaussianModel(mu, t * lam), hyper)
        assert scaled_c > base and scaled_mu > base and scaled_lam > base

    def test_nan_aborts_with_diagnostics(self):
        p = DegradedPatch([np.nan], [1.0], [1.0])
        hyper = scalar_hyper()
        with pytest.raises(NumericalError) as exc:
            minimize_f([p], hyper, max_iters=3)
        assert "iteration" in str(exc.value)
