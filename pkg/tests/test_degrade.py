import numpy as np
import pytest

from hbe.degrade import (
    MaskSpec,
    NoiseModel,
    apply_noise,
    build_problem,
    make_mask,
    make_texture,
)


class TestMakeMask:
    def test_rho_zero_all_ones(self):
        m = make_mask(MaskSpec.random_uniform(0.0, seed=1), 5, 4)
        np.testing.assert_array_equal(m, np.ones((4, 5)))

    def test_zoom_lattice(self):
        m = make_mask(MaskSpec.zoom(2), 4, 4)
        expected = np.zeros((4, 4))
        for t, l in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            expected[t, l] = 1.0
        np.testing.assert_array_equal(m, expected)

    def test_exact_count_and_determinism(self):
        spec = MaskSpec.random_uniform(0.7, seed=99)
        m1 = make_mask(spec, 100, 100)
        m2 = make_mask(spec, 100, 100)
        assert int((m1 == 0).sum()) == 7000
        np.testing.assert_array_equal(m1, m2)
        m3 = make_mask(MaskSpec.random_uniform(0.7, seed=100), 100, 100)
        assert not np.array_equal(m1, m3)

    def test_rho_one_rejected(self):
        with pytest.raises(ValueError):
            MaskSpec.random_uniform(1.0)


class TestApplyNoise:
    def test_tiny_variance_near_identity(self):
        clean = np.linspace(0, 255, 64 * 64).reshape(64, 64)
        noisy, var = apply_noise(clean, NoiseModel.constant(1e-6), seed=0)
        assert np.abs(noisy - clean).max() < 0.01
        np.testing.assert_array_equal(var, np.full(clean.shape, 1e-6))

    def test_constant_variance_statistics(self):
        clean = np.full((512, 512), 128.0)
        noisy, var = apply_noise(clean, NoiseModel.constant(10.0), seed=7)
        emp = float(np.var(noisy - clean))
        assert emp == pytest.approx(10.0, rel=0.05)

    def test_affine_variance_recovered_by_regression(self):
        rng = np.random.default_rng(0)
        clean = rng.uniform(20, 200, (400, 400))
        a, b = 0.87, 30.0
        noisy, var = apply_noise(clean, NoiseModel.affine_signal(a, b), seed=3)
        np.testing.assert_allclose(var, a * clean + b)
        # bin pixels by clean value, regress empirical variance on bin mean
        bins = np.linspace(20, 200, 16)
        idx = np.digitize(clean.ravel(), bins)
        r = (noisy - clean).ravel()
        means, variances = [], []
        for k in range(1, 16):
            sel = idx == k
            if sel.sum() > 500:
                means.append(clean.ravel()[sel].mean())
                variances.append(r[sel].var())
        slope, intercept = np.polyfit(means, variances, 1)
        assert slope == pytest.approx(a, rel=0.10)
        assert intercept == pytest.approx(b, rel=0.10, abs=3.0)

    def test_zero_mean_in_expectation(self):
        clean = np.full((1024, 1024), 90.0)
        noisy, _ = apply_noise(clean, NoiseModel.constant(25.0), seed=11)
        resid = noisy - clean
        stderr = 5.0 / np.sqrt(resid.size)
        assert abs(resid.mean()) < 3 * stderr


class TestBuildProblem:
    def test_identity_problem(self):
        clean = np.arange(12.0).reshape(3, 4)
        prob, gt = build_problem(
            clean, MaskSpec.random_uniform(0.0), NoiseModel.constant(0.0), seed=0
        )
        np.testing.assert_array_equal(prob.observed, clean)
        np.testing.assert_array_equal(gt, clean)
        assert np.all(prob.noise_var > 0)

    def test_masked_positions_zeroed(self):
        clean = np.full((20, 20), 100.0)
        spec = MaskSpec.random_uniform(0.5, seed=4)
        prob, _ = build_problem(clean, spec, NoiseModel.constant(1.0), seed=5)
        holes = prob.mask == 0
        assert holes.sum() == 200
        assert np.all(prob.observed[holes] == 0.0)
        assert np.all(prob.noise_var[holes] == 1.0)
        assert np.all(prob.observed[~holes] != 0.0)

    def test_poison_mode(self):
        clean = np.full((10, 10), 50.0)
        prob, _ = build_problem(
            clean,
            MaskSpec.random_uniform(0.3, seed=1),
            NoiseModel.constant(1.0),
            seed=2,
            poison=True,
        )
        assert np.all(np.isnan(prob.observed[prob.mask == 0]))
        assert np.all(np.isfinite(prob.observed[prob.mask == 1]))


class TestTextures:
    def test_known_kinds_and_range(self):
        for kind in ("stripes", "checker", "filtered-noise", "edge", "scene"):
            img = make_texture(kind, 32, 48, seed=1)
            assert img.shape == (32, 48)
            assert np.all(np.isfinite(img))
            assert img.min() >= 0.0 and img.max() <= 255.0

    def test_deterministic(self):
        a = make_texture("filtered-noise", 24, 24, seed=9)
        b = make_texture("filtered-noise", 24, 24, seed=9)
        np.testing.assert_array_equal(a, b)
