"""Target densities: closed-form values, score consistency, sampling, IO."""

import numpy as np
import pytest

from stadlab.targets import (
    Dataset,
    InvalidTarget,
    conditional_marginal_std,
    load_dataset_binary,
    load_dataset_csv,
    make_conditional_gaussian,
    make_cosmos_like,
    make_gaussian,
    make_gaussian_mixture,
    make_two_moons,
    save_dataset_binary,
    save_dataset_csv,
)

RNG = np.random.default_rng(0)


class TestLogDensity:
    def test_standard_normal_at_origin(self):
        t = make_gaussian([0.0, 0.0], np.eye(2))
        assert t.log_density(np.zeros(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)

    def test_two_component_mixture_at_midpoint(self):
        """Equal-weight N(+-2, 1) at 0: both components contribute
        exp(-2)/sqrt(2 pi), so the mixture value equals one of them."""
        t = make_gaussian_mixture([0.5, 0.5], [[-2.0], [2.0]], [[[1.0]], [[1.0]]])
        expected = np.log(np.exp(-2.0) / np.sqrt(2 * np.pi))
        assert t.log_density(np.array([0.0])) == pytest.approx(expected, abs=1e-12)

    def test_conditional_score_vanishes_at_mean(self):
        maps = RNG.standard_normal((1, 3, 2)) * 0.4
        t = make_conditional_gaussian([1.0], maps, np.zeros((1, 3)), 0.5 * np.ones((1, 3)))
        c = RNG.standard_normal(2)
        np.testing.assert_allclose(t.score(maps[0] @ c, c), 0.0, atol=1e-14)

    def test_grid_normalization_two_moons(self):
        t = make_two_moons()
        xs = np.linspace(-2.5, 3.5, 301)
        ys = np.linspace(-2.0, 2.5, 301)
        XX, YY = np.meshgrid(xs, ys)
        P = np.exp(t.log_density(np.stack([XX.ravel(), YY.ravel()], axis=1))).reshape(XX.shape)
        integral = np.trapezoid(np.trapezoid(P, ys, axis=0), xs)
        assert integral == pytest.approx(1.0, abs=1e-3)


class TestScoreConsistency:
    @pytest.mark.parametrize(
        "factory",
        [
            lambda: make_gaussian([0.2, -0.4], np.array([[1.2, 0.3], [0.3, 0.8]])),
            lambda: make_gaussian_mixture(
                [0.3, 0.7], [[-1.0, 0.0], [1.5, 0.5]], [np.eye(2) * 0.5, np.eye(2) * 1.1]
            ),
            lambda: make_two_moons(),
        ],
    )
    def test_score_equals_log_density_gradient(self, factory):
        target = factory()
        X = RNG.uniform(-2.0, 2.5, size=(200, 2))
        S = target.score(X)
        h = 1e-6
        for j in range(2):
            Xp, Xm = X.copy(), X.copy()
            Xp[:, j] += h
            Xm[:, j] -= h
            fd = (target.log_density(Xp) - target.log_density(Xm)) / (2 * h)
            scale = max(1.0, np.max(np.abs(S[:, j])))
            assert np.max(np.abs(S[:, j] - fd)) / scale <= 1e-6

    def test_conditional_score_consistency(self):
        target, _ = make_cosmos_like(seed=3, n_samples=10)
        C = RNG.standard_normal((50, target.context_dim))
        X = RNG.standard_normal((50, target.dim))
        S = target.score(X, C)
        h = 1e-6
        for j in range(0, target.dim, 7):
            Xp, Xm = X.copy(), X.copy()
            Xp[:, j] += h
            Xm[:, j] -= h
            fd = (target.log_density(Xp, C) - target.log_density(Xm, C)) / (2 * h)
            scale = max(1.0, np.max(np.abs(S[:, j])))
            assert np.max(np.abs(S[:, j] - fd)) / scale <= 1e-6


class TestSampling:
    def test_mixture_moments_within_monte_carlo_error(self):
        w = [0.3, 0.7]
        means = np.array([[-1.0, 0.0], [2.0, 1.0]])
        t = make_gaussian_mixture(w, means, [np.eye(2) * 0.5, np.eye(2) * 1.5])
        ds = t.sample(100_000, seed=3)
        mean_th = w[0] * means[0] + w[1] * means[1]
        # variance of the mixture per coordinate (law of total variance)
        ex2 = w[0] * (0.5 + means[0] ** 2) + w[1] * (1.5 + means[1] ** 2)
        var_th = ex2 - mean_th ** 2
        se = np.sqrt(var_th / ds.n)
        assert np.all(np.abs(ds.samples.mean(axis=0) - mean_th) <= 3 * se)

    def test_seed_determinism(self):
        t = make_gaussian([0.0], [[1.0]])
        a = t.sample(100, seed=9).samples
        b = t.sample(100, seed=9).samples
        assert np.array_equal(a, b)

    def test_conditional_needs_contexts(self):
        target, _ = make_cosmos_like(seed=0, n_samples=10)
        with pytest.raises(InvalidTarget):
            target.sample(5, seed=0)


class TestCosmosLike:
    def test_marginal_std_matches_law_of_total_variance(self):
        target, data = make_cosmos_like(seed=1, n_samples=40_000)
        assert data.dim == 26 and data.context_dim == 26
        std_th = conditional_marginal_std(target)
        rel = np.abs(data.samples.std(axis=0) - std_th) / std_th
        assert np.max(rel) < 0.05

    def test_component_mode_dominates_three_sigma_shell(self):
        target, data = make_cosmos_like(seed=1, n_samples=100)
        c = data.contexts[0]
        mu = target.context_maps[0] @ c + target.means[0]
        shell = mu + 3.0 * np.sqrt(target.diag_vars[0])
        assert target.log_density(mu, c) > target.log_density(shell, c)

    def test_bit_identical_datasets_across_runs(self):
        _, a = make_cosmos_like(seed=4, n_samples=500)
        _, b = make_cosmos_like(seed=4, n_samples=500)
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.contexts, b.contexts)


class TestNormalizationAndIO:
    def test_normalized_statistics(self):
        t = make_gaussian_mixture([0.5, 0.5], [[-2.0, 1.0], [2.0, -1.0]], [np.eye(2), np.eye(2)])
        ds = t.sample(5000, seed=0).normalized()
        np.testing.assert_allclose(ds.samples.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(ds.samples.std(axis=0), 1.0, atol=1e-12)

    def test_zero_variance_rejected(self):
        ds = Dataset(samples=np.ones((50, 2)))
        with pytest.raises(InvalidTarget):
            ds.normalized()

    def test_csv_roundtrip(self, tmp_path):
        target, data = make_cosmos_like(seed=2, n_samples=40)
        path = tmp_path / "ds.csv"
        save_dataset_csv(data, path)
        back = load_dataset_csv(path)
        assert np.array_equal(back.samples, data.samples)
        assert np.array_equal(back.contexts, data.contexts)

    def test_binary_roundtrip(self, tmp_path):
        t = make_gaussian([0.0, 1.0], np.eye(2))
        data = t.sample(64, seed=5)
        path = tmp_path / "ds.bin"
        save_dataset_binary(data, path)
        back = load_dataset_binary(path)
        assert np.array_equal(back.samples, data.samples)
        assert back.contexts is None
