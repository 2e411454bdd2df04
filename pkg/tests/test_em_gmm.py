import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmivae.em_gmm import (
    VAR_FLOOR,
    GmmParams,
    component_logpdf,
    em_e_step,
    em_fit,
    em_m_step,
    gmm_loglik,
    kmeans_pp_init,
)


def naive_loglik(p: GmmParams, x: np.ndarray) -> np.ndarray:
    """Direct density summation, one point and one component at a time."""
    out = np.empty(len(x))
    for n, row in enumerate(x):
        total = 0.0
        for k in range(p.k):
            dens = 1.0
            for d in range(len(row)):
                v = p.variances[k, d]
                dens *= math.exp(-((row[d] - p.means[k, d]) ** 2) / (2 * v)) / math.sqrt(2 * math.pi * v)
            total += p.weights[k] * dens
        out[n] = math.log(total)
    return out


def naive_m_step(resp: np.ndarray, x: np.ndarray):
    """Weighted moments in two explicit passes: means first, then centred squares."""
    n, k = resp.shape
    d = x.shape[1]
    weights, means, variances = np.zeros(k), np.zeros((k, d)), np.zeros((k, d))
    for j in range(k):
        nk = sum(resp[i, j] for i in range(n))
        weights[j] = nk / n
        for c in range(d):
            means[j, c] = sum(resp[i, j] * x[i, c] for i in range(n)) / nk
        for c in range(d):
            variances[j, c] = max(sum(resp[i, j] * (x[i, c] - means[j, c]) ** 2 for i in range(n)) / nk, VAR_FLOOR)
    return weights, means, variances


def random_params(rng, k, d):
    return GmmParams(rng.dirichlet(np.ones(k)), rng.normal(size=(k, d)) * 2, rng.uniform(0.3, 2.0, size=(k, d)))


def blobs(rng, centres, n_per):
    return np.concatenate([c + rng.normal(size=(n_per, len(c))) for c in centres])


class TestParams:
    def test_rejects_off_simplex(self):
        with pytest.raises(ValueError):
            GmmParams([0.6, 0.6], np.zeros((2, 1)), np.ones((2, 1)))

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            GmmParams([1.0], [[0.0]], [[0.0]])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            GmmParams([1.0], [[0.0, 1.0]], [[1.0]])


class TestLoglik:
    def test_standard_normal_at_zero(self):
        p = GmmParams([1.0], [[0.0]], [[1.0]])
        assert gmm_loglik(p, np.array([0.0]))[0] == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
        assert gmm_loglik(p, np.array([0.0]))[0] == pytest.approx(-0.9189, abs=1e-4)

    def test_duplicated_component(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 3))
        mu, var = rng.normal(size=(1, 3)), rng.uniform(0.5, 2, size=(1, 3))
        one = GmmParams([1.0], mu, var)
        two = GmmParams([0.5, 0.5], np.repeat(mu, 2, 0), np.repeat(var, 2, 0))
        np.testing.assert_allclose(gmm_loglik(two, x), gmm_loglik(one, x), atol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_summation(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, 4, 3)
        x = rng.normal(size=(30, 3)) * 2
        np.testing.assert_allclose(gmm_loglik(p, x), naive_loglik(p, x), rtol=0, atol=1e-10)

    def test_far_point_stays_finite(self):
        p = GmmParams([0.5, 0.5], [[0.0], [1.0]], [[1e-4], [1e-4]])
        assert np.isfinite(gmm_loglik(p, np.array([500.0]))[0])

    def test_component_logpdf_shape(self):
        p = random_params(np.random.default_rng(1), 3, 2)
        assert component_logpdf(p, np.zeros((7, 2))).shape == (7, 3)


class TestEStep:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        r = em_e_step(random_params(rng, 5, 2), rng.normal(size=(100, 2)) * 3)
        assert np.all(np.abs(r.sum(1) - 1) < 1e-12)
        assert np.all(r >= 0)

    def test_well_separated_point_is_one_hot(self):
        p = GmmParams([0.5, 0.5], [[0.0, 0.0], [20.0, 0.0]], np.ones((2, 2)))
        r = em_e_step(p, np.array([[20.0, 0.5]]))
        assert r[0, 1] > 1 - 1e-12

    def test_equal_components_give_uniform_rows(self):
        p = GmmParams(np.full(3, 1 / 3), np.zeros((3, 2)), np.ones((3, 2)))
        r = em_e_step(p, np.random.default_rng(3).normal(size=(10, 2)))
        np.testing.assert_allclose(r, 1 / 3, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10**6))
    def test_row_stochastic_property(self, k, d, seed):
        rng = np.random.default_rng(seed)
        r = em_e_step(random_params(rng, k, d), rng.normal(size=(25, d)) * 5)
        assert np.all(np.abs(r.sum(1) - 1) < 1e-12)


class TestMStep:
    def test_one_hot_gives_cluster_moments(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(40, 2))
        labels = np.arange(40) % 3
        p = em_m_step(np.eye(3)[labels], x)
        for j in range(3):
            np.testing.assert_allclose(p.means[j], x[labels == j].mean(0), atol=1e-13)
            np.testing.assert_allclose(p.variances[j], x[labels == j].var(0), atol=1e-13)
        np.testing.assert_allclose(p.weights, np.bincount(labels) / 40, atol=1e-15)

    def test_single_cluster_global_mean(self):
        x = np.random.default_rng(5).normal(size=(50, 3))
        p = em_m_step(np.ones((50, 1)), x)
        np.testing.assert_allclose(p.means[0], x.mean(0), atol=1e-14)
        assert p.weights[0] == 1.0

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_two_pass_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(25, 2)) * 3 + 7
        resp = rng.dirichlet(np.ones(3), size=25)
        p = em_m_step(resp, x)
        w, mu, var = naive_m_step(resp, x)
        np.testing.assert_allclose(p.weights, w, atol=1e-10)
        np.testing.assert_allclose(p.means, mu, atol=1e-10)
        np.testing.assert_allclose(p.variances, var, atol=1e-10)

    def test_variance_floor(self):
        x = np.array([[1.0], [1.0], [5.0]])
        p = em_m_step(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), x)
        assert np.all(p.variances == VAR_FLOOR)

    def test_empty_component_stays_valid(self):
        x = np.random.default_rng(6).normal(size=(10, 2))
        p = em_m_step(np.eye(2)[np.zeros(10, int)], x)
        assert p.weights[1] == 0 and np.all(p.variances > 0)


class TestFit:
    def test_zero_iterations_returns_init(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(30, 2))
        init = random_params(rng, 2, 2)
        p, trace = em_fit(x, 2, iters=0, init=init)
        for a in ("weights", "means", "variances"):
            assert getattr(p, a).tobytes() == getattr(init, a).tobytes()
        assert len(trace) == 1

    def test_zero_iterations_default_init(self):
        x = np.random.default_rng(8).normal(size=(30, 2))
        p, _ = em_fit(x, 3, iters=0, seed=4)
        q = kmeans_pp_init(x, 3, np.random.default_rng(4))
        assert p.means.tobytes() == q.means.tobytes()

    def test_monotone_on_50_datasets(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            k, d = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            truth = random_params(rng, k, d)
            comp = rng.choice(k, size=200, p=truth.weights)
            x = truth.means[comp] + rng.normal(size=(200, d)) * np.sqrt(truth.variances[comp])
            _, trace = em_fit(x, int(rng.integers(1, 5)), iters=30, seed=seed)
            assert np.all(np.diff(trace) >= -1e-9), seed

    def test_recovers_separated_means(self):
        rng = np.random.default_rng(9)
        centres = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        x = blobs(rng, centres, 1000)
        p, _ = em_fit(x, 3, iters=100, seed=0)
        err = min(
            max(np.linalg.norm(p.means[list(perm)] - centres, axis=1))
            for perm in itertools.permutations(range(3))
        )
        assert err < 0.1

    def test_kmeans_pp_rejects_bad_k(self):
        with pytest.raises(ValueError):
            kmeans_pp_init(np.zeros((3, 1)), 4, np.random.default_rng(0))
