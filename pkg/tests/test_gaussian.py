import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import logsumexp

from cailab.gaussian import (DiagGaussian, GaussMixture, entropy, kl_exact, kl_mixture_lower,
                             kl_mixture_mean, kl_mixture_upper, log_prod_norm,
                             self_mixture_kl_terms)

H1 = 0.5 * np.log(2 * np.pi * np.e)


def rand_gauss(rng, d, spread=2.0):
    return DiagGaussian(rng.normal(0, spread, d), rng.uniform(0.1, 3.0, d))


def rand_mixture(rng, d, b):
    w = rng.dirichlet(np.ones(b))
    w = w / w.sum()
    return GaussMixture(w, tuple(rand_gauss(rng, d) for _ in range(b)))


def mc_kl(f, g, n, rng):
    """Monte Carlo KL(f || g) and its standard error."""
    x = f.sample(n, rng)
    r = f.logpdf(x) - g.logpdf(x)
    return r.mean(), r.std(ddof=1) / np.sqrt(n)


class TestClosedForms:
    def test_entropy_unit(self):
        assert entropy(DiagGaussian([0.0], [1.0])) == pytest.approx(1.418939, abs=1e-6)

    def test_entropy_translation(self):
        assert entropy(DiagGaussian([5.3], [1.0])) == pytest.approx(H1, abs=1e-14)

    def test_entropy_additive(self):
        assert entropy(DiagGaussian([0, 0], [1, 1])) == pytest.approx(2.837877, abs=1e-6)

    def test_kl_identity(self):
        g = DiagGaussian([0.0], [1.0])
        assert kl_exact(g, g) == 0.0

    def test_kl_shift(self):
        assert kl_exact(DiagGaussian([0.0], [1.0]), DiagGaussian([1.0], [1.0])) == pytest.approx(0.5)

    def test_kl_scale(self):
        val = kl_exact(DiagGaussian([0.0], [2.0]), DiagGaussian([0.0], [1.0]))
        assert val == pytest.approx(0.5 * (-1 + np.log(0.5) + 2), abs=1e-12)
        assert val == pytest.approx(0.153426, abs=1e-6)

    def test_kl_dim_mismatch(self):
        with pytest.raises(ValueError):
            kl_exact(DiagGaussian([0.0], [1.0]), DiagGaussian([0.0, 0.0], [1.0, 1.0]))

    def test_log_prod_norm_values(self):
        f = DiagGaussian([0.0], [1.0])
        assert log_prod_norm(f, f) == pytest.approx(-1.265512, abs=1e-6)
        assert log_prod_norm(f, DiagGaussian([3.0], [1.0])) == pytest.approx(-3.515512, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_log_prod_norm_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        f, g = rand_gauss(rng, 1), rand_gauss(rng, 1)
        integrand = lambda x: np.exp(f.logpdf(np.array([x])) + g.logpdf(np.array([x])))  # noqa: E731
        val, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-12)
        assert log_prod_norm(f, g) == pytest.approx(np.log(val), abs=1e-6)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            DiagGaussian([0.0], [0.0])
        with pytest.raises(ValueError):
            DiagGaussian([np.nan], [1.0])
        with pytest.raises(ValueError):
            GaussMixture([0.5, 0.4], (DiagGaussian([0.0], [1.0]), DiagGaussian([1.0], [1.0])))


class TestMixtureBounds:
    def test_identity_lower_nonpositive(self):
        f = DiagGaussian([0.3], [0.7])
        g = GaussMixture([1.0], (f,))
        assert kl_mixture_lower(f, g) <= 0.0
        assert kl_mixture_mean(f, g) == 0.0

    def test_single_component_lower_below_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            d = int(rng.integers(1, 5))
            f, g = rand_gauss(rng, d), rand_gauss(rng, d)
            assert kl_mixture_lower(f, GaussMixture([1.0], (g,))) <= kl_exact(f, g) + 1e-12

    def test_single_component_upper_is_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            d = int(rng.integers(1, 8))
            f, g = rand_gauss(rng, d), rand_gauss(rng, d)
            assert abs(kl_mixture_upper(f, GaussMixture([1.0], (g,))) - kl_exact(f, g)) <= 1e-12

    def test_upper_with_self_component(self):
        rng = np.random.default_rng(3)
        f = rand_gauss(rng, 2)
        others = [rand_gauss(rng, 2) for _ in range(3)]
        w = 0.2
        g = GaussMixture([w, 0.3, 0.3, 0.2], (f, *others))
        assert kl_mixture_upper(f, g) <= -np.log(w) + 1e-12

    def test_mean_shift_example(self):
        f = DiagGaussian([0.0], [1.0])
        g = DiagGaussian([1.0], [1.0])
        lower = -log_prod_norm(f, g) - entropy(f)
        expected = max(0.0, 0.5 * (lower + 0.5))
        assert kl_mixture_mean(f, GaussMixture([1.0], (g,))) == pytest.approx(expected, abs=1e-14)

    @pytest.mark.parametrize("seed", range(3))
    def test_sandwich_vs_monte_carlo(self, seed):
        rng = np.random.default_rng(100 + seed)
        f = rand_gauss(rng, 2)
        g = rand_mixture(rng, 2, 4)
        kl, se = mc_kl(f, g, 200_000, rng)
        assert kl_mixture_lower(f, g) <= kl + 3 * se
        assert kl_mixture_upper(f, g) >= kl - 3 * se

    def test_mean_between_bounds(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            d = int(rng.integers(1, 9))
            f, g = rand_gauss(rng, d), rand_mixture(rng, d, int(rng.integers(1, 10)))
            lo, hi = kl_mixture_lower(f, g), kl_mixture_upper(f, g)
            assert lo <= hi + 1e-12
            assert kl_mixture_mean(f, g) == pytest.approx(max(0.0, 0.5 * (lo + hi)), abs=1e-12)

    def test_underflow_is_stable(self):
        f = DiagGaussian([0.0], [1e-4])
        g = GaussMixture([0.5, 0.5], (DiagGaussian([500.0], [1e-4]), DiagGaussian([-500.0], [1e-4])))
        assert np.isfinite(kl_mixture_lower(f, g))
        assert np.isfinite(kl_mixture_upper(f, g))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 8), b=st.integers(1, 16),
       shift=st.floats(-50, 50))
def test_translation_invariance(seed, d, b, shift):
    rng = np.random.default_rng(seed)
    f, g = rand_gauss(rng, d), rand_mixture(rng, d, b)
    t = np.full(d, shift)
    f2 = DiagGaussian(f.mean + t, f.var)
    g2 = GaussMixture(g.weights, tuple(DiagGaussian(c.mean + t, c.var) for c in g.components))
    for fn in (kl_mixture_lower, kl_mixture_upper, kl_mixture_mean):
        assert fn(f2, g2) == pytest.approx(fn(f, g), abs=1e-7)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 8))
def test_kl_nonnegative_and_entropy_additive(seed, d):
    rng = np.random.default_rng(seed)
    f, g = rand_gauss(rng, d), rand_gauss(rng, d)
    assert kl_exact(f, g) >= 0.0
    assert kl_exact(f, f) == 0.0
    marginals = sum(entropy(DiagGaussian(f.mean[i:i + 1], f.var[i:i + 1])) for i in range(d))
    assert entropy(f) == pytest.approx(marginals, abs=1e-12)


def test_batched_self_mixture_matches_scalar_ops():
    rng = np.random.default_rng(5)
    mu = rng.normal(size=(3, 6, 2))
    var = rng.uniform(0.1, 2.0, size=(3, 6, 2))
    terms = self_mixture_kl_terms(mu, var)
    for n in range(3):
        comps = [DiagGaussian(mu[n, k], var[n, k]) for k in range(6)]
        mix = GaussMixture.uniform(comps)
        for k in range(6):
            assert terms[n, k] == pytest.approx(kl_mixture_mean(comps[k], mix), abs=1e-12)


def test_mixture_logpdf_matches_direct_sum():
    rng = np.random.default_rng(6)
    g = rand_mixture(rng, 3, 5)
    x = rng.normal(size=(10, 3))
    direct = logsumexp([np.log(w) + c.logpdf(x) for w, c in zip(g.weights, g.components)], axis=0)
    np.testing.assert_allclose(g.logpdf(x), direct, atol=1e-12)
