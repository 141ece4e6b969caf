import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import logsumexp as scipy_logsumexp
from scipy.stats import norm

from gbi_ppc.errors import CorpusError
from gbi_ppc.model import (
    Corpus,
    ModelConfig,
    ParamState,
    Snippet,
    grad_log_posterior,
    log_likelihood,
    log_posterior_and_grad,
    log_posterior_unnorm,
    log_prior,
    logsumexp,
    sense_posterior,
    sense_posteriors,
    softmax,
)

from conftest import brute_force_likelihood, random_corpus, random_params


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    for c in (-700.0, 0.0, 3.5, 800.0):
        np.testing.assert_allclose(softmax([c, c, c]), [1 / 3] * 3)
    np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)


def test_logsumexp_matches_scipy(rng):
    a = rng.normal(scale=50.0, size=(4, 5, 6))
    a[0, 0, :] = -np.inf
    for axis in (0, 1, -1):
        for keep in (False, True):
            np.testing.assert_allclose(logsumexp(a, axis=axis, keepdims=keep),
                                       scipy_logsumexp(a, axis=axis, keepdims=keep), rtol=1e-13)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax([0.0, np.inf])
    with pytest.raises(ValueError):
        softmax([np.nan])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_simplex_and_argmax(v):
    p = softmax(v)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)
    assert np.argmax(p) == np.argmax(v) or p[np.argmax(v)] == p.max()


def test_corpus_validation_names_snippet():
    with pytest.raises(CorpusError, match="snippet 1"):
        Corpus((Snippet((0,), 0, 0), Snippet((3,), 0, 0)), vocab_size=3)
    with pytest.raises(CorpusError, match="genre"):
        Corpus((Snippet((0,), 1, 0),), vocab_size=3)
    with pytest.raises(CorpusError, match="label"):
        Corpus((Snippet((0,), 0, 0),), vocab_size=3, true_labels=(2,), num_true_senses=2)


def test_log_likelihood_empty_corpus():
    c = Corpus((), vocab_size=3)
    p = ParamState(np.zeros((1, 1, 2)), np.zeros((2, 1, 3)))
    assert log_likelihood(c, p) == 0.0


def test_log_likelihood_single_sense_single_word(rng):
    c = Corpus((Snippet((2,), 0, 0),), vocab_size=4)
    p = ParamState(rng.normal(size=(1, 1, 1)), rng.normal(size=(1, 1, 4)))
    expected = math.log(softmax(p.psi[0, 0])[2])
    assert log_likelihood(c, p) == pytest.approx(expected, rel=1e-14)


def test_log_likelihood_two_senses_matches_enumeration():
    c = Corpus((Snippet((1,), 0, 0),), vocab_size=3)
    phi = np.array([[[0.3, -0.4]]])
    psi = np.array([[[0.1, 0.5, -1.0]], [[1.2, -0.3, 0.0]]])
    p = ParamState(phi, psi)
    f = softmax(phi[0, 0])
    w1, w2 = softmax(psi[0, 0]), softmax(psi[1, 0])
    expected = math.log(f[0] * w1[1] + f[1] * w2[1])
    assert log_likelihood(c, p) == pytest.approx(expected, rel=1e-14)


def test_empty_snippet_contributes_zero(rng):
    c1 = Corpus((Snippet((0, 1), 0, 0),), vocab_size=3)
    c2 = Corpus((Snippet((0, 1), 0, 0), Snippet((), 0, 0)), vocab_size=3)
    p = random_params(rng, c1, 3)
    assert log_likelihood(c2, p) == pytest.approx(log_likelihood(c1, p), abs=1e-14)


def test_log_likelihood_matches_brute_force(rng):
    for _ in range(30):
        D, K, V = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        c = random_corpus(rng, D, V, G=2, T=2, max_len=3)
        p = random_params(rng, c, K)
        expected = brute_force_likelihood(c, p)
        assert math.exp(log_likelihood(c, p)) == pytest.approx(expected, rel=1e-10)


def test_log_likelihood_no_underflow_for_long_snippets(rng):
    c = Corpus((Snippet(tuple([0] * 400), 0, 0),), vocab_size=50)
    p = random_params(rng, c, 2, scale=3.0)
    assert np.isfinite(log_likelihood(c, p))


def test_shift_invariance(rng):
    c = random_corpus(rng, 8, 5, G=2, T=3, max_len=6)
    p = random_params(rng, c, 3)
    base = log_likelihood(c, p)
    phi = p.phi.copy()
    phi[1, 2] += 17.3
    psi = p.psi.copy()
    psi[0, 1] -= 4.2
    assert log_likelihood(c, ParamState(phi, psi)) == pytest.approx(base, abs=1e-9)


def test_shape_mismatch_raises(rng):
    c = random_corpus(rng, 3, 5)
    with pytest.raises(ValueError):
        log_likelihood(c, ParamState(np.zeros((1, 1, 2)), np.zeros((2, 1, 4))))


def test_log_prior_examples(rng):
    cfg = ModelConfig(num_senses=2)
    p = ParamState(np.zeros((1, 2, 2)), np.zeros((2, 2, 3)))
    n = p.size
    base = -(n / 2) * math.log(2 * math.pi)
    assert log_prior(p, cfg) == pytest.approx(base, rel=1e-14)

    cfg2 = ModelConfig(num_senses=2, prior_sd_phi=0.7, prior_sd_psi=1.3)
    p0 = ParamState(np.zeros((1, 2, 2)), np.zeros((2, 2, 3)))
    phi = np.zeros((1, 2, 2))
    phi[0, 1, 0] = 0.7
    assert log_prior(ParamState(phi, p0.psi), cfg2) == pytest.approx(log_prior(p0, cfg2) - 0.5, rel=1e-14)

    q = ParamState(rng.normal(size=(2, 1, 3)), rng.normal(size=(3, 1, 4)))
    oracle = sum(norm.logpdf(x, scale=0.7) for x in q.phi.ravel())
    oracle += sum(norm.logpdf(x, scale=1.3) for x in q.psi.ravel())
    assert log_prior(q, cfg2) == pytest.approx(oracle, rel=1e-12)


def test_log_posterior_lambda_limits(rng):
    cfg = ModelConfig(num_senses=2)
    c = random_corpus(rng, 6, 4, T=2, max_len=5)
    p = random_params(rng, c, 2)
    lp, ll = log_prior(p, cfg), log_likelihood(c, p)
    assert log_posterior_unnorm(c, p, 0.0, cfg) == lp
    assert log_posterior_unnorm(c, p, 1.0, cfg) == pytest.approx(lp + ll, rel=1e-14)
    mid = log_posterior_unnorm(c, p, 0.5, cfg)
    assert mid == pytest.approx(lp + 0.5 * ll, rel=1e-14)
    # affine in lambda
    vals = [log_posterior_unnorm(c, p, lam, cfg) for lam in (0.0, 0.25, 0.5, 0.75, 1.0)]
    assert np.allclose(np.diff(vals), np.diff(vals)[0], rtol=1e-10)
    for bad in (-0.1, 1.01):
        with pytest.raises(ValueError):
            log_posterior_unnorm(c, p, bad, cfg)


def finite_difference_grad(c, p, lam, cfg, h=1e-5):
    theta = p.flat()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        fu = log_posterior_unnorm(c, ParamState.from_flat(up, p.phi.shape, p.psi.shape), lam, cfg)
        fd = log_posterior_unnorm(c, ParamState.from_flat(dn, p.phi.shape, p.psi.shape), lam, cfg)
        grad[i] = (fu - fd) / (2 * h)
    return grad


def test_gradient_prior_only(rng):
    cfg = ModelConfig(num_senses=2, prior_sd_phi=0.5, prior_sd_psi=2.0)
    c = random_corpus(rng, 5, 4, max_len=4)
    p = random_params(rng, c, 2)
    g = grad_log_posterior(c, p, 0.0, cfg)
    np.testing.assert_array_equal(g.phi, -p.phi / 0.25)
    np.testing.assert_array_equal(g.psi, -p.psi / 4.0)


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
def test_gradient_matches_finite_differences(rng, lam):
    cfg = ModelConfig(num_senses=3, prior_sd_phi=0.8, prior_sd_psi=1.5)
    for _ in range(5):
        c = random_corpus(rng, 6, 5, G=2, T=2, max_len=6)
        p = random_params(rng, c, 3)
        analytic = grad_log_posterior(c, p, lam, cfg).flat()
        numeric = finite_difference_grad(c, p, lam, cfg)
        assert np.all(np.abs(analytic - numeric) <= np.maximum(1e-5 * np.abs(numeric), 1e-8))


def test_gradient_value_matches_log_posterior(rng):
    cfg = ModelConfig(num_senses=2)
    c = random_corpus(rng, 7, 4, T=2, max_len=5)
    p = random_params(rng, c, 2)
    val, _ = log_posterior_and_grad(c, p, 0.6, cfg)
    assert val == pytest.approx(log_posterior_unnorm(c, p, 0.6, cfg), rel=1e-13)


def test_gradient_symmetric_senses():
    cfg = ModelConfig(num_senses=3)
    c = Corpus((Snippet((0, 1), 0, 0), Snippet((1, 2, 2), 0, 0)), vocab_size=3)
    p = ParamState(np.full((1, 1, 3), 0.2), np.full((3, 1, 3), -0.4))
    g = grad_log_posterior(c, p, 1.0, cfg)
    np.testing.assert_allclose(g.phi[..., 0], g.phi[..., 1], atol=1e-15)
    np.testing.assert_allclose(g.psi[0], g.psi[2], atol=1e-15)


def test_sense_posterior_examples():
    p = ParamState(np.array([[[0.5, -0.5]]]), np.array([[[0.0, 1.0]], [[1.0, 0.0]]]))
    np.testing.assert_allclose(sense_posterior(Snippet((), 0, 0), p), softmax([0.5, -0.5]), rtol=1e-14)

    p1 = ParamState(np.zeros((1, 1, 1)), np.array([[[0.3, 0.1]]]))
    np.testing.assert_array_equal(sense_posterior(Snippet((0, 1), 0, 0), p1), [1.0])

    f = softmax([0.5, -0.5])
    a, b = softmax([0.0, 1.0])[1], softmax([1.0, 0.0])[1]
    expected = np.array([f[0] * a, f[1] * b]) / (f[0] * a + f[1] * b)
    np.testing.assert_allclose(sense_posterior(Snippet((1,), 0, 0), p), expected, rtol=1e-14)


def test_sense_posteriors_sum_to_one_and_match_responsibilities(rng):
    c = random_corpus(rng, 20, 6, G=2, T=3, max_len=10)
    p = random_params(rng, c, 3)
    r = sense_posteriors(c, p)
    assert np.all(np.abs(r.sum(axis=1) - 1) < 1e-12)
    for d, s in enumerate(c.snippets):
        np.testing.assert_allclose(sense_posterior(s, p), r[d], rtol=1e-12)
    # the phi-gradient at lam=1 with a flat prior direction is sum of responsibilities minus softmax mass
    cfg = ModelConfig(num_senses=3, prior_sd_phi=1e6, prior_sd_psi=1e6)
    g = grad_log_posterior(c, p, 1.0, cfg)
    f = softmax(p.phi, axis=-1)
    for gg in range(2):
        for t in range(3):
            mask = (c.genres == gg) & (c.times == t)
            expected = r[mask].sum(0) - f[gg, t] * mask.sum()
            np.testing.assert_allclose(g.phi[gg, t], expected, atol=1e-9)


def test_permute_senses_leaves_posterior_unchanged(rng):
    cfg = ModelConfig(num_senses=3)
    c = random_corpus(rng, 10, 5, G=2, T=2, max_len=6)
    p = random_params(rng, c, 3)
    q = p.permute_senses([2, 0, 1])
    assert log_posterior_unnorm(c, q, 0.7, cfg) == pytest.approx(log_posterior_unnorm(c, p, 0.7, cfg), rel=1e-13)
