import itertools
import sys

import numpy as np
import pytest

from gbi_ppc import diagnostics
from gbi_ppc.model import Corpus, ParamState, Snippet


def random_corpus(rng, D, V, G=1, T=1, max_len=4, min_len=0, K_true=None):
    snippets = []
    for _ in range(D):
        n = int(rng.integers(min_len, max_len + 1))
        snippets.append(Snippet(tuple(rng.integers(0, V, size=n).tolist()),
                                int(rng.integers(0, G)), int(rng.integers(0, T))))
    labels = None
    if K_true is not None:
        labels = tuple(rng.integers(0, K_true, size=D).tolist())
    return Corpus(tuple(snippets), V, G, T, labels, K_true)


def random_params(rng, corpus, K, scale=1.0):
    G, T, V = corpus.num_genres, corpus.num_times, corpus.vocab_size
    return ParamState(scale * rng.normal(size=(G, T, K)), scale * rng.normal(size=(K, T, V)))


def brute_force_likelihood(corpus, params):
    """p(W) by summing over every joint sense assignment, in probability space."""
    phi = np.exp(params.phi) / np.exp(params.phi).sum(-1, keepdims=True)
    psi = np.exp(params.psi) / np.exp(params.psi).sum(-1, keepdims=True)
    K = params.num_senses
    total = 0.0
    for z in itertools.product(range(K), repeat=len(corpus)):
        p = 1.0
        for s, k in zip(corpus.snippets, z):
            p *= phi[s.genre, s.time, k]
            for w in s.words:
                p *= psi[k, s.time, w]
        total += p
    return total


def binary_corpus(n0, n1, D=30):
    """K=1, V=2 instance with n0 zeros and n1 ones spread over D snippets."""
    words = [0] * n0 + [1] * n1
    snippets = [Snippet(tuple(words[d::D]), 0, 0) for d in range(D)]
    return Corpus(tuple(snippets), vocab_size=2)


def contrast_moments_by_quadrature(n0, n1, lam, sd=1.0, points=2000):
    """Posterior mean/sd of c = psi_1 - psi_0; prior c ~ N(0, 2 sd^2)."""
    grid = np.linspace(-12, 12, points)
    log_sig1 = -np.logaddexp(0.0, -grid)
    log_sig0 = -np.logaddexp(0.0, grid)
    logp = -grid**2 / (4 * sd**2) + lam * (n1 * log_sig1 + n0 * log_sig0)
    w = np.exp(logp - logp.max())
    w /= w.sum()
    mean = float(np.sum(w * grid))
    return mean, float(np.sqrt(np.sum(w * (grid - mean) ** 2)))


def mc_standard_errors(x, chain_ids):
    chains = np.array([x[chain_ids == c] for c in np.unique(chain_ids)])
    ess = diagnostics.effective_sample_size(chains)
    sd = x.std()
    dev2 = (x - x.mean()) ** 2
    ess2 = diagnostics.effective_sample_size(np.array([dev2[chain_ids == c] for c in np.unique(chain_ids)]))
    se_mean = sd / np.sqrt(ess)
    se_sd = np.sqrt(dev2.var() / ess2) / (2 * sd)
    return se_mean, se_sd


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(results):
        terminalreporter.write_line(results[criterion])
