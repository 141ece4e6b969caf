"""Latent-sense multinomial mixture with genre/time covariates.

Each snippet ``d`` has a sense ``z_d`` drawn from the prevalence simplex
``softmax(phi[genre_d, time_d])``; its words are i.i.d. draws from
``softmax(psi[z_d, time_d])``. The sense is summed out, so the likelihood
of a corpus is

    sum_d log sum_k phi~[g_d, t_d, k] * prod_{w in W_d} psi~[k, t_d, w]

and the tempered target is ``log_prior + lam * log_likelihood``.

Indices are 0-based in memory. Files use 1-based ids (see :mod:`gbi_ppc.data`).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import sparse
from .errors import ConfigError, CorpusError

_LOG_2PI = float(np.log(2.0 * np.pi))
DENSE_LIMIT = 4_000_000


def logsumexp(a: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    # scipy.special.logsumexp costs ~30us per call in dispatch; this sits on the HMC hot path.
    m = np.max(a, axis=axis, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    with np.errstate(divide="ignore"):  # an all -inf slice gives -inf
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class Snippet:
    """One context window: word ids plus its genre and time covariates."""

    words: tuple[int, ...]
    genre: int
    time: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "words", tuple(int(w) for w in self.words))
        object.__setattr__(self, "genre", int(self.genre))
        object.__setattr__(self, "time", int(self.time))


@dataclass(frozen=True)
class Corpus:
    """Observed snippets for a single target word.

    Validation runs on construction; a malformed corpus raises
    :class:`~gbi_ppc.errors.CorpusError` naming the offending snippet.
    """

    snippets: tuple[Snippet, ...]
    vocab_size: int
    num_genres: int = 1
    num_times: int = 1
    true_labels: tuple[int, ...] | None = None
    num_true_senses: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "snippets", tuple(self.snippets))
        if self.true_labels is not None:
            object.__setattr__(self, "true_labels", tuple(int(o) for o in self.true_labels))
        self._validate()

    def _validate(self) -> None:
        for name in ("vocab_size", "num_genres", "num_times"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise CorpusError(f"{name} must be a positive integer, got {value!r}")
        V, G, T = self.vocab_size, self.num_genres, self.num_times
        for d, s in enumerate(self.snippets):
            if not 0 <= s.genre < G:
                raise CorpusError(f"snippet {d}: field 'genre' out of range ({s.genre + 1} not in 1..{G})")
            if not 0 <= s.time < T:
                raise CorpusError(f"snippet {d}: field 'time' out of range ({s.time + 1} not in 1..{T})")
            for w in s.words:
                if not 0 <= w < V:
                    raise CorpusError(f"snippet {d}: field 'words' has id {w + 1} outside 1..{V}")
        if self.true_labels is not None:
            if self.num_true_senses is None or self.num_true_senses < 1:
                raise CorpusError("num_true_senses must be a positive integer when labels are given")
            if len(self.true_labels) != len(self.snippets):
                raise CorpusError(
                    f"true_labels has length {len(self.true_labels)}, expected {len(self.snippets)}"
                )
            for d, o in enumerate(self.true_labels):
                if not 0 <= o < self.num_true_senses:
                    raise CorpusError(
                        f"snippet {d}: field 'label' out of range ({o + 1} not in 1..{self.num_true_senses})"
                    )

    def __len__(self) -> int:
        return len(self.snippets)

    @property
    def has_labels(self) -> bool:
        return self.true_labels is not None

    # Flat token arrays for vectorised likelihood evaluation.
    @cached_property
    def genres(self) -> np.ndarray:
        return np.array([s.genre for s in self.snippets], dtype=np.intp)

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.snippets], dtype=np.intp)

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([len(s.words) for s in self.snippets], dtype=np.intp)

    @cached_property
    def token_doc(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.snippets), dtype=np.intp), self.lengths)

    @cached_property
    def token_word(self) -> np.ndarray:
        if not self.snippets:
            return np.zeros(0, dtype=np.intp)
        return np.fromiter(
            (w for s in self.snippets for w in s.words), dtype=np.intp, count=int(self.lengths.sum())
        )

    @cached_property
    def slot_counts(self):
        """Counts of each (time, word) slot per snippet, a (D, T*V) matrix.

        Dense below ``DENSE_LIMIT`` entries (numpy matmul beats scipy.sparse
        dispatch at desk scale), sparse CSR above it.
        """
        D, TV = len(self.snippets), self.num_times * self.vocab_size
        slot = self.times[self.token_doc] * self.vocab_size + self.token_word
        m = sparse.csr_matrix((np.ones(slot.size), (self.token_doc, slot)), shape=(D, TV))
        m.sum_duplicates()
        return m.toarray() if D * TV <= DENSE_LIMIT else m

    @cached_property
    def slot_counts_t(self):
        m = self.slot_counts
        return np.ascontiguousarray(m.T) if isinstance(m, np.ndarray) else m.T.tocsr()

    @cached_property
    def cell_indicator_t(self) -> np.ndarray:
        """(G*T, D) indicator of each snippet's (genre, time) cell."""
        D, GT = len(self.snippets), self.num_genres * self.num_times
        m = np.zeros((GT, D))
        m[self.genres * self.num_times + self.times, np.arange(D)] = 1.0
        return m

    def with_words(self, token_word: np.ndarray) -> "Corpus":
        """Same covariates and snippet lengths, new words (flat, snippet-major)."""
        token_word = np.asarray(token_word, dtype=np.intp)
        if token_word.shape != self.token_word.shape:
            raise CorpusError("replacement word array does not match snippet lengths")
        bounds = np.concatenate(([0], np.cumsum(self.lengths)))
        snippets = tuple(
            Snippet(tuple(token_word[bounds[d]:bounds[d + 1]].tolist()), s.genre, s.time)
            for d, s in enumerate(self.snippets)
        )
        return Corpus(snippets, self.vocab_size, self.num_genres, self.num_times,
                      self.true_labels, self.num_true_senses)


@dataclass(frozen=True)
class ModelConfig:
    num_senses: int = 2
    prior_sd_phi: float = 1.0
    prior_sd_psi: float = 1.0

    def __post_init__(self) -> None:
        if int(self.num_senses) != self.num_senses or self.num_senses < 1:
            raise ConfigError(f"num_senses must be a positive integer, got {self.num_senses!r}")
        if not self.prior_sd_phi > 0:
            raise ConfigError(f"prior_sd_phi must be positive, got {self.prior_sd_phi!r}")
        if not self.prior_sd_psi > 0:
            raise ConfigError(f"prior_sd_psi must be positive, got {self.prior_sd_psi!r}")


@dataclass(frozen=True, eq=False)
class ParamState:
    """Unconstrained logits: ``phi`` is (G, T, K), ``psi`` is (K, T, V)."""

    phi: np.ndarray
    psi: np.ndarray

    def __post_init__(self) -> None:
        phi = np.asarray(self.phi, dtype=float)
        psi = np.asarray(self.psi, dtype=float)
        if phi.ndim != 3 or psi.ndim != 3:
            raise ValueError(f"phi and psi must be 3-d, got shapes {phi.shape} and {psi.shape}")
        if phi.shape[2] != psi.shape[0] or phi.shape[1] != psi.shape[1]:
            raise ValueError(f"inconsistent shapes phi {phi.shape}, psi {psi.shape}")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "psi", psi)

    @property
    def num_senses(self) -> int:
        return self.phi.shape[2]

    @property
    def size(self) -> int:
        return self.phi.size + self.psi.size

    def flat(self) -> np.ndarray:
        return np.concatenate((self.phi.ravel(), self.psi.ravel()))

    @classmethod
    def from_flat(cls, theta: np.ndarray, phi_shape: tuple, psi_shape: tuple) -> "ParamState":
        n_phi = int(np.prod(phi_shape))
        return cls(theta[:n_phi].reshape(phi_shape), theta[n_phi:].reshape(psi_shape))

    @classmethod
    def zeros(cls, corpus: Corpus, num_senses: int) -> "ParamState":
        G, T, V = corpus.num_genres, corpus.num_times, corpus.vocab_size
        return cls(np.zeros((G, T, num_senses)), np.zeros((num_senses, T, V)))

    def permute_senses(self, perm: Sequence[int]) -> "ParamState":
        """New state whose sense ``i`` is this state's sense ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.intp)
        return ParamState(self.phi[:, :, perm], self.psi[perm])

    def probs(self) -> "ProbParams":
        return ProbParams(softmax(self.phi, axis=-1), softmax(self.psi, axis=-1))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamState):
            return NotImplemented
        return np.array_equal(self.phi, other.phi) and np.array_equal(self.psi, other.psi)


@dataclass(frozen=True, eq=False)
class ProbParams:
    """Simplex-valued parameters, e.g. posterior means of the softmax images."""

    phi_tilde: np.ndarray
    psi_tilde: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "phi_tilde", np.asarray(self.phi_tilde, dtype=float))
        object.__setattr__(self, "psi_tilde", np.asarray(self.psi_tilde, dtype=float))

    @property
    def num_senses(self) -> int:
        return self.phi_tilde.shape[2]

    def log_probs(self) -> tuple[np.ndarray, np.ndarray]:
        with np.errstate(divide="ignore"):
            return np.log(self.phi_tilde), np.log(self.psi_tilde)


def softmax(v, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``.

    >>> softmax([0.0, 0.0]).tolist()
    [0.5, 0.5]
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    return v - logsumexp(v, axis=axis, keepdims=True)


def _softmax_parts(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(log_softmax, softmax) over the last axis of a finite array."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=-1, keepdims=True)
    return shifted - np.log(total), e / total


def _check_shapes(corpus: Corpus, phi_shape: tuple, psi_shape: tuple) -> None:
    G, T, V = corpus.num_genres, corpus.num_times, corpus.vocab_size
    K = phi_shape[2]
    if tuple(phi_shape) != (G, T, K) or tuple(psi_shape) != (K, T, V):
        raise ValueError(
            f"parameter shapes phi {tuple(phi_shape)}, psi {tuple(psi_shape)} do not match "
            f"corpus (G={G}, T={T}, V={V})"
        )


def snippet_log_terms(corpus: Corpus, log_phi: np.ndarray, log_psi: np.ndarray,
                      counts: sparse.csr_matrix | None = None) -> np.ndarray:
    """Joint log-probabilities ``log p(z_d = k, W_d)`` as a (D, K) array.

    ``counts`` swaps in a replicate's (D, T*V) slot counts while reusing the
    corpus covariates.
    """
    _check_shapes(corpus, log_phi.shape, log_psi.shape)
    K = log_phi.shape[2]
    counts = corpus.slot_counts if counts is None else counts
    terms = log_phi[corpus.genres, corpus.times, :]
    if counts.shape[0] and counts.shape[1]:
        terms = terms + counts @ log_psi.reshape(K, -1).T
    return terms


def log_likelihood(corpus: Corpus, params: ParamState) -> float:
    """Sense-marginal log-likelihood of the corpus at logits ``params``."""
    terms = snippet_log_terms(corpus, log_softmax(params.phi), log_softmax(params.psi))
    if terms.shape[0] == 0:
        return 0.0
    return float(logsumexp(terms, axis=1).sum())


def log_prior(params: ParamState, config: ModelConfig) -> float:
    """Independent N(0, sd^2) log-density over every logit."""
    total = 0.0
    for x, sd in ((params.phi, config.prior_sd_phi), (params.psi, config.prior_sd_psi)):
        total += -0.5 * float(np.sum(x * x)) / sd**2 - x.size * (np.log(sd) + 0.5 * _LOG_2PI)
    return total


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"learning rate must lie in [0, 1], got {lam}")
    return lam


def log_posterior_unnorm(corpus: Corpus, params: ParamState, lam: float,
                         config: ModelConfig) -> float:
    lam = _check_lambda(lam)
    lp = log_prior(params, config)
    if lam == 0.0:
        return lp
    return lp + lam * log_likelihood(corpus, params)


def log_posterior_and_grad(corpus: Corpus, params: ParamState, lam: float,
                           config: ModelConfig) -> tuple[float, ParamState]:
    """Tempered log-posterior and its gradient in one pass.

    The likelihood gradient flows through the per-snippet sense
    responsibilities ``r[d, k]`` and then through each softmax:
    ``d/dx log_softmax(x)^T g = g - softmax(x) * sum(g)``.
    """
    lam = _check_lambda(lam)
    _check_shapes(corpus, params.phi.shape, params.psi.shape)
    lp, g_phi, g_psi = value_and_grad_arrays(corpus, params.phi, params.psi, lam,
                                             config.prior_sd_phi, config.prior_sd_psi)
    return lp, ParamState(g_phi, g_psi)


def value_and_grad_arrays(corpus: Corpus, phi: np.ndarray, psi: np.ndarray, lam: float,
                          sd_phi: float, sd_psi: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Unchecked array form of :func:`log_posterior_and_grad` for the sampler."""
    lp = (-0.5 * float(np.vdot(phi, phi)) / sd_phi**2 - phi.size * (np.log(sd_phi) + 0.5 * _LOG_2PI)
          - 0.5 * float(np.vdot(psi, psi)) / sd_psi**2 - psi.size * (np.log(sd_psi) + 0.5 * _LOG_2PI))
    g_phi = phi * (-1.0 / sd_phi**2)
    g_psi = psi * (-1.0 / sd_psi**2)
    if lam == 0.0 or len(corpus) == 0:
        return lp, g_phi, g_psi

    G, T, K = phi.shape
    V = psi.shape[2]
    log_phi, sm_phi = _softmax_parts(phi)
    log_psi, sm_psi = _softmax_parts(psi)
    terms = log_phi[corpus.genres, corpus.times, :] + corpus.slot_counts @ log_psi.reshape(K, -1).T
    top = terms.max(axis=1, keepdims=True)
    e = np.exp(terms - top)
    total = e.sum(axis=1, keepdims=True)
    resp = e / total  # (D, K)
    loglik = float(np.sum(np.log(total)) + np.sum(top))

    d_log_phi = (corpus.cell_indicator_t @ resp).reshape(G, T, K)
    d_log_psi = np.asarray(corpus.slot_counts_t @ resp).T.reshape(K, T, V)
    g_phi += lam * (d_log_phi - sm_phi * d_log_phi.sum(axis=-1, keepdims=True))
    g_psi += lam * (d_log_psi - sm_psi * d_log_psi.sum(axis=-1, keepdims=True))
    return lp + lam * loglik, g_phi, g_psi


def grad_log_posterior(corpus: Corpus, params: ParamState, lam: float,
                       config: ModelConfig) -> ParamState:
    return log_posterior_and_grad(corpus, params, lam, config)[1]


def _normalise_log(terms: np.ndarray) -> np.ndarray:
    return np.exp(terms - logsumexp(terms, axis=-1, keepdims=True))


def sense_posteriors(corpus: Corpus, params: ParamState | ProbParams) -> np.ndarray:
    """Per-snippet sense posteriors ``p(z_d = k | W_d)`` as a (D, K) array."""
    if isinstance(params, ProbParams):
        log_phi, log_psi = params.log_probs()
    else:
        log_phi, log_psi = log_softmax(params.phi), log_softmax(params.psi)
    return _normalise_log(snippet_log_terms(corpus, log_phi, log_psi))


def sense_posterior(snippet: Snippet, params: ParamState) -> np.ndarray:
    """Posterior over senses for a single snippet, a length-K simplex."""
    K, T, V = params.psi.shape
    G = params.phi.shape[0]
    one = Corpus((snippet,), vocab_size=V, num_genres=G, num_times=T)
    return sense_posteriors(one, params)[0]
