"""Posterior predictive checks with the log-likelihood as diagnostic.

For each posterior draw one replicate dataset is simulated with the observed
covariates and snippet lengths: each snippet's sense is drawn from its
posterior given the observed words, then every word position is drawn
independently from that sense's word distribution. The diagnostic of a
replicate is its log-likelihood under the draw that generated it.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .model import (DENSE_LIMIT, Corpus, ParamState, ProbParams, log_softmax, logsumexp,
                    snippet_log_terms)
from .sampler import PosteriorDraws, derive_seed, posterior_mean_probs


@dataclass(frozen=True)
class PpcResult:
    ref_diagnostics: list[float]
    observed_at_mean: float
    observed_at_draws: list[float]
    p_mean: float
    p_paired: float
    p_avg: float
    lam: float

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "PpcResult":
        doc = dict(doc)
        doc["lam"] = doc.pop("lambda")
        return cls(**doc)


def _log_probs(params: ParamState | ProbParams) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(params, ProbParams):
        return params.log_probs()
    return log_softmax(params.phi), log_softmax(params.psi)


def _slot_counts(corpus: Corpus, token_word: np.ndarray):
    D, TV = len(corpus), corpus.num_times * corpus.vocab_size
    slot = corpus.times[corpus.token_doc] * corpus.vocab_size + token_word
    m = sparse.csr_matrix((np.ones(slot.size), (corpus.token_doc, slot)), shape=(D, TV))
    m.sum_duplicates()
    return m.toarray() if D * TV <= DENSE_LIMIT else m


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def _replicate_words(corpus: Corpus, log_phi: np.ndarray, log_psi: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    resp = np.exp(snippet_log_terms(corpus, log_phi, log_psi))
    resp /= resp.sum(axis=1, keepdims=True)
    senses = _categorical(rng, resp)
    doc = corpus.token_doc
    word_probs = np.exp(log_psi)[senses[doc], corpus.times[doc]]
    return _categorical(rng, word_probs)


def replicate_dataset(corpus: Corpus, draw: ParamState | ProbParams,
                      rng: np.random.Generator) -> Corpus:
    """Simulate one replicate corpus from ``draw`` with the observed covariates."""
    log_phi, log_psi = _log_probs(draw)
    return corpus.with_words(_replicate_words(corpus, log_phi, log_psi, rng))


def _diagnostic_from_logs(corpus: Corpus, log_phi, log_psi, counts=None) -> float:
    if len(corpus) == 0:
        return 0.0
    return float(logsumexp(snippet_log_terms(corpus, log_phi, log_psi, counts), axis=1).sum())


def diagnostic(corpus: Corpus, params: ParamState | ProbParams) -> float:
    """Log-likelihood of ``corpus``; accepts logits or probabilities."""
    return _diagnostic_from_logs(corpus, *_log_probs(params))


def ppc_pvalue(ref, observed: float) -> float:
    """Fraction of reference diagnostics strictly below ``observed``."""
    ref = np.asarray(ref, dtype=float)
    if ref.size == 0:
        raise ValueError("reference distribution is empty")
    return float(np.mean(ref < observed))


def paired_pvalue(ref, observed) -> float:
    """Fraction of draws whose replicate diagnostic is below its own observed diagnostic."""
    ref, observed = np.asarray(ref, dtype=float), np.asarray(observed, dtype=float)
    if ref.size == 0:
        raise ValueError("reference distribution is empty")
    if ref.shape != observed.shape:
        raise ValueError("paired p-value needs equal-length inputs")
    return float(np.mean(ref < observed))


def run_ppc(corpus: Corpus, draws: PosteriorDraws, seed: int) -> PpcResult:
    """One replicate per draw; draw ``n`` uses the stream ``derive_seed(seed, n)``."""
    N = len(draws)
    if N == 0:
        raise ValueError("posterior has no draws")
    ref = np.empty(N)
    observed = np.empty(N)
    for n in range(N):
        log_phi, log_psi = log_softmax(draws.phi[n]), log_softmax(draws.psi[n])
        rng = np.random.default_rng(derive_seed(seed, n))
        words = _replicate_words(corpus, log_phi, log_psi, rng)
        ref[n] = _diagnostic_from_logs(corpus, log_phi, log_psi, _slot_counts(corpus, words))
        observed[n] = _diagnostic_from_logs(corpus, log_phi, log_psi)
    at_mean = diagnostic(corpus, posterior_mean_probs(draws))
    return PpcResult(
        ref_diagnostics=ref.tolist(),
        observed_at_mean=at_mean,
        observed_at_draws=observed.tolist(),
        p_mean=ppc_pvalue(ref, at_mean),
        p_paired=paired_pvalue(ref, observed),
        p_avg=ppc_pvalue(ref, float(observed.mean())),
        lam=float(draws.lam),
    )


def write_ppc(result: PpcResult, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    Path(json_path).write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["draw_index", "ref_diagnostic", "observed_at_draw"])
            for n, (r, o) in enumerate(zip(result.ref_diagnostics, result.observed_at_draws)):
                writer.writerow([n, repr(r), repr(o)])


def read_ppc(json_path: str | Path) -> PpcResult:
    return PpcResult.from_dict(json.loads(Path(json_path).read_text(encoding="utf-8")))
