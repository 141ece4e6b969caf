"""Predictive accuracy against true sense labels, collapse detection, summaries."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorpusError
from .model import Corpus, ProbParams, log_softmax, snippet_log_terms
from .sampler import PosteriorDraws, posterior_mean_probs, symmetric_kl

COLLAPSE_THRESHOLD = 0.05


def predictive_probs(corpus: Corpus, draws: PosteriorDraws) -> np.ndarray:
    """Per-snippet sense probabilities averaged over draws, a (D, K) array."""
    if len(draws) == 0:
        raise ValueError("posterior has no draws")
    total = np.zeros((len(corpus), draws.phi.shape[-1]))
    for n in range(len(draws)):
        terms = snippet_log_terms(corpus, log_softmax(draws.phi[n]), log_softmax(draws.psi[n]))
        terms = np.exp(terms - terms.max(axis=1, keepdims=True))
        total += terms / terms.sum(axis=1, keepdims=True)
    return total / len(draws)


def brier_score(mapped_probs: np.ndarray, labels) -> float:
    """Mean over snippets of the squared distance to the one-hot true sense; in [0, 2]."""
    probs = np.asarray(mapped_probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ValueError(f"{probs.shape[0] if probs.ndim == 2 else '?'} prediction rows "
                         f"for {labels.size} labels")
    if labels.size == 0:
        raise ValueError("no labelled snippets")
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def surjections(K: int, K_true: int):
    """All maps {0..K-1} -> {0..K_true-1} that hit every target, lexicographic order."""
    for m in itertools.product(range(K_true), repeat=K):
        if len(set(m)) == K_true:
            yield m


def apply_mapping(probs: np.ndarray, mapping, K_true: int) -> np.ndarray:
    out = np.zeros((probs.shape[0], K_true))
    for k, target in enumerate(mapping):
        out[:, target] += probs[:, k]
    return out


def map_senses(probs: np.ndarray, labels, num_true_senses: int) -> tuple[tuple[int, ...], np.ndarray]:
    """Brier-minimising grouping of model senses onto true senses.

    Searches every surjection exhaustively; the lexicographically first
    mapping wins ties, so the identity is preferred when ``K == K'``.
    """
    if labels is None:
        raise ValueError("true sense labels are required")
    probs = np.asarray(probs, dtype=float)
    K = probs.shape[1]
    if K < num_true_senses:
        raise ValueError(f"cannot map {K} model senses onto {num_true_senses} true senses")
    best, best_score = None, math.inf
    for mapping in surjections(K, num_true_senses):
        score = brier_score(apply_mapping(probs, mapping, num_true_senses), labels)
        if score < best_score:
            best, best_score = mapping, score
    return best, apply_mapping(probs, best, num_true_senses)


def detect_collapse(mean: ProbParams, threshold: float = COLLAPSE_THRESHOLD) -> tuple[bool, np.ndarray]:
    """Flag collapse when every pair of time-marginal sense-word rows is within ``threshold``."""
    rows = mean.psi_tilde.mean(axis=1)
    K = rows.shape[0]
    if K == 1:
        return False, np.zeros((1, 1))
    rows = np.maximum(rows, np.finfo(float).tiny)
    div = symmetric_kl(rows, rows)
    np.fill_diagonal(div, 0.0)
    return bool(div.max() < threshold), div


def top_words(mean: ProbParams, n: int) -> list[list[int]]:
    """Per sense, the ``n`` most probable word ids of the time-marginal distribution.

    Ties go to the smaller word id.
    """
    rows = mean.psi_tilde.mean(axis=1)
    V = rows.shape[1]
    if not 1 <= n <= V:
        raise ValueError(f"n must lie in 1..{V}, got {n}")
    ids = np.arange(V)
    return [np.lexsort((ids, -row))[:n].tolist() for row in rows]


def hpd_interval(samples, mass: float = 0.95) -> tuple[float, float]:
    """Shortest interval covering ``ceil(mass * n)`` order statistics.

    Among equally short windows the one starting lowest is returned.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size < 2:
        raise ValueError(f"need at least 2 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if not 0.0 < mass < 1.0:
        raise ValueError(f"mass must lie in (0, 1), got {mass}")
    # guard against mass * n landing a rounding error above an integer
    k = max(1, math.ceil(mass * x.size - 1e-9))
    widths = x[k - 1:] - x[:x.size - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


@dataclass(frozen=True, eq=False)
class EvalReport:
    brier: float | None
    mapping: tuple[int, ...]
    per_snippet_probs: np.ndarray
    collapsed: bool
    pairwise_divergence: np.ndarray
    lam: float

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "brier": self.brier,
            "collapsed": self.collapsed,
            "mapping": [m + 1 for m in self.mapping],
            "pairwise_divergence": self.pairwise_divergence.tolist(),
        }


def evaluate(corpus: Corpus, draws: PosteriorDraws,
             collapse_threshold: float = COLLAPSE_THRESHOLD) -> EvalReport:
    """Brier score of the posterior predictive sense probabilities, absent under collapse."""
    if not corpus.has_labels:
        raise CorpusError("scoring needs true sense labels; the corpus has none")
    probs = predictive_probs(corpus, draws)
    mapping, mapped = map_senses(probs, corpus.true_labels, corpus.num_true_senses)
    collapsed, div = detect_collapse(posterior_mean_probs(draws), collapse_threshold)
    brier = None if collapsed else brier_score(mapped, corpus.true_labels)
    return EvalReport(brier, mapping, mapped, collapsed, div, float(draws.lam))


def write_eval(report: EvalReport, json_path: str | Path, probs_csv: str | Path | None = None) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    if probs_csv is not None:
        with open(probs_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            K_true = report.per_snippet_probs.shape[1]
            writer.writerow(["snippet"] + [f"sense_{k + 1}" for k in range(K_true)])
            for d, row in enumerate(report.per_snippet_probs):
                writer.writerow([d + 1] + [repr(float(p)) for p in row])


def write_top_words(mean: ProbParams, n: int, path: str | Path) -> None:
    rows = mean.psi_tilde.mean(axis=1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sense", "rank", "word_id", "probability"])
        for k, words in enumerate(top_words(mean, n)):
            for rank, w in enumerate(words, start=1):
                writer.writerow([k + 1, rank, w + 1, repr(float(rows[k, w]))])
