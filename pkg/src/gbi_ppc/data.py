"""Synthetic corpora, corpus files, and random splits.

Corpus files are a single JSON document::

    {"vocab_size": V, "num_genres": G, "num_times": T, "num_true_senses": K',
     "snippets": [{"words": [...], "genre": g, "time": t, "label": o}, ...]}

Word ids, genres, times and labels are 1-based on disk. ``num_true_senses``
and ``label`` are optional but must appear together. The formal schema ships
as ``gbi_ppc/schemas/corpus.schema.json``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusError
from .model import Corpus, ProbParams, Snippet, softmax

MISSPECIFICATIONS = ("none", "burstiness", "duplication")


@dataclass(frozen=True)
class GeneratorConfig:
    num_snippets: int = 200
    vocab_size: int = 50
    num_genres: int = 1
    num_times: int = 1
    num_senses: int = 2
    snippet_length: int = 14
    sd_phi: float = 1.0
    sd_psi: float = 1.0
    misspecification: str = "none"
    burst_words: int = 4
    copies: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_snippets", "vocab_size", "num_genres", "num_times", "num_senses",
                     "snippet_length"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        for name in ("sd_phi", "sd_psi"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        if self.misspecification not in MISSPECIFICATIONS:
            raise ConfigError(
                f"misspecification must be one of {MISSPECIFICATIONS}, got {self.misspecification!r}"
            )
        if self.misspecification == "burstiness" and not 1 <= self.burst_words < self.snippet_length:
            raise ConfigError(
                f"burst_words must satisfy 1 <= burst_words < snippet_length "
                f"({self.snippet_length}), got {self.burst_words}"
            )
        if self.misspecification == "duplication":
            if self.copies < 1:
                raise ConfigError(f"copies must be >= 1, got {self.copies}")
            if self.num_snippets % self.copies:
                raise ConfigError(
                    f"copies ({self.copies}) must divide num_snippets ({self.num_snippets})"
                )
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    probs: ProbParams
    labels: tuple[int, ...]
    config: GeneratorConfig


def _covariates(n: int, G: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    # stratified round-robin over (genre, time) cells
    cell = np.arange(n) % (G * T)
    return cell // T, cell % T


def generate_synthetic(config: GeneratorConfig) -> tuple[Corpus, SyntheticTruth]:
    """Simulate a labelled corpus from the mixture, optionally misspecified.

    ``burstiness`` draws ``burst_words`` source words from the sense-word
    distribution and fills each position uniformly from that pool, so each
    position keeps the model's marginal but positions are correlated.
    ``duplication`` simulates ``num_snippets / copies`` snippets and repeats
    each one ``copies`` times.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(config.seed)))
    K, G, T, V, L = (config.num_senses, config.num_genres, config.num_times,
                     config.vocab_size, config.snippet_length)
    phi_t = softmax(rng.normal(scale=config.sd_phi, size=(G, T, K)), axis=-1)
    psi_t = softmax(rng.normal(scale=config.sd_psi, size=(K, T, V)), axis=-1)

    n_base = config.num_snippets
    if config.misspecification == "duplication":
        n_base //= config.copies
    genres, times = _covariates(n_base, G, T)
    snippets, labels = [], []
    for d in range(n_base):
        g, t = int(genres[d]), int(times[d])
        z = int(rng.choice(K, p=phi_t[g, t]))
        if config.misspecification == "burstiness":
            pool = rng.choice(V, size=config.burst_words, p=psi_t[z, t])
            words = pool[rng.integers(0, config.burst_words, size=L)]
        else:
            words = rng.choice(V, size=L, p=psi_t[z, t])
        snippets.append(Snippet(tuple(words.tolist()), g, t))
        labels.append(z)
    if config.misspecification == "duplication":
        snippets = [s for s in snippets for _ in range(config.copies)]
        labels = [o for o in labels for _ in range(config.copies)]

    corpus = Corpus(tuple(snippets), V, G, T, tuple(labels), K)
    return corpus, SyntheticTruth(ProbParams(phi_t, psi_t), tuple(labels), config)


# -- files --------------------------------------------------------------------

def corpus_to_dict(corpus: Corpus) -> dict:
    doc = {"vocab_size": corpus.vocab_size, "num_genres": corpus.num_genres,
           "num_times": corpus.num_times}
    if corpus.has_labels:
        doc["num_true_senses"] = corpus.num_true_senses
    snippets = []
    for d, s in enumerate(corpus.snippets):
        rec = {"words": [w + 1 for w in s.words], "genre": s.genre + 1, "time": s.time + 1}
        if corpus.has_labels:
            rec["label"] = corpus.true_labels[d] + 1
        snippets.append(rec)
    doc["snippets"] = snippets
    return doc


def dumps_corpus(corpus: Corpus) -> str:
    """Canonical text form: header keys on one line each, one snippet per line."""
    doc = corpus_to_dict(corpus)
    snippets = doc.pop("snippets")
    lines = ["{"]
    for key, value in doc.items():
        lines.append(f"  {json.dumps(key)}: {json.dumps(value)},")
    if snippets:
        lines.append('  "snippets": [')
        body = [f"    {json.dumps(s, separators=(', ', ': '))}" for s in snippets]
        lines.append(",\n".join(body))
        lines.append("  ]")
    else:
        lines.append('  "snippets": []')
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(dumps_corpus(corpus), encoding="utf-8")


def _require_int(value, where: str, field: str, lo: int = 1, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise CorpusError(f"{where}: field '{field}' must be an integer, got {value!r}")
    if value < lo or (hi is not None and value > hi):
        bound = f"{lo}..{hi}" if hi is not None else f">= {lo}"
        raise CorpusError(f"{where}: field '{field}' = {value} out of range {bound}")
    return value


def corpus_from_dict(doc: dict) -> Corpus:
    if not isinstance(doc, dict):
        raise CorpusError("corpus document must be a JSON object")
    for key in ("vocab_size", "snippets"):
        if key not in doc:
            raise CorpusError(f"corpus: missing required field '{key}'")
    V = _require_int(doc["vocab_size"], "corpus", "vocab_size")
    G = _require_int(doc.get("num_genres", 1), "corpus", "num_genres")
    T = _require_int(doc.get("num_times", 1), "corpus", "num_times")
    K_true = doc.get("num_true_senses")
    if K_true is not None:
        K_true = _require_int(K_true, "corpus", "num_true_senses")
    raw = doc["snippets"]
    if not isinstance(raw, list):
        raise CorpusError("corpus: field 'snippets' must be a list")

    snippets, labels = [], []
    for d, rec in enumerate(raw):
        where = f"snippet {d}"
        if not isinstance(rec, dict):
            raise CorpusError(f"{where}: must be an object")
        unknown = set(rec) - {"words", "genre", "time", "label"}
        if unknown:
            raise CorpusError(f"{where}: unknown field(s) {sorted(unknown)}")
        words = rec.get("words")
        if not isinstance(words, list):
            raise CorpusError(f"{where}: field 'words' must be a list")
        ids = [_require_int(w, where, "words", 1, V) - 1 for w in words]
        genre = _require_int(rec.get("genre", 1), where, "genre", 1, G) - 1
        time = _require_int(rec.get("time", 1), where, "time", 1, T) - 1
        if "label" in rec:
            if K_true is None:
                raise CorpusError(f"{where}: field 'label' present but 'num_true_senses' is missing")
            labels.append(_require_int(rec["label"], where, "label", 1, K_true) - 1)
        elif K_true is not None:
            raise CorpusError(f"{where}: field 'label' missing although 'num_true_senses' is set")
        snippets.append(Snippet(tuple(ids), genre, time))
    return Corpus(tuple(snippets), V, G, T, tuple(labels) if K_true is not None else None, K_true)


def load_corpus(path: str | Path) -> Corpus:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return corpus_from_dict(doc)
    except CorpusError as exc:
        raise CorpusError(f"{path}: {exc}") from exc


def corpus_schema() -> dict:
    return json.loads(resources.files("gbi_ppc").joinpath("schemas/corpus.schema.json").read_text())


def save_truth(truth: SyntheticTruth, path: str | Path) -> None:
    doc = {
        "generator": asdict(truth.config),
        "labels": [o + 1 for o in truth.labels],
        "phi_tilde": truth.probs.phi_tilde.tolist(),
        "psi_tilde": truth.probs.psi_tilde.tolist(),
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_truth(path: str | Path) -> SyntheticTruth:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    probs = ProbParams(np.array(doc["phi_tilde"]), np.array(doc["psi_tilde"]))
    return SyntheticTruth(probs, tuple(o - 1 for o in doc["labels"]), GeneratorConfig(**doc["generator"]))


def split_corpus(corpus: Corpus, parts: int, seed: int) -> list[Corpus]:
    """Random partition into ``parts`` corpora whose sizes differ by at most one."""
    D = len(corpus)
    if parts < 2:
        raise ValueError(f"parts must be >= 2, got {parts}")
    if parts > D:
        raise ValueError(f"cannot split {D} snippets into {parts} parts")
    order = np.random.default_rng(np.random.SeedSequence(int(seed))).permutation(D)
    out = []
    for chunk in np.array_split(order, parts):
        idx = np.sort(chunk)
        labels = tuple(corpus.true_labels[i] for i in idx) if corpus.has_labels else None
        out.append(Corpus(tuple(corpus.snippets[i] for i in idx), corpus.vocab_size,
                          corpus.num_genres, corpus.num_times, labels, corpus.num_true_senses))
    return out
