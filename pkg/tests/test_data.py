import json
from collections import Counter

import jsonschema
import numpy as np
import pytest

from gbi_ppc.data import (GeneratorConfig, corpus_schema, dumps_corpus, generate_synthetic,
                          load_corpus, load_truth, save_corpus, save_truth, split_corpus)
from gbi_ppc.errors import ConfigError, CorpusError
from gbi_ppc.model import Corpus, Snippet

from conftest import random_corpus


@pytest.mark.parametrize("kwargs, field", [
    ({"num_snippets": 0}, "num_snippets"),
    ({"vocab_size": 0}, "vocab_size"),
    ({"num_times": 0}, "num_times"),
    ({"misspecification": "burstiness", "burst_words": 14}, "burst_words"),
    ({"misspecification": "burstiness", "burst_words": 0}, "burst_words"),
    ({"misspecification": "duplication", "copies": 0}, "copies"),
    ({"misspecification": "duplication", "copies": 3, "num_snippets": 10}, "copies"),
    ({"misspecification": "shuffle"}, "misspecification"),
    ({"sd_psi": -1.0}, "sd_psi"),
])
def test_generator_config_rejects(kwargs, field):
    with pytest.raises(ConfigError, match=field):
        GeneratorConfig(**kwargs)


def test_single_sense_word_frequencies_match_truth():
    cfg = GeneratorConfig(num_snippets=400, vocab_size=2, num_senses=1, snippet_length=10, seed=3)
    corpus, truth = generate_synthetic(cfg)
    n = corpus.token_word.size
    freq = np.mean(corpus.token_word == 1)
    p = truth.probs.psi_tilde[0, 0, 1]
    assert abs(freq - p) < 4 * np.sqrt(p * (1 - p) / n)


def test_duplication_repeats_each_snippet():
    corpus, truth = generate_synthetic(GeneratorConfig(num_snippets=40, misspecification="duplication",
                                                       copies=2, seed=1))
    counts = Counter(zip(corpus.snippets, corpus.true_labels))
    assert all(c % 2 == 0 for c in counts.values())
    assert len(corpus) == 40


def test_burstiness_single_source_word():
    corpus, _ = generate_synthetic(GeneratorConfig(num_snippets=30, misspecification="burstiness",
                                                   burst_words=1, seed=2))
    assert all(len(set(s.words)) == 1 for s in corpus.snippets)


def test_burstiness_type_token_ratio():
    cfg = GeneratorConfig(num_snippets=100, misspecification="burstiness", burst_words=4, seed=4)
    corpus, _ = generate_synthetic(cfg)
    for s in corpus.snippets:
        assert len(set(s.words)) / len(s.words) <= 4 / 14


def test_generator_deterministic_and_seed_sensitive():
    cfg = GeneratorConfig(num_snippets=50, num_times=3, num_genres=2, seed=9)
    a, _ = generate_synthetic(cfg)
    b, _ = generate_synthetic(cfg)
    c, _ = generate_synthetic(GeneratorConfig(num_snippets=50, num_times=3, num_genres=2, seed=10))
    assert dumps_corpus(a) == dumps_corpus(b)
    assert dumps_corpus(a) != dumps_corpus(c)


def test_covariates_are_stratified():
    corpus, truth = generate_synthetic(GeneratorConfig(num_snippets=23, num_genres=2, num_times=3))
    cells = Counter(zip(corpus.genres.tolist(), corpus.times.tolist()))
    assert len(cells) == 6
    assert max(cells.values()) - min(cells.values()) <= 1
    assert truth.labels == corpus.true_labels
    assert corpus.num_true_senses == 2


def test_truth_round_trip(tmp_path):
    _, truth = generate_synthetic(GeneratorConfig(num_snippets=10, seed=5))
    save_truth(truth, tmp_path / "truth.json")
    back = load_truth(tmp_path / "truth.json")
    assert back.labels == truth.labels and back.config == truth.config
    np.testing.assert_array_equal(back.probs.psi_tilde, truth.probs.psi_tilde)


def test_load_minimal_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"vocab_size": 3, "snippets": [{"words": [1, 3]}]}')
    corpus = load_corpus(path)
    assert len(corpus) == 1
    assert corpus.snippets[0] == Snippet((0, 2), 0, 0)
    assert not corpus.has_labels


@pytest.mark.parametrize("doc, expected", [
    ({"vocab_size": 3, "snippets": [{"words": [1]}, {"words": [2, 4]}]}, r"snippet 1: field 'words'"),
    ({"vocab_size": 3, "snippets": [{"words": [1], "time": 2}]}, r"snippet 0: field 'time'"),
    ({"vocab_size": 3, "snippets": [{"words": [1.5]}]}, r"snippet 0: field 'words'"),
    ({"vocab_size": 3, "snippets": [{"words": [1], "label": 1}]}, r"snippet 0: field 'label'"),
    ({"vocab_size": 3, "num_true_senses": 2, "snippets": [{"words": [1]}]}, r"snippet 0: field 'label'"),
    ({"vocab_size": 3, "snippets": [{"words": [1], "colour": 1}]}, r"snippet 0: unknown"),
    ({"snippets": []}, r"vocab_size"),
])
def test_load_reports_snippet_and_field(tmp_path, doc, expected):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CorpusError, match=expected):
        load_corpus(path)


def test_load_reports_json_position(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"vocab_size": 3,\n "snippets": [}')
    with pytest.raises(CorpusError, match="line 2"):
        load_corpus(path)


def test_round_trip_byte_identical(tmp_path, rng):
    corpus = random_corpus(rng, 25, 9, G=2, T=3, max_len=7, K_true=3)
    save_corpus(corpus, tmp_path / "a.json")
    loaded = load_corpus(tmp_path / "a.json")
    assert loaded == corpus
    save_corpus(loaded, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_empty_corpus_round_trip(tmp_path):
    corpus = Corpus((), vocab_size=4)
    save_corpus(corpus, tmp_path / "e.json")
    assert load_corpus(tmp_path / "e.json") == corpus


def test_saved_files_match_schema(tmp_path):
    corpus, _ = generate_synthetic(GeneratorConfig(num_snippets=12, num_times=2))
    save_corpus(corpus, tmp_path / "c.json")
    schema = corpus_schema()
    jsonschema.validate(json.loads((tmp_path / "c.json").read_text()), schema)
    bad = {"vocab_size": 3, "snippets": [{"words": [0]}]}
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, schema)


@pytest.mark.parametrize("D, parts, sizes", [(10, 5, [2] * 5), (11, 5, [3, 2, 2, 2, 2])])
def test_split_sizes(rng, D, parts, sizes):
    corpus = random_corpus(rng, D, 5, K_true=2)
    out = split_corpus(corpus, parts, seed=1)
    assert sorted((len(c) for c in out), reverse=True) == sizes


def test_split_preserves_snippets_and_labels(rng):
    corpus = random_corpus(rng, 37, 6, G=2, T=2, K_true=3)
    out = split_corpus(corpus, 4, seed=8)
    pairs = Counter(p for c in out for p in zip(c.snippets, c.true_labels))
    assert pairs == Counter(zip(corpus.snippets, corpus.true_labels))
    assert all(c.vocab_size == 6 and c.num_times == 2 for c in out)
    assert [len(c) for c in split_corpus(corpus, 4, seed=8)] == [len(c) for c in out]


def test_split_rejects_bad_parts(rng):
    corpus = random_corpus(rng, 3, 5)
    with pytest.raises(ValueError):
        split_corpus(corpus, 4, seed=0)
    with pytest.raises(ValueError):
        split_corpus(corpus, 1, seed=0)
