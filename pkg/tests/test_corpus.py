from __future__ import annotations

import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msclip.corpus import (
    STOP_WORDS, _unrank_pair, corpus_ngram_diversity, corpus_stats, jaccard, meteor_simplified,
    ngram_diversity, pairwise_similarity, question_type, word_frequency,
)
from msclip.errors import CorpusTooSmall, EmptyCaption, EmptyCorpus, EmptyText


def test_stop_word_list():
    assert len(STOP_WORDS) == 50 and "the" in STOP_WORDS and "lake" not in STOP_WORDS


def test_ngram_diversity_cases():
    assert ngram_diversity("one two three four five") == 1.0
    assert ngram_diversity("a a a a") == pytest.approx(13 / 36)
    assert ngram_diversity("lonely") == 1.0
    assert ngram_diversity("A a A a") == ngram_diversity("a a a a")
    with pytest.raises(EmptyCaption):
        ngram_diversity(" ,, ")


def test_ngram_diversity_custom_n():
    # "x y x y": bigrams xy, yx, xy -> 2/3
    assert ngram_diversity("x y x y", n_values=(2,)) == pytest.approx(2 / 3)


def test_pairwise_similarity_cases():
    assert pairwise_similarity(["same words here", "same words here"]) == 1.0
    assert pairwise_similarity(["red roof", "blue lake"]) == 0.0
    assert pairwise_similarity(["blue lake", "blue sky"]) == pytest.approx(1 / 3)
    with pytest.raises(CorpusTooSmall):
        pairwise_similarity(["only"])


@pytest.mark.parametrize("n", [2, 3, 7, 40])
def test_unrank_pair_enumerates_all_pairs(n):
    pairs = list(combinations(range(n), 2))
    assert [_unrank_pair(r, n) for r in range(len(pairs))] == pairs


def test_pairwise_similarity_sampled_is_seeded():
    rng = np.random.default_rng(0)
    vocab = [f"w{i}" for i in range(30)]
    corpus = [" ".join(rng.choice(vocab, 5)) for _ in range(200)]
    a = pairwise_similarity(corpus, sample_pairs=500, seed=1)
    assert a == pairwise_similarity(corpus, sample_pairs=500, seed=1)
    full = pairwise_similarity(corpus, sample_pairs=10 ** 6)
    assert abs(a - full) < 0.02


def test_meteor_cases():
    ten = "one two three four five six seven eight nine ten"
    assert meteor_simplified(ten, ten) == pytest.approx(0.9995, abs=1e-6)
    assert meteor_simplified("alpha beta", "gamma delta") == 0.0
    assert meteor_simplified("lake", "lake") == pytest.approx(0.5)
    with pytest.raises(EmptyText):
        meteor_simplified("", "x")


def test_meteor_stem_matching_and_chunks():
    # "rivers" stems to "river"; two matches in one chunk: penalty 0.5 * (1/2)^3
    s = meteor_simplified("rivers flowing", "river flowing")
    assert s == pytest.approx(1 - 0.5 / 8)
    # reversed order gives two chunks: penalty 0.5 * (2/2)^3
    assert meteor_simplified("b a", "a b") == pytest.approx(0.5)


def test_meteor_hand_value():
    # cand 3 tokens, ref 4 tokens, 2 matches in one chunk
    p, r = 2 / 3, 2 / 4
    f = 10 * p * r / (r + 9 * p)
    expect = f * (1 - 0.5 * (1 / 2) ** 3)
    assert meteor_simplified("green field x", "a green field today") == pytest.approx(expect)


@given(st.lists(st.sampled_from(["lake", "river", "field", "roads", "road", "town"]), min_size=1, max_size=12))
@settings(max_examples=100, deadline=None)
def test_meteor_self_score_bounds(tokens):
    t = " ".join(tokens)
    s = meteor_simplified(t, t)
    assert 0.5 <= s <= 1.0
    assert (s == 0.5) == (len(tokens) == 1)


def test_word_frequency():
    assert word_frequency(["lake lake river"]) == [("lake", 2), ("river", 1)]
    assert word_frequency(["the of and a"]) == []
    assert len(word_frequency(["a b c d"], top_k=100)) == 3
    assert word_frequency(["y x", "x y"], top_k=1) == [("x", 2)]
    with pytest.raises(EmptyCorpus):
        word_frequency([])


@pytest.mark.parametrize("q, t", [("What is the dominant land cover?", "what"),
                                  ("Name the largest feature.", "other"),
                                  ("HOW many rivers are there", "how"), ("¿Where?", "where")])
def test_question_type(q, t):
    assert question_type(q) == t


def template_corpus(n, rng):
    templates = ["a satellite image of {}", "an aerial view of {}", "{} seen from above"]
    names = ["forest", "river", "sea"]
    return [templates[i % 3].format(names[int(rng.integers(3))]) for i in range(n)]


def shuffled_vocab_corpus(corpus, rng):
    pool = [w for c in corpus for w in c.split()]
    rng.shuffle(pool)
    out, pos = [], 0
    for c in corpus:
        n = len(c.split())
        out.append(" ".join(pool[pos:pos + n]))
        pos += n
    return out


def test_template_corpus_less_diverse():
    rng = np.random.default_rng(0)
    tmpl = template_corpus(300, rng)
    shuf = shuffled_vocab_corpus(tmpl, rng)
    a = corpus_ngram_diversity(tmpl)
    b = corpus_ngram_diversity(shuf)
    assert np.mean(list(a.values())) < np.mean(list(b.values()))


def test_corpus_stats_json_and_histogram():
    caps = ["a lake near a town", "the river", "a lake near a town"]
    qs = ["What is here?", "Is it wet?", "Name it"]
    s = corpus_stats(caps, qs, top_k=2)
    assert sum(s.question_types.values()) == 3 and s.question_types["other"] == 1
    assert len(s.top_words) == 2
    assert 0 <= s.diversity <= 1 and 0 <= s.pairwise_similarity <= 1
    d = json.loads(json.dumps(s.to_json()))
    assert d["num_captions"] == 3
    assert "what" in s.histogram()
    with pytest.raises(EmptyCorpus):
        corpus_stats(["", "!!"])


def test_identical_corpus_similarity():
    assert corpus_stats(["same caption"] * 5).pairwise_similarity == 1.0


def test_jaccard_empty():
    assert jaccard("", "") == 1.0
