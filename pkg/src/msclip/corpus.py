"""Caption corpus analytics: n-gram diversity, lexical overlap, a simplified METEOR,
word frequencies and question types."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import CorpusTooSmall, EmptyCaption, EmptyCorpus, EmptyText
from .tokenizer import normalize_tokens

DEFAULT_N_VALUES = (1, 2, 3)

STOP_WORDS = frozenset("""
a an the and or but of in on at to for with by from as is are was were be been being it its this
that these those there here which who what how do does can has have had not no into over under
than then also some
""".split())
assert len(STOP_WORDS) == 50

QUESTION_WORDS = ("what", "how", "are", "is", "where", "which", "does", "do", "can")

METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
_SUFFIXES = ("ing", "es", "ed", "s")


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def ngram_diversity(caption: str, n_values: Sequence[int] = DEFAULT_N_VALUES) -> float:
    """Mean over applicable n of distinct/total n-grams within one caption."""
    tokens = normalize_tokens(caption)
    if not tokens:
        raise EmptyCaption("caption has no tokens")
    ratios = []
    for n in n_values:
        grams = _ngrams(tokens, n)
        if grams:
            ratios.append(len(set(grams)) / len(grams))
    return float(np.mean(ratios))


def corpus_ngram_diversity(corpus: Iterable[str], n_values: Sequence[int] = DEFAULT_N_VALUES,
                           ) -> dict[int, float]:
    """Distinct/total n-grams pooled over the whole corpus, per n (n-grams never span captions)."""
    totals = {n: 0 for n in n_values}
    distinct: dict[int, set] = {n: set() for n in n_values}
    seen = False
    for caption in corpus:
        seen = True
        tokens = normalize_tokens(caption)
        for n in n_values:
            grams = _ngrams(tokens, n)
            totals[n] += len(grams)
            distinct[n].update(grams)
    if not seen:
        raise EmptyCorpus("empty corpus")
    return {n: len(distinct[n]) / totals[n] for n in n_values if totals[n]}


def jaccard(a: str, b: str) -> float:
    sa, sb = set(normalize_tokens(a)), set(normalize_tokens(b))
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def _unrank_pair(r: int, n: int) -> tuple[int, int]:
    # pairs (i, j), i < j, in row-major order
    i = int(n - 2 - math.floor(math.sqrt(-8 * r + 4 * n * (n - 1) - 7) / 2.0 - 0.5))
    j = int(r + i + 1 - n * (n - 1) // 2 + (n - i) * ((n - i) - 1) // 2)
    return i, j


def pairwise_similarity(corpus: Sequence[str], sample_pairs: int = 10000, seed: int = 0) -> float:
    """Mean Jaccard overlap of token sets over uniformly sampled unordered caption pairs."""
    n = len(corpus)
    if n < 2:
        raise CorpusTooSmall("need at least two captions")
    total_pairs = n * (n - 1) // 2
    if total_pairs <= sample_pairs:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        rng = np.random.default_rng(seed)
        ranks = np.sort(rng.choice(total_pairs, size=sample_pairs, replace=False))
        pairs = [_unrank_pair(int(r), n) for r in ranks]
    sets = [set(normalize_tokens(c)) for c in corpus]
    vals = []
    for i, j in pairs:
        a, b = sets[i], sets[j]
        vals.append(1.0 if not a and not b else len(a & b) / len(a | b))
    return float(np.mean(vals))


def _stem(token: str) -> str:
    for suf in _SUFFIXES:
        if token.endswith(suf) and len(token) - len(suf) >= 3:
            return token[: -len(suf)]
    return token


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Greedy left-to-right alignment: exact forms first, then stems on the leftovers."""
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs = []
    for key in (lambda t: t, _stem):
        ref_keys = [key(t) for t in ref]
        for i, tok in enumerate(cand):
            if i in used_c:
                continue
            k = key(tok)
            for j, rk in enumerate(ref_keys):
                if j not in used_r and rk == k:
                    used_c.add(i)
                    used_r.add(j)
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def meteor_simplified(candidate: str, reference: str) -> float:
    """METEOR with exact and suffix-stem matching only (no synonym tables)."""
    cand, ref = normalize_tokens(candidate), normalize_tokens(reference)
    if not cand or not ref:
        raise EmptyText("candidate and reference must be non-empty")
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return fmean * (1.0 - penalty)


def word_frequency(corpus: Iterable[str], top_k: int | None = None) -> list[tuple[str, int]]:
    counts: Counter[str] = Counter()
    seen = False
    for text in corpus:
        seen = True
        counts.update(t for t in normalize_tokens(text) if t not in STOP_WORDS)
    if not seen:
        raise EmptyCorpus("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked if top_k is None else ranked[:top_k]


def question_type(question: str) -> str:
    tokens = normalize_tokens(question)
    if not tokens:
        raise EmptyText("question is empty")
    return tokens[0] if tokens[0] in QUESTION_WORDS else "other"


@dataclass
class CorpusStats:
    num_captions: int
    diversity_per_n: dict[int, float]
    diversity: float
    corpus_diversity_per_n: dict[int, float]
    corpus_diversity: float
    pairwise_similarity: float
    top_words: list[tuple[str, int]]
    question_types: dict[str, int]

    def to_json(self) -> dict:
        d = asdict(self)
        d["diversity_per_n"] = {str(k): v for k, v in self.diversity_per_n.items()}
        d["corpus_diversity_per_n"] = {str(k): v for k, v in self.corpus_diversity_per_n.items()}
        d["top_words"] = [[w, c] for w, c in self.top_words]
        return d

    def histogram(self, width: int = 40) -> str:
        lines = ["question types:"]
        peak = max(self.question_types.values(), default=0) or 1
        for name, count in sorted(self.question_types.items(), key=lambda kv: (-kv[1], kv[0])):
            lines.append(f"  {name:<8} {count:>6} {'#' * max(1, round(width * count / peak)) if count else ''}")
        lines.append("top words:")
        peak = max((c for _, c in self.top_words), default=0) or 1
        for word, count in self.top_words:
            lines.append(f"  {word[:16]:<16} {count:>6} {'#' * max(1, round(width * count / peak))}")
        return "\n".join(lines)


def corpus_stats(captions: Sequence[str], questions: Sequence[str] = (), top_k: int = 20,
                 n_values: Sequence[int] = DEFAULT_N_VALUES, sample_pairs: int = 10000,
                 seed: int = 0) -> CorpusStats:
    captions = [c for c in captions if normalize_tokens(c)]
    if not captions:
        raise EmptyCorpus("no non-empty captions")
    per_n: dict[int, list[float]] = {n: [] for n in n_values}
    overall = []
    for c in captions:
        tokens = normalize_tokens(c)
        for n in n_values:
            grams = _ngrams(tokens, n)
            if grams:
                per_n[n].append(len(set(grams)) / len(grams))
        overall.append(ngram_diversity(c, n_values))
    pooled = corpus_ngram_diversity(captions, n_values)
    hist = {q: 0 for q in QUESTION_WORDS + ("other",)}
    for q in questions:
        if normalize_tokens(q):
            hist[question_type(q)] += 1
    return CorpusStats(
        num_captions=len(captions),
        diversity_per_n={n: float(np.mean(v)) for n, v in per_n.items() if v},
        diversity=float(np.mean(overall)),
        corpus_diversity_per_n=pooled,
        corpus_diversity=float(np.mean(list(pooled.values()))),
        pairwise_similarity=pairwise_similarity(captions, sample_pairs, seed) if len(captions) > 1 else 1.0,
        top_words=word_frequency(captions, top_k),
        question_types=hist,
    )
