"""Tokenization and n-gram caption metrics (CIDEr, BLEU).

Captions are plain tuples of lowercase tokens. CIDEr here is the original
consensus metric: tf-idf weighted n-gram vectors, cosine against each
reference, averaged, times 10. No length penalty.
"""
from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

Caption = tuple[str, ...]
NGram = tuple[str, ...]

MAX_N = 4

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class EmptyCaptionError(ValueError):
    """Raised when a caption has no tokens left after tokenization."""


def tokenize(raw: str) -> Caption:
    """Lowercase, drop ASCII punctuation, split on whitespace."""
    tokens = tuple(raw.lower().translate(_PUNCT_TABLE).split())
    if not tokens:
        raise EmptyCaptionError(f"caption {raw!r} is empty after tokenization")
    return tokens


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class NGramProfile:
    counts: Mapping[NGram, int]
    length: int

    @classmethod
    def of(cls, tokens: Sequence[str], max_n: int = MAX_N) -> "NGramProfile":
        counts: Counter = Counter()
        for n in range(1, max_n + 1):
            counts.update(ngrams(tokens, n))
        return cls(counts=dict(counts), length=len(tokens))

    def order(self, n: int) -> dict:
        return {g: c for g, c in self.counts.items() if len(g) == n}


@dataclass(frozen=True)
class IdfTable:
    """Document frequencies over a reference corpus. One document = one image."""

    doc_freq: Mapping[NGram, int] = field(default_factory=dict)
    num_docs: int = 1

    def __post_init__(self):
        if self.num_docs < 1:
            raise ValueError("num_docs must be >= 1")
        for g, df in self.doc_freq.items():
            if not 1 <= df <= self.num_docs:
                raise ValueError(f"doc_freq[{g!r}]={df} outside [1, {self.num_docs}]")

    def weight(self, gram: NGram) -> float:
        # unseen n-grams count as appearing in one document
        return math.log(self.num_docs / self.doc_freq.get(gram, 1))


def build_idf(corpus: Iterable[tuple[object, Sequence[Caption]]]) -> IdfTable:
    """Count, per n-gram, the images whose reference set contains it at least once."""
    doc_freq: Counter = Counter()
    num_docs = 0
    for _image_id, refs in corpus:
        num_docs += 1
        seen = set()
        for ref in refs:
            seen.update(NGramProfile.of(ref).counts)
        doc_freq.update(seen)
    if num_docs == 0:
        raise ValueError("reference corpus is empty")
    return IdfTable(doc_freq=dict(doc_freq), num_docs=num_docs)


def _tfidf(tokens: Sequence[str], n: int, idf: IdfTable) -> tuple[dict, float]:
    vec = {g: c * idf.weight(g) for g, c in ngrams(tokens, n).items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider(candidate: Caption, references: Sequence[Caption], idf: IdfTable,
          clip: bool = False) -> float:
    """CIDEr of one candidate against a reference set, in [0, 10].

    With ``clip=True`` candidate n-gram weights are capped at the reference's
    (the CIDEr-D numerator); default is the unclipped original.
    """
    if not references:
        raise ValueError("cider needs at least one reference")
    total = 0.0
    for n in range(1, MAX_N + 1):
        vc, nc = _tfidf(candidate, n, idf)
        acc = 0.0
        for ref in references:
            vr, nr = _tfidf(ref, n, idf)
            if nc == 0.0 or nr == 0.0:
                continue
            if clip:
                dot = sum(min(w, vr[g]) * vr[g] for g, w in vc.items() if g in vr)
            else:
                dot = sum(w * vr[g] for g, w in vc.items() if g in vr)
            acc += dot / (nc * nr)
        total += acc / len(references)
    return 10.0 * total / MAX_N


class TfidfMatrix:
    """Unit-normalised tf-idf rows for a fixed list of captions, one sparse matrix per n.

    ``pairwise(other)`` gives cider(a, {b}) for every pair (unclipped), which is
    what consensus scoring and reranking need in bulk.
    """

    def __init__(self, captions: Sequence[Caption], idf: IdfTable, vocab: dict | None = None,
                 frozen: bool = False):
        # frozen: n-grams missing from a shared vocab still count towards the
        # row norm but get no column, since nothing on the other side has them
        self.idf = idf
        self.vocab = {} if vocab is None else vocab
        self.rows = []
        for n in range(1, MAX_N + 1):
            data, indices, indptr = [], [], [0]
            for cap in captions:
                vec, norm = _tfidf(cap, n, idf)
                if norm > 0.0:
                    for g, w in vec.items():
                        if w == 0.0 or (frozen and g not in self.vocab):
                            continue
                        idx = self.vocab.setdefault(g, len(self.vocab))
                        indices.append(idx)
                        data.append(w / norm)
                indptr.append(len(indices))
            self.rows.append((np.asarray(data, dtype=np.float64),
                              np.asarray(indices, dtype=np.int64),
                              np.asarray(indptr, dtype=np.int64)))
        self.size = len(captions)

    def _matrix(self, n: int, width: int) -> sparse.csr_matrix:
        data, indices, indptr = self.rows[n]
        return sparse.csr_matrix((data, indices, indptr), shape=(self.size, width))

    def pairwise(self, other: "TfidfMatrix | None" = None) -> np.ndarray:
        other = self if other is None else other
        if other.vocab is not self.vocab:
            raise ValueError("pairwise needs matrices built over a shared n-gram vocab")
        width = len(self.vocab)
        out = np.zeros((self.size, other.size))
        for n in range(MAX_N):
            out += (self._matrix(n, width) @ other._matrix(n, width).T).toarray()
        return 10.0 * out / MAX_N


@dataclass(frozen=True)
class BleuScore:
    precisions: tuple  # modified precision per order 1..max_n
    scores: tuple  # BLEU-1..BLEU-max_n
    brevity_penalty: float

    @property
    def composite(self) -> float:
        return self.scores[-1]


def _closest_ref_len(cand_len: int, ref_lens: Iterable[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def _bleu_from_counts(matched: Sequence[int], total: Sequence[int],
                      cand_len: int, ref_len: int) -> BleuScore:
    precisions = tuple(m / t if t > 0 else 0.0 for m, t in zip(matched, total))
    if cand_len == 0:
        bp = 0.0
    elif cand_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n, p in enumerate(precisions, start=1):
        if p == 0.0 or log_sum == -math.inf:
            log_sum = -math.inf
            scores.append(0.0)
            continue
        log_sum += math.log(p)
        scores.append(bp * math.exp(log_sum / n))
    return BleuScore(precisions=precisions, scores=tuple(scores), brevity_penalty=bp)


def _clipped_counts(candidate: Caption, references: Sequence[Caption], max_n: int):
    matched, total = [], []
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for g, c in ngrams(ref, n).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        matched.append(sum(min(c, max_ref[g]) for g, c in cand.items()))
        total.append(sum(cand.values()))
    return matched, total


def bleu(candidate: Caption, references: Sequence[Caption], max_n: int = MAX_N) -> BleuScore:
    """Sentence BLEU with clipped precision and brevity penalty, no smoothing."""
    if not references:
        raise ValueError("bleu needs at least one reference")
    if not 1 <= max_n <= MAX_N:
        raise ValueError(f"max_n must be in 1..{MAX_N}")
    matched, total = _clipped_counts(candidate, references, max_n)
    ref_len = _closest_ref_len(len(candidate), (len(r) for r in references))
    return _bleu_from_counts(matched, total, len(candidate), ref_len)


def corpus_bleu(pairs: Iterable[tuple[Caption, Sequence[Caption]]], max_n: int = MAX_N) -> BleuScore:
    """Corpus BLEU: clipped counts and lengths are summed before taking ratios."""
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for candidate, references in pairs:
        if not references:
            raise ValueError("every candidate needs at least one reference")
        m, t = _clipped_counts(candidate, references, max_n)
        matched = [a + b for a, b in zip(matched, m)]
        total = [a + b for a, b in zip(total, t)]
        cand_len += len(candidate)
        ref_len += _closest_ref_len(len(candidate), (len(r) for r in references))
    return _bleu_from_counts(matched, total, cand_len, ref_len)
