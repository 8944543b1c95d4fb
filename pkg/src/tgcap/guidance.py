"""Guidance-caption retrieval: visual k-NN, consensus scoring, top-k candidates.

Also hosts the sentence embedder that stands in for a pretrained sentence
encoder: signed feature hashing of unigrams and bigrams.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import DatasetRecord, FeatureGrid, caption_ids, load_embeddings
from .metrics import MAX_N, Caption, IdfTable, TfidfMatrix, build_idf

DEFAULT_N = 60
DEFAULT_K = 10
DEFAULT_EMBED_DIM = 512


@dataclass(frozen=True)
class GlobalFeature:
    image_id: str
    vector: np.ndarray


def global_feature(fg: FeatureGrid) -> GlobalFeature:
    return GlobalFeature(fg.image_id, fg.grid.astype(np.float64).mean(axis=(0, 1)))


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


TIE_DECIMALS = 12  # similarities equal to this many decimals count as ties


def _rank(sims: np.ndarray, ids: Sequence[str], n: int) -> list[int]:
    # lexsort: last key is primary
    order = np.lexsort((np.asarray(ids), -np.round(sims, TIE_DECIMALS)))
    return [int(i) for i in order[:n]]


def nearest_neighbors(query: GlobalFeature, corpus: Sequence[GlobalFeature], n: int) -> list[str]:
    """Ids of the ``n`` corpus entries most cosine-similar to the query.

    Ties go to the smaller image id. The query's own id is skipped.
    """
    corpus = [g for g in corpus if g.image_id != query.image_id]
    if n > len(corpus):
        raise ValueError(f"asked for {n} neighbours from a corpus of {len(corpus)}")
    mat = _unit_rows(np.stack([g.vector for g in corpus]))
    sims = mat @ _unit_rows(query.vector[None])[0]
    return [corpus[i].image_id for i in _rank(sims, [g.image_id for g in corpus], n)]


def consensus_scores(captions: Sequence[Caption], idf: IdfTable) -> np.ndarray:
    """Average CIDEr of each caption against every other caption in the pool."""
    if len(captions) < 2:
        raise ValueError("consensus scoring needs at least two captions")
    sim = TfidfMatrix(captions, idf).pairwise()
    return (sim.sum(axis=1) - np.diag(sim)) / (len(captions) - 1)


@dataclass(frozen=True)
class GuidanceCandidate:
    caption: Caption
    score: float
    source_id: str
    caption_id: str = ""

    def to_dict(self) -> dict:
        return {"caption": " ".join(self.caption), "score": self.score,
                "source_id": self.source_id, "caption_id": self.caption_id}


@dataclass(frozen=True)
class GuidanceSet:
    query_id: str
    candidates: tuple
    pool: tuple = field(default=(), compare=False)  # caption indices of C_NN in the index

    def to_json(self) -> str:
        return json.dumps({"query_id": self.query_id,
                           "candidates": [c.to_dict() for c in self.candidates]})

    @classmethod
    def from_json(cls, line: str) -> "GuidanceSet":
        row = json.loads(line)
        return cls(row["query_id"], tuple(
            GuidanceCandidate(tuple(c["caption"].split()), float(c["score"]), c["source_id"],
                              c.get("caption_id", "")) for c in row["candidates"]))


def top_k(pool: Sequence[tuple[Caption, str, str]], scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k best-scoring pool entries (score desc, source id, caption text)."""
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i][1], " ".join(pool[i][0])))
    return order[:k]


class RetrievalIndex:
    """Exhaustive-scan index over the training images and their captions."""

    def __init__(self, train_records: Sequence[DatasetRecord], idf: IdfTable | None = None):
        records = [r for r in train_records if r.split == "train"]
        if not records:
            raise ValueError("retrieval index needs training images")
        self.records = records
        self.image_ids = [r.image_id for r in records]
        self.features = np.stack([global_feature(r.feature).vector for r in records])
        self._unit = _unit_rows(self.features)
        self.idf = idf or build_idf((r.image_id, r.references) for r in records)
        self.captions: list[Caption] = [c for r in records for c in r.references]
        self.caption_ids = caption_ids(records)
        self.caption_source: list[str] = [r.image_id for r in records for _ in r.references]
        self._by_image: dict[str, list[int]] = {}
        for i, src in enumerate(self.caption_source):
            self._by_image.setdefault(src, []).append(i)
        self.tfidf = TfidfMatrix(self.captions, self.idf)
        width = len(self.tfidf.vocab)
        self._mats = [self.tfidf._matrix(n, width) for n in range(MAX_N)]
        self._full_sim: np.ndarray | None = None

    FULL_SIM_LIMIT = 6000  # captions; above this, pool similarities are computed per query

    def _pool_similarity(self, pool: Sequence[int]) -> np.ndarray:
        if len(self.captions) <= self.FULL_SIM_LIMIT:
            if self._full_sim is None:
                everything = list(range(len(self.captions)))
                self._full_sim = self.pairwise(everything, everything)
            return self._full_sim[np.ix_(pool, pool)]
        return self.pairwise(pool, pool)

    def neighbors(self, vector: np.ndarray, n: int, exclude_id: str | None = None) -> list[str]:
        sims = self._unit @ _unit_rows(np.asarray(vector, dtype=np.float64)[None])[0]
        ids = self.image_ids
        if exclude_id is not None and exclude_id in self._by_image:
            keep = [i for i, x in enumerate(ids) if x != exclude_id]
            sims, ids = sims[keep], [ids[i] for i in keep]
        if n > len(ids):
            raise ValueError(f"asked for {n} neighbours from a corpus of {len(ids)}")
        return [ids[i] for i in _rank(sims, ids, n)]

    def pool_indices(self, neighbor_ids: Iterable[str]) -> list[int]:
        return [i for nid in neighbor_ids for i in self._by_image[nid]]

    def pairwise(self, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
        out = np.zeros((len(rows), len(cols)))
        for m in self._mats:
            out += (m[rows] @ m[cols].T).toarray()
        return 10.0 * out / MAX_N

    def consensus(self, pool: Sequence[int]) -> np.ndarray:
        if len(pool) < 2:
            raise ValueError("consensus scoring needs at least two captions")
        sim = self._pool_similarity(pool)
        return (sim.sum(axis=1) - np.diag(sim)) / (len(pool) - 1)

    def guidance_set(self, query_id: str, vector: np.ndarray, n: int = DEFAULT_N,
                     k: int = DEFAULT_K, exclude_self: bool = True) -> GuidanceSet:
        neigh = self.neighbors(vector, n, query_id if exclude_self else None)
        pool = self.pool_indices(neigh)
        if k >= len(pool):
            raise ValueError(f"k={k} must be smaller than the pool size {len(pool)}")
        scores = self.consensus(pool)
        entries = [(self.captions[i], self.caption_source[i], self.caption_ids[i]) for i in pool]
        chosen = top_k(entries, scores, k)
        cands = tuple(GuidanceCandidate(entries[i][0], float(scores[i]), entries[i][1], entries[i][2])
                      for i in chosen)
        return GuidanceSet(query_id, cands, tuple(pool))

    def rerank_scores(self, captions: Sequence[Caption], pool: Sequence[int]) -> np.ndarray:
        """Mean CIDEr of each caption against every pool caption individually."""
        cand = TfidfMatrix(captions, self.idf, vocab=self.tfidf.vocab, frozen=True)
        width = len(self.tfidf.vocab)
        out = np.zeros((len(captions), len(pool)))
        for n, m in enumerate(self._mats):
            out += (cand._matrix(n, width) @ m[list(pool)].T).toarray()
        return (10.0 * out / MAX_N).mean(axis=1)


# -- sentence embeddings ---------------------------------------------------------------

def _hash(gram: str) -> int:
    return int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "little")


def hash_embed(caption: Caption, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    if not caption:
        raise ValueError("cannot embed an empty caption")
    vec = np.zeros(dim)
    grams = list(caption) + [f"{a} {b}" for a, b in zip(caption, caption[1:])]
    for g in grams:
        h = _hash(g)
        vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # every gram cancelled out; fall back to the first gram's bucket
        vec[_hash(grams[0]) % dim] = 1.0
        return vec
    return vec / norm


class EmbeddingTable:
    """Caption-id keyed vectors loaded from a sentence-embedding file plus its id list."""

    def __init__(self, vectors: np.ndarray, ids: Sequence[str]):
        if len(ids) != len(vectors):
            raise ValueError("embedding count does not match id count")
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.index = {cid: i for i, cid in enumerate(ids)}

    @classmethod
    def load(cls, path: str | Path, ids_path: str | Path | None = None) -> "EmbeddingTable":
        path = Path(path)
        ids_path = Path(ids_path) if ids_path else path.with_suffix(".ids.json")
        return cls(load_embeddings(path), json.loads(ids_path.read_text()))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, caption_id: str) -> np.ndarray:
        try:
            return self.vectors[self.index[caption_id]]
        except KeyError:
            raise KeyError(f"no embedding for caption id {caption_id!r}") from None


def embed_sentence(caption: Caption, mode: str = "hash", dim: int = DEFAULT_EMBED_DIM,
                   table: EmbeddingTable | None = None, caption_id: str | None = None) -> np.ndarray:
    if mode == "hash":
        return hash_embed(caption, dim)
    if mode == "file":
        if table is None or caption_id is None:
            raise ValueError("file mode needs an embedding table and a caption id")
        return table.lookup(caption_id)
    raise ValueError(f"unknown embedding mode {mode!r}")
