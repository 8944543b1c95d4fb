"""Training loop, beam-search inference with consensus reranking, and evaluation."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import BOS, EOS, DatasetRecord, Vocabulary
from .guidance import (DEFAULT_EMBED_DIM, DEFAULT_K, DEFAULT_N, EmbeddingTable, GuidanceSet,
                       RetrievalIndex, embed_sentence, global_feature)
from .metrics import Caption, build_idf, cider, corpus_bleu
from .model import ModelConfig, batch_loss, context, decode_init, decode_step, init_params

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 80
    lr: float = 4e-4
    lr_decay: float = 0.8
    lr_decay_start: int = 10
    lr_decay_every: int = 3
    ss_start: int = 10
    ss_prob: float = 0.75
    n: int = DEFAULT_N
    k: int = DEFAULT_K
    seed: int = 0
    exclude_self: bool = True
    clip_norm: float | None = None
    val_every: int = 1
    max_len: int = 20

    def lr_at(self, epoch: int) -> float:
        return ad.lr_schedule(epoch, self.lr, self.lr_decay, self.lr_decay_start, self.lr_decay_every)


@dataclass
class TrainResult:
    params: dict
    model: ModelConfig
    log: list = field(default_factory=list)
    guidance: dict = field(default_factory=dict)


class EmptyGuidanceError(ValueError):
    pass


class Embedder:
    """Guidance caption -> sentence vector, cached by caption id when available."""

    def __init__(self, dim: int = DEFAULT_EMBED_DIM, table: EmbeddingTable | None = None):
        self.dim = table.dim if table is not None else dim
        self.table = table
        self._cache: dict = {}

    def __call__(self, caption: Caption, caption_id: str = "") -> np.ndarray:
        key = caption_id or " ".join(caption)
        if key not in self._cache:
            if self.table is not None and caption_id:
                self._cache[key] = embed_sentence(caption, "file", table=self.table, caption_id=caption_id)
            else:
                self._cache[key] = embed_sentence(caption, "hash", self.dim)
        return self._cache[key]


def pick_guidance(rng: np.random.Generator, sizes: Sequence[int]) -> list[int]:
    """One uniform draw per training pair from its image's guidance candidates."""
    return [int(rng.integers(n)) for n in sizes]


def guidance_sets(index: RetrievalIndex, records: Sequence[DatasetRecord], n: int, k: int,
                  exclude_self: bool = True) -> dict[str, GuidanceSet]:
    out = {}
    for rec in records:
        vec = global_feature(rec.feature).vector
        out[rec.image_id] = index.guidance_set(rec.image_id, vec, n, k, exclude_self and rec.split == "train")
    return out


def train(records: Sequence[DatasetRecord], vocab: Vocabulary, model_cfg: ModelConfig,
          cfg: TrainConfig, index: RetrievalIndex | None = None,
          guidance: dict[str, GuidanceSet] | None = None, embedder: Embedder | None = None,
          val_records: Sequence[DatasetRecord] = (), on_epoch: Callable | None = None) -> TrainResult:
    """Fit the captioner on every (image, reference) pair of the training split.

    Each pair draws one guidance caption uniformly from its image's top-k set
    per epoch. Minibatch loss is the mean of per-sequence summed losses.
    """
    train_recs = [r for r in records if r.split == "train"]
    if not train_recs:
        raise ValueError("training split is empty")
    index = index or RetrievalIndex(train_recs)
    if guidance is None:
        guidance = guidance_sets(index, train_recs, cfg.n, cfg.k, cfg.exclude_self)
    embedder = embedder or Embedder(model_cfg.S)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(model_cfg, cfg.seed)

    regions = np.stack([r.feature.regions() for r in train_recs])
    cand_emb = []
    for rec in train_recs:
        gs = guidance.get(rec.image_id)
        if gs is None or not gs.candidates:
            raise EmptyGuidanceError(f"no guidance captions for training image {rec.image_id}")
        if model_cfg.attention == "text":
            cand_emb.append(np.stack([embedder(c.caption, c.caption_id) for c in gs.candidates]))
        else:
            cand_emb.append(np.zeros((len(gs.candidates), model_cfg.S)))
    pairs = [(i, vocab.encode(cap)) for i, rec in enumerate(train_recs) for cap in rec.references]

    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        ss_prob = cfg.ss_prob if epoch >= cfg.ss_start else 1.0
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch):
            chunk = order[start:start + cfg.batch]
            imgs = [pairs[j][0] for j in chunk]
            picks = pick_guidance(rng, [len(cand_emb[i]) for i in imgs])
            sent = np.stack([cand_emb[i][p] for i, p in zip(imgs, picks)])
            with ad.Tape() as tape:
                loss, _ = batch_loss(regions[imgs], sent, [pairs[j][1] for j in chunk],
                                     params, model_cfg, ss_prob, rng)
            tape.backward(loss)
            ad.adam_step(params.values(), lr, clip_norm=cfg.clip_norm)
            epoch_loss += float(loss.value) * len(chunk)
        entry = {"epoch": epoch, "lr": lr, "loss": epoch_loss / len(pairs)}
        if val_records and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
            results = caption_records(val_records, index, params, model_cfg, vocab, embedder,
                                      n=cfg.n, k=1, max_len=cfg.max_len)
            entry["val_cider"] = evaluate(val_records, results)["cider"]
        history.append(entry)
        log.info("epoch %d %s", epoch, entry)
        if on_epoch is not None:
            on_epoch(entry)
    return TrainResult(params, model_cfg, history, guidance)


# -- beam search ------------------------------------------------------------------------

@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple  # generated ids, BOS excluded, EOS included when finished
    logprob: float
    finished: bool
    state: object = field(default=None, compare=False, repr=False)


def beam_search(step: Callable, init_state, beam: int = 2, max_len: int = 20,
                bos: int = BOS, eos: int = EOS, greedy_floor: bool = True) -> BeamHypothesis:
    """Best hypothesis by summed log-probability (no length normalisation).

    ``step(state, token) -> (next_state, log_probs)``. Each round keeps the
    ``beam`` best non-EOS extensions alive; EOS extensions ranked within the
    top ``beam`` are retired to the finished pool. Search stops once no live
    hypothesis can beat the best finished one, or at ``max_len`` tokens.

    Plain beam search can prune the greedy path and end below it. With
    ``greedy_floor`` the greedy decode is run too and the better one returned.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    best = _beam(step, init_state, beam, max_len, bos, eos)
    if greedy_floor and beam > 1:
        greedy = _beam(step, init_state, 1, max_len, bos, eos)
        best = min((best, greedy), key=lambda d: (-d.logprob, d.tokens))
    return best


def _beam(step: Callable, init_state, beam: int, max_len: int, bos: int, eos: int) -> BeamHypothesis:
    alive = [BeamHypothesis((), 0.0, False, (init_state, bos))]
    done: list[BeamHypothesis] = []
    for t in range(max_len):
        cands = []
        for hyp in alive:
            state, last = hyp.state
            new_state, logp = step(state, last)
            for w in range(len(logp)):
                cands.append((hyp.logprob + float(logp[w]), hyp.tokens + (w,), new_state))
        cands.sort(key=lambda c: (-c[0], c[1]))
        if t == max_len - 1:
            done += [BeamHypothesis(toks, s, toks[-1] == eos) for s, toks, _ in cands[:beam]]
            break
        alive = []
        for rank, (score, toks, st) in enumerate(cands):
            if toks[-1] == eos:
                if rank < beam:
                    done.append(BeamHypothesis(toks, score, True))
            elif len(alive) < beam:
                alive.append(BeamHypothesis(toks, score, False, (st, toks[-1])))
            if len(alive) == beam and rank >= beam - 1:
                break
        if not alive or (done and max(d.logprob for d in done) >= alive[0].logprob):
            break
    return min(done, key=lambda d: (-d.logprob, d.tokens))


def model_stepper(params: dict, cfg: ModelConfig) -> Callable:
    def step(state, token):
        state, logits = decode_step(state, np.array([token]), params, cfg)
        v = logits.value[0]
        v = v - v.max()
        return state, v - np.log(np.exp(v).sum())
    return step


def generate(regions: np.ndarray, sentence: np.ndarray, params: dict, cfg: ModelConfig,
             beam: int = 2, max_len: int = 20) -> tuple[BeamHypothesis, np.ndarray]:
    """Attend once, then beam-decode. Returns (best hypothesis, attention weights)."""
    att = context(np.asarray(regions)[None], np.asarray(sentence)[None], params, cfg)
    state = decode_init(att.z, params, cfg)
    return beam_search(model_stepper(params, cfg), state, beam, max_len), att.alpha.value[0]


# -- inference ---------------------------------------------------------------------------

@dataclass
class CaptionResult:
    image_id: str
    caption: Caption
    candidates: list  # dicts: guidance, caption, rerank_score
    attention: np.ndarray
    chosen: int = 0

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "caption": " ".join(self.caption),
                           "chosen": self.chosen, "candidates": self.candidates,
                           "attention": [float(a) for a in self.attention]})

    @classmethod
    def from_json(cls, line: str) -> "CaptionResult":
        row = json.loads(line)
        return cls(row["image_id"], tuple(row["caption"].split()), row["candidates"],
                   np.asarray(row.get("attention", []), dtype=np.float64), row.get("chosen", 0))


def infer(record: DatasetRecord, index: RetrievalIndex, params: dict, cfg: ModelConfig,
          vocab: Vocabulary, embedder: Embedder, n: int = DEFAULT_N, k: int = DEFAULT_K,
          beam: int = 2, max_len: int = 20, guidance: GuidanceSet | None = None) -> CaptionResult:
    """Caption one image with each of its top-k guidance captions, keep the best by reranking.

    The rerank score is the mean CIDEr of a generated caption against each
    caption of the image's nearest-neighbour pool.
    """
    if guidance is None or not guidance.pool:
        guidance = index.guidance_set(record.image_id, global_feature(record.feature).vector,
                                      n, k, exclude_self=record.split == "train")
    cands = guidance.candidates[:k]
    if not cands:
        raise EmptyGuidanceError(f"no guidance captions for image {record.image_id}")
    regions = record.feature.regions()
    captions, alphas = [], []
    for c in cands:
        sent = embedder(c.caption, c.caption_id) if cfg.attention == "text" else np.zeros(cfg.S)
        hyp, alpha = generate(regions, sent, params, cfg, beam, max_len)
        captions.append(vocab.decode(hyp.tokens))
        alphas.append(alpha)
    scores = index.rerank_scores(captions, guidance.pool)
    best = int(np.argmax(scores))  # first maximum wins ties
    return CaptionResult(
        record.image_id, captions[best],
        [{"guidance": " ".join(c.caption), "caption": " ".join(cap), "rerank_score": float(s)}
         for c, cap, s in zip(cands, captions, scores)],
        alphas[best], best)


def _caption_chunk(args) -> list[str]:
    records, index, params, cfg, vocab, embedder, kw = args
    return [infer(r, index, params, cfg, vocab, embedder, **kw).to_json() for r in records]


def caption_records(records: Sequence[DatasetRecord], index: RetrievalIndex, params: dict,
                    cfg: ModelConfig, vocab: Vocabulary, embedder: Embedder, n: int = DEFAULT_N,
                    k: int = DEFAULT_K, beam: int = 2, max_len: int = 20,
                    guidance: dict | None = None, jobs: int = 1) -> list[CaptionResult]:
    kw = dict(n=n, k=k, beam=beam, max_len=max_len)
    if jobs <= 1:
        return [infer(r, index, params, cfg, vocab, embedder, guidance=(guidance or {}).get(r.image_id), **kw)
                for r in records]
    chunks = [list(records[i::jobs]) for i in range(jobs)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_caption_chunk, [(c, index, params, cfg, vocab, embedder, kw) for c in chunks]))
    by_id = {}
    for part in parts:
        for line in part:
            res = CaptionResult.from_json(line)
            by_id[res.image_id] = res
    return [by_id[r.image_id] for r in records]


# -- evaluation ---------------------------------------------------------------------------

def evaluate(records: Sequence[DatasetRecord], results: Sequence[CaptionResult]) -> dict:
    """Corpus BLEU-1..4 and mean CIDEr.

    Document frequencies come from the evaluated images' own references.
    """
    refs = {r.image_id: r.references for r in records}
    missing = [res.image_id for res in results if not refs.get(res.image_id)]
    if missing:
        raise KeyError(f"no references for images: {missing[:5]}")
    idf = build_idf((res.image_id, refs[res.image_id]) for res in results)
    empty = [res.image_id for res in results if not res.caption]
    ciders = [cider(res.caption, refs[res.image_id], idf) if res.caption else 0.0 for res in results]
    b = corpus_bleu((res.caption, refs[res.image_id]) for res in results)
    report = {f"bleu{i + 1}": b.scores[i] for i in range(4)}
    report.update(cider=float(np.mean(ciders)) if ciders else 0.0, num_images=len(results),
                  empty_predictions=empty)
    return report


def export_attention(result: CaptionResult, R: int | None = None) -> dict:
    alpha = np.asarray(result.attention, dtype=np.float64)
    R = R or int(round(math.sqrt(alpha.size)))
    if R * R != alpha.size:
        raise ValueError(f"{alpha.size} attention weights do not form a square grid")
    return {"image_id": result.image_id, "R": R, "weights": alpha.reshape(R, R).tolist()}


def write_pgm(path: str | Path, weights: np.ndarray, cell: int = 16) -> None:
    """Grayscale raster of a weight grid, scaled so the largest weight is white."""
    w = np.asarray(weights, dtype=np.float64)
    top = w.max()
    img = np.zeros_like(w) if top <= 0 else w / top
    img = np.kron((img * 255).round().astype(np.uint8), np.ones((cell, cell), dtype=np.uint8))
    h, wd = img.shape
    Path(path).write_bytes(f"P5\n{wd} {h}\n255\n".encode() + img.tobytes())


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
