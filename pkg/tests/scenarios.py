"""Seeded desk-scale training runs shared by the pipeline and acceptance tests.

Results are cached per process so a run is trained at most once per session.
"""
import functools
import math
import time

import numpy as np

from tgcap.corpus import PatternBank, SynthVocab, build_vocab, synth_dataset
from tgcap.guidance import RetrievalIndex
from tgcap.model import ModelConfig, init_params
from tgcap.pipeline import Embedder, TrainConfig, caption_records, evaluate, train

NEVER = 10**9

# -- overfit reproduction ---------------------------------------------------------------
# One caption per image so "reproduce the training caption" is well defined, no
# threshold so every word is in the vocabulary, no dropout or scheduled sampling.
OVERFIT_IMAGES = 20
OVERFIT_MODEL = dict(P=16, S=512, R=4, D=32, E=64, H=64, dropout=0.0)
OVERFIT_TRAIN = dict(epochs=200, batch=20, lr=0.004, n=5, k=3, seed=0, ss_start=NEVER,
                     lr_decay_start=NEVER, val_every=0)


@functools.lru_cache(maxsize=None)
def overfit_run():
    start = time.perf_counter()
    recs = synth_dataset(0, OVERFIT_IMAGES, R=4, P=16, captions_per_image=1)
    vocab = build_vocab(recs, 0)
    mcfg = ModelConfig(V=len(vocab), **OVERFIT_MODEL)
    tcfg = TrainConfig(**OVERFIT_TRAIN)
    index = RetrievalIndex(recs)
    embedder = Embedder(mcfg.S)
    untrained = caption_records(recs, index, init_params(mcfg, tcfg.seed), mcfg, vocab, embedder,
                                n=tcfg.n, k=tcfg.k)
    result = train(recs, vocab, mcfg, tcfg, index=index, embedder=embedder)
    outputs = caption_records(recs, index, result.params, mcfg, vocab, embedder, n=tcfg.n, k=tcfg.k)
    lengths = [len(c) + 1 for r in recs for c in r.references]
    # untrained-uniform loss: every word (and EOS) at probability 1/V, attention uniform
    baseline = float(np.mean(lengths)) * math.log(len(vocab)) - mcfg.lambda_ent * math.log(mcfg.regions)
    return dict(records=recs, vocab=vocab, model=mcfg, result=result, outputs=outputs,
                untrained=untrained, baseline=baseline, final_loss=result.log[-1]["loss"],
                seconds=time.perf_counter() - start)


# -- ablation on a 200-train / 50-test corpus ------------------------------------------
# Cells carry unnamed clutter patterns beside the named objects, so average
# pooling mixes in distractors that a learned attention map can suppress.
ABLATION_SEEDS = (0, 1, 2)
ABLATION_SPEC = SynthVocab(min_clutter=2, max_clutter=4)
ABLATION_P = 32
ABLATION_SCENE_SCALE = 0.2
ABLATION_MODEL = dict(S=512, D=32, E=64, H=64, dropout=0.3, lambda_ent=0.05)
ABLATION_TRAIN = dict(epochs=60, batch=40, lr=0.01, n=60, k=10, ss_start=30, lr_decay_start=30,
                      val_every=0)


def ablation_corpus(seed):
    bank = PatternBank.fixed(ABLATION_SPEC, ABLATION_P, scene_scale=ABLATION_SCENE_SCALE)
    return synth_dataset(seed, 250, ABLATION_SPEC, R=4, P=ABLATION_P, captions_per_image=5,
                         splits={"test": 50}, bank=bank)


def planted_mass_ratio(records, results):
    """Mean over images of (attention on named-object cells) / (their uniform share)."""
    ratios = []
    for rec, res in zip(records, results):
        cells = [o["cell"] for o in rec.meta["objects"]]
        ratios.append(float(np.sum(res.attention[cells])) / (len(cells) / res.attention.size))
    return float(np.mean(ratios))


@functools.lru_cache(maxsize=None)
def ablation_run(seed):
    recs = ablation_corpus(seed)
    train_recs = [r for r in recs if r.split == "train"]
    test_recs = [r for r in recs if r.split == "test"]
    vocab = build_vocab(train_recs, 5)
    index = RetrievalIndex(train_recs)
    embedder = Embedder(ABLATION_MODEL["S"])
    tcfg = TrainConfig(seed=seed, **ABLATION_TRAIN)
    out = {"num_train": len(train_recs), "num_test": len(test_recs)}
    for mode in ("text", "uniform"):
        mcfg = ModelConfig(P=ABLATION_P, V=len(vocab), R=4, attention=mode, **ABLATION_MODEL)
        res = train(train_recs, vocab, mcfg, tcfg, index=index, embedder=embedder)
        ks = (tcfg.k, 1) if mode == "text" else (1,)
        for k in ks:
            results = caption_records(test_recs, index, res.params, mcfg, vocab, embedder, n=tcfg.n, k=k)
            out[f"{mode}_k{k}"] = evaluate(test_recs, results)["cider"]
            if mode == "text" and k == tcfg.k:
                out["planted_mass_ratio"] = planted_mass_ratio(test_recs, results)
    return out
