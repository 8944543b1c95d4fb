"""Acceptance criteria, one test (or a small group) per criterion.

A PASS/FAIL line per criterion is printed at the end of the pytest run.
"""
import subprocess
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
import scenarios
import test_model
import test_pipeline
from tgcap.guidance import GlobalFeature, consensus_scores, nearest_neighbors
from tgcap.metrics import bleu, build_idf, cider, tokenize
from tgcap.model import full_graph_gradcheck

criterion = pytest.mark.criterion


def frozen():
    corpus = [(img, [tokenize(c) for c in caps]) for img, caps in oracles.FROZEN_CORPUS]
    return corpus, build_idf(corpus), [refs for _, refs in corpus]


# 1 ---------------------------------------------------------------------------------------

@criterion(1, "full-graph gradient check, max relative error < 1e-4 in < 10 s")
def test_gradient_integrity(record_property):
    start = time.perf_counter()
    err = full_graph_gradcheck(seed=0)
    seconds = time.perf_counter() - start
    record_property("detail", f"max rel err {err:.2e}, {seconds:.2f} s")
    assert err < 1e-4
    assert seconds < 10


# 2 ---------------------------------------------------------------------------------------

@criterion(2, "CIDEr and BLEU match brute-force oracles to 1e-9, identity cases exact")
def test_metric_oracles(record_property):
    corpus, idf, refsets = frozen()
    caps = [c for _, rs in corpus for c in rs]
    assert len(caps) == 10
    worst = 0.0
    for cand in caps:
        for _, refs in corpus:
            worst = max(worst, abs(cider(cand, refs, idf) - oracles.cider(cand, refs, refsets)))
            got = bleu(cand, refs)
            _, want, _ = oracles.bleu(list(cand), [list(r) for r in refs])
            worst = max(worst, max(abs(a - b) for a, b in zip(got.scores, want)))
    record_property("detail", f"max deviation {worst:.1e}")
    assert worst < 1e-9
    for c in caps:
        assert cider(c, [c], idf) == 10.0
        assert bleu(c, [c]).scores == (1.0, 1.0, 1.0, 1.0)


# 3 ---------------------------------------------------------------------------------------

WORDS = st.sampled_from("a man woman riding horse dog red on the grass".split())
CAPTION = st.lists(WORDS, min_size=1, max_size=8).map(tuple)


@criterion(3, "consensus scores equal a double-loop pairwise CIDEr average to 1e-9")
@given(st.lists(CAPTION, min_size=2, max_size=10))
@settings(max_examples=100, deadline=None)
def test_consensus_oracle(captions):
    corpus, idf, refsets = frozen()
    got = consensus_scores(captions, idf)
    want = oracles.consensus(captions, refsets)
    assert np.max(np.abs(got - np.asarray(want))) < 1e-9


# 4 ---------------------------------------------------------------------------------------

@criterion(4, "nearest neighbours equal an exhaustive scan on 1000 vectors, ties deterministic")
@pytest.mark.parametrize("n", [1, 5, 60])
def test_retrieval_oracle(n):
    rng = np.random.default_rng(n)
    vecs = rng.standard_normal((1000, 16))
    # exact duplicates and scaled copies force ties that must break by ascending id
    vecs[500:520] = vecs[0]
    vecs[700:720] = 3.0 * vecs[1]
    ids = [f"v{j:04d}" for j in range(1000)]
    corpus = [GlobalFeature(i, v) for i, v in zip(ids, vecs)]
    for q in [rng.standard_normal(16), vecs[0], vecs[1] * 0.5]:
        got = nearest_neighbors(GlobalFeature("query", q), corpus, n)
        assert got == oracles.nearest(q.tolist(), vecs.tolist(), ids, n)
        assert got == nearest_neighbors(GlobalFeature("query", q), corpus[::-1], n)


# 5 ---------------------------------------------------------------------------------------

@criterion(5, "20-image overfit: loss < 10% of uniform baseline, beam-2 reproduces >= 90%, < 5 min")
def test_overfit_reproduction(record_property):
    run = scenarios.overfit_run()
    exact = [res.caption == rec.references[0] for rec, res in zip(run["records"], run["outputs"])]
    frac = float(np.mean(exact))
    record_property("detail", f"loss {run['final_loss']:.3f} vs baseline {run['baseline']:.2f}, "
                              f"{frac:.0%} reproduced, vocab {len(run['vocab'])}, {run['seconds']:.0f} s")
    assert run["final_loss"] < 0.1 * run["baseline"]
    assert frac >= 0.9
    assert run["seconds"] < 300


# 6 and 7 ---------------------------------------------------------------------------------
# Desk-scale noise: on the 50-image test split single-seed CIDEr differences between
# the three settings are often a few tenths, comparable to the seed-to-seed spread,
# so only the direction of the 3-seed average is asserted.

@pytest.fixture(scope="module")
def ablation():
    runs = [scenarios.ablation_run(s) for s in scenarios.ABLATION_SEEDS]
    assert all(r["num_train"] == 200 and r["num_test"] == 50 for r in runs)
    return runs


@criterion(6, "3-seed mean held-out CIDEr: text-guided k=10 >= uniform and k=10 >= k=1")
def test_ablation_direction(ablation, record_property):
    mean = {key: float(np.mean([r[key] for r in ablation])) for key in ("text_k10", "text_k1", "uniform_k1")}
    per_seed = ", ".join(f"seed {s}: {r['text_k10']:.3f}/{r['text_k1']:.3f}/{r['uniform_k1']:.3f}"
                         for s, r in zip(scenarios.ABLATION_SEEDS, ablation))
    record_property("detail", f"k10/k1/uniform mean {mean['text_k10']:.3f}/{mean['text_k1']:.3f}/"
                              f"{mean['uniform_k1']:.3f}; {per_seed}")
    assert mean["text_k10"] >= mean["uniform_k1"]
    assert mean["text_k10"] >= mean["text_k1"]


@criterion(7, "attention mass on planted cells >= 1.5x the uniform share")
def test_attention_localization(ablation, record_property):
    ratios = [r["planted_mass_ratio"] for r in ablation]
    record_property("detail", "ratio per seed " + ", ".join(f"{x:.2f}" for x in ratios))
    assert all(x >= 1.5 for x in ratios)


# 8 ---------------------------------------------------------------------------------------
# Each suite is a hypothesis property with 100 examples; calling it runs all of them.

@criterion(8, "property suites with >= 100 cases each")
@pytest.mark.parametrize("suite", [
    test_model.test_attention_simplex_and_convex_hull,
    test_model.test_entropy_bounds,
    test_model.test_softmax_shift_invariance,
    test_pipeline.test_beam_at_least_greedy,
    test_model.test_tied_weights_couple_both_pathways,
], ids=["attention-simplex", "entropy-bounds", "softmax-shift", "beam-vs-greedy", "tied-weights"])
def test_invariant_suite(suite):
    assert suite.hypothesis.inner_test is not None
    assert suite._hypothesis_internal_use_settings.max_examples >= 100
    suite()


# 9 ---------------------------------------------------------------------------------------

def _tgcap(*args):
    proc = subprocess.run([sys.executable, "-m", "tgcap", *map(str, args)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


@criterion(9, "two seeded --deterministic train + caption runs are byte-identical")
def test_determinism(tmp_path, record_property):
    data = tmp_path / "data"
    _tgcap("gen-synth", "--out", data, "--num-images", 30, "--test", 6, "--channels", 16, "--seed", 5)
    _tgcap("build-vocab", "--data", data, "--threshold", 0, "--out", tmp_path / "vocab.json")
    outputs = []
    for run in ("a", "b"):
        model = tmp_path / run / "model"
        _tgcap("train", "--data", data, "--vocab", tmp_path / "vocab.json", "--out", model, "--seed", 7,
               "--deterministic", "--epochs", 3, "--batch", 10, "--hidden", 16, "--att-dim", 16,
               "--embed-dim", 32, "--n", 5, "--k", 3, "--ss-start", 1)
        results = tmp_path / run / "results.jsonl"
        _tgcap("caption", "--data", data, "--model", model, "--n", 5, "--k", 3, "--seed", 7,
               "--deterministic", "--out", results)
        outputs.append((results.read_bytes(), (model / "model.tgap").read_bytes(),
                        (model / "log.jsonl").read_bytes()))
    record_property("detail", f"{len(outputs[0][0])} result bytes compared")
    assert outputs[0][0] and outputs[0] == outputs[1]
