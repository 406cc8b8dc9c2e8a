"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale relational checks (6, 7, 8) share one synthetic corpus
(200 documents, 24 queries, 2 speakers, seed 0) and one 2x2x2 grid.
"""

import filecmp
import os
import time
from fractions import Fraction
from statistics import median

import numpy as np
import pytest

from patternstd.cli import main as cli_main
from patternstd.discovery import DiscoveryConfig, discover
from patternstd.evaluation import Ranker, average_precision, fused_map, greedy_select, split_queries
from patternstd.experiment import benchmark_latency, run_experiment, search_pattern_set
from patternstd.hmm import (GranularityConfig, baum_welch, emission_loglik, nbest_decode,
                            viterbi_free_decode)
from patternstd.indexing import build_index
from patternstd.retrieval import SearchMethod, score_dtw, score_sub
from patternstd.similarity import build_similarity
from patternstd.synthetic import SyntheticSpec, synthesize_corpus

from conftest import random_pattern_set
from oracles import dtw_oracle, enumerate_transcriptions, sub_oracle

RESULTS = []
GRID = ([3, 4], [24, 32], [1, 2])
SEED = 0


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def desk():
    spec = SyntheticSpec()
    c = synthesize_corpus(spec, SEED)
    docs = {u.id: c.features[u.id].frames for u in c.manifest.documents}
    queries = {u.id: c.features[u.id].frames for u in c.manifest.queries}
    t0 = time.perf_counter()
    res = run_experiment(docs, queries, DiscoveryConfig.from_axes(*GRID, seed=SEED), N=5)
    res.timings["wall"] = time.perf_counter() - t0
    ranker = Ranker(res.table.query_ids, res.table.document_ids, c.manifest.relevance_judgments)
    return {"spec": spec, "corpus": c, "docs": docs, "queries": queries, "res": res, "ranker": ranker}


def test_criterion_1_decoding_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    count = argmax_ok = 0
    worst = 0.0
    while count < 200:
        m, n = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        T = int(rng.integers(m, 9))
        ps = random_pattern_set(rng, m, n, int(rng.integers(1, 3)), dim=2)
        X = rng.normal(size=(T, 2))
        ll = emission_loglik(ps, X)
        log_self, log_adv = ps.log_transitions()
        ref = enumerate_transcriptions(ll, log_self, log_adv)
        best = viterbi_free_decode(ps, X)
        nb = nbest_decode(ps, X, 5)
        argmax_ok += best.tokens == [tuple(t) for t in ref[0][1]]
        worst = max(worst, abs(best.total_log_likelihood - ref[0][0]))
        assert len(nb.entries) == min(5, len(ref))
        for e, (score, toks) in zip(nb.entries, ref):
            worst = max(worst, abs(e.total_log_likelihood - score))
        count += 1
    elapsed = time.perf_counter() - t0
    ok = argmax_ok == count and worst <= 1e-9 and elapsed < 60
    report(1, ok, f"{count} instances, argmax agreement {argmax_ok}/{count}, "
                  f"max score error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_matching_oracle():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    count = 0
    for _ in range(1000):
        D, Q = int(rng.integers(1, 7)), int(rng.integers(1, 6))
        W = rng.uniform(size=(D, Q))
        if rng.random() < 0.3:
            W = rng.choice([0.0, 0.5, 1.0], size=(D, Q))
        sub_ref = sub_oracle(W) if D >= Q else sub_oracle(W.T) / D
        worst = max(worst, abs(score_sub(W) - sub_ref),
                    abs(score_dtw(W) - dtw_oracle(W)),
                    abs(score_dtw(W, normalize=False) - dtw_oracle(W, False)))
        count += 1
    elapsed = time.perf_counter() - t0
    report(2, worst <= 1e-12 and elapsed < 60,
           f"{count} matrices up to 6x5, max error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_em_monotonicity(desk):
    res = desk["res"]
    steps = 0
    worst = 0.0
    for psi, pset in res.grid.pattern_sets.items():
        for entry in pset.training_log:
            ll = entry["em_loglik"]
            for a, b in zip(ll, ll[1:]):
                steps += 1
                worst = max(worst, (a - b) / abs(a))
    t = res.timings["discovery"]
    ok = len(res.grid.pattern_sets) == 8 and worst <= 1e-6 and t < 300
    report(3, ok, f"{steps} Baum-Welch steps over {len(res.grid.pattern_sets)} sets, "
                  f"worst relative decrease {max(worst, 0.0):.2e}, grid training {t:.1f}s")


def test_criterion_4_normalization(desk):
    res = desk["res"]
    pg_err = sim_bad = 0.0
    for psi in res.indexes:
        for index in (res.indexes[psi], res.query_indexes[psi]):
            for pg in index.posteriorgrams.values():
                pg_err = max(pg_err, float(np.max(np.abs(pg.positions.sum(1) - 1.0))))
        for sim in res.similarities[psi].values():
            S = sim.values
            sim_bad = max(sim_bad, float(np.max(np.abs(np.diag(S) - 1.0))),
                          float(max(0.0, -S.min(), S.max() - 1.0)))
    # weights after every re-estimation step, on an l=2 set
    pset = res.grid.pattern_sets[GranularityConfig(3, 24, 2)]
    labels = {u: viterbi_free_decode(pset, x, u) for u, x in desk["docs"].items()}
    w_err = float(np.max(np.abs(pset.weights.sum(-1) - 1.0)))
    for _ in range(3):
        pset = baum_welch(pset, desk["docs"], labels)
        w_err = max(w_err, float(np.max(np.abs(pset.weights.sum(-1) - 1.0))))
    for p in res.grid.pattern_sets.values():
        w_err = max(w_err, float(np.max(np.abs(p.weights.sum(-1) - 1.0))))
    ok = pg_err <= 1e-9 and sim_bad == 0.0 and w_err <= 1e-9
    report(4, ok, f"posteriorgram sum error {pg_err:.1e}, similarity range/diagonal violation "
                  f"{sim_bad:.1e}, mixture weight sum error {w_err:.1e}")


def test_criterion_5_reductions(desk):
    res = desk["res"]
    docs, queries = desk["docs"], desk["queries"]
    doc_ids, query_ids = res.table.document_ids, res.table.query_ids
    psi = GranularityConfig(3, 24, 2)
    pset = res.grid.pattern_sets[psi]
    sub_q = query_ids[:6]
    d1 = build_index(pset, docs, N=1)
    q1 = build_index(pset, {q: queries[q] for q in sub_q}, N=1)
    scores, _ = search_pattern_set(pset, d1, q1, doc_ids, sub_q, similarities=res.similarities[psi])
    identical = all(np.array_equal(scores[SearchMethod(s, 1, d)], scores[SearchMethod(s, 0, d)])
                    for s in (0, 1) for d in (0, 1))
    tiny = {"hard": res.similarities[psi]["hard"], "soft": build_similarity(pset, "soft", 1e-6 * psi.m)}
    qi = res.query_indexes[psi]
    soft, _ = search_pattern_set(pset, res.indexes[psi], qi, doc_ids, query_ids, similarities=tiny)
    diff = max(float(np.max(np.abs(soft[SearchMethod(1, b, d)] - soft[SearchMethod(0, b, d)])))
               for b in (0, 1) for d in (0, 1))
    report(5, identical and diff < 1e-6,
           f"N=1 posteriorgram vs 1-best bit-identical: {identical}; "
           f"max |soft - hard| at beta=1e-6*m: {diff:.1e}")


def test_criterion_6_fusion_complementarity(desk):
    res, ranker, spec = desk["res"], desk["ranker"], desk["spec"]
    g = SearchMethod(1, 0, 0)
    singles = {str(p): ranker.map(res.table.scores[(p, g)]) for p in sorted(res.grid.pattern_sets)}
    fused = fused_map(res.table.scores, [(p, g) for p in res.grid.pattern_sets], ranker)
    best, med = max(singles.values()), median(singles.values())
    wall = res.timings["wall"]
    ok = (fused >= best - 0.01 and fused > med and spec.n_speakers >= 2 and spec.n_queries >= 20
          and spec.n_documents >= 200 and len(singles) == 8 and wall < 1800)
    report(6, ok, f"fused MAP {fused:.4f}, best single {best:.4f}, median single {med:.4f} "
                  f"({len(singles)} sets, {spec.n_documents} docs, {spec.n_queries} queries, "
                  f"{spec.n_speakers} speakers, {wall:.0f}s)")


def test_criterion_7_greedy_selection(desk):
    res = desk["res"]
    table = res.table
    judg = desk["corpus"].manifest.relevance_judgments
    dev, ev = split_queries(table.query_ids, 0.5, SEED)
    rows = {q: i for i, q in enumerate(table.query_ids)}
    dev_s = {k: v[[rows[q] for q in dev]] for k, v in table.scores.items()}
    ev_s = {k: v[[rows[q] for q in ev]] for k, v in table.scores.items()}
    dev_r, ev_r = Ranker(dev, table.document_ids, judg), Ranker(ev, table.document_ids, judg)
    budget = 20
    chosen = [k for k, _ in greedy_select(dev_s, dev_r, budget)]
    selected = fused_map(ev_s, chosen, ev_r)
    all_ones = fused_map(ev_s, list(ev_s), ev_r)
    oracle = greedy_select(ev_s, ev_r, budget)[-1][1]
    ok = selected >= all_ones and oracle >= selected
    report(7, ok, f"eval MAP: all-ones {all_ones:.4f}, dev-selected top-{budget} {selected:.4f}, "
                  f"oracle top-{budget} {oracle:.4f} ({len(dev)} dev / {len(ev)} eval queries)")


def test_criterion_8_speedup(desk):
    docs, queries = desk["docs"], desk["queries"]
    psi = GranularityConfig(5, 24, 1)
    pset = discover(docs, psi, DiscoveryConfig([psi], seed=SEED))
    dindex = build_index(pset, docs, N=5)
    qindex = build_index(pset, queries, N=5)
    out = benchmark_latency(docs, queries, dindex, qindex, build_similarity(pset, "soft"),
                            pairs=60, repeats=3, seed=SEED)
    ok = out["speedup_sub"] >= 10 and out["speedup_dtw"] >= 2
    report(8, ok, f"m=5 per-pair latency: frame DTW {out['mean_latency_frame_dtw'] * 1e3:.3f} ms, "
                  f"SUB {out['mean_latency_sub'] * 1e3:.4f} ms ({out['speedup_sub']:.1f}x), "
                  f"DTW {out['mean_latency_dtw'] * 1e3:.4f} ms ({out['speedup_dtw']:.1f}x); "
                  f"theoretical F*m^2 = {out['theoretical_factor_F_m2']}")


AP_CASES = [
    # (ranking length, 1-based relevant ranks, extra relevant never retrieved, expected)
    (5, [1, 3], 0, Fraction(5, 6)),
    (5, [1, 2], 0, Fraction(1)),
    (10, [10], 0, Fraction(1, 10)),
    (4, [2], 0, Fraction(1, 2)),
    (6, [2, 4], 0, Fraction(1, 2)),
    (6, [1, 2, 5], 0, Fraction(13, 15)),
    (3, [1], 1, Fraction(1, 2)),
    (8, [1, 4, 7], 0, Fraction(9, 14)),
    (6, [5, 6], 0, Fraction(4, 15)),
    (4, [], 2, Fraction(0)),
]


def test_criterion_9_average_precision():
    errors = []
    for length, ranks, missing, expected in AP_CASES:
        ranking = [f"d{i}" for i in range(1, length + 1)]
        relevant = {f"d{r}" for r in ranks} | {f"x{i}" for i in range(missing)}
        got = average_precision(ranking, relevant)
        if got != float(expected):
            errors.append((ranks, got, float(expected)))
    report(9, not errors, f"{len(AP_CASES) - len(errors)}/{len(AP_CASES)} hand-computed AP values exact"
                          + (f"; mismatches {errors}" if errors else ""))


def test_criterion_10_pipeline_determinism(tmp_path):
    args = ["pipeline", "--preset", "smoke", "--set", 'grid={"m": [3, 5], "n": [8], "l": [1, 2]}',
            "--set", "max_iterations=5", "--set", "nbest=3", "--set", "greedy_budget=8"]
    codes = [cli_main(args + ["--root", str(tmp_path / r)]) for r in ("a", "b")]
    compared, differ = 0, []
    for d, _, files in os.walk(tmp_path / "a"):
        for f in files:
            if f == "run_meta.json":
                continue
            rel = os.path.relpath(os.path.join(d, f), tmp_path / "a")
            compared += 1
            if not filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False):
                differ.append(rel)
    kinds = {"bundles": "patterns/objects", "indexes": ".idx", "matrices": "similarity/", "scores": "scores.tsv"}
    seen = {k: any(v in os.path.relpath(os.path.join(d, f), tmp_path / "a")
                   for d, _, fs in os.walk(tmp_path / "a") for f in fs) for k, v in kinds.items()}
    ok = codes == [0, 0] and not differ and all(seen.values())
    report(10, ok, f"two pipeline runs, {compared} artifacts compared, {len(differ)} differ "
                   f"(bundles, indexes, matrices, score tables present: {all(seen.values())})")
