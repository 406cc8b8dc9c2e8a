"""In-memory end-to-end runs: discover, index, search, fuse."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .discovery import run_grid
from .indexing import build_index
from .retrieval import (ALL_METHODS, RelevanceTable, SearchMethod, frame_dtw_baseline, relevance,
                        score_table)
from .similarity import build_similarity

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    grid: object
    table: RelevanceTable
    indexes: dict = field(default_factory=dict)
    query_indexes: dict = field(default_factory=dict)
    similarities: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def entries_for(index, ids):
    """Indexed entries in ``ids`` order; None where decoding failed."""
    return [index.entry(u) if u in index.transcriptions else None for u in ids]


def search_pattern_set(pset, doc_index, query_index, doc_ids, query_ids, gammas=ALL_METHODS,
                       beta=None, similarities=None):
    sims = similarities or {"hard": build_similarity(pset, "hard"),
                            "soft": build_similarity(pset, "soft", beta)}
    docs = entries_for(doc_index, doc_ids)
    queries = entries_for(query_index, query_ids)
    live_d = [i for i, e in enumerate(docs) if e is not None]
    live_q = [i for i, e in enumerate(queries) if e is not None]
    partial = score_table([docs[i] for i in live_d], [queries[i] for i in live_q], sims, gammas)
    out = {}
    for g, arr in partial.items():
        full = np.zeros((len(query_ids), len(doc_ids)))
        full[np.ix_(live_q, live_d)] = arr
        out[g] = full
    return out, sims


def run_experiment(documents, queries, discovery_config, N=5, gammas=ALL_METHODS, beta=None,
                   workers=1):
    """Train the grid on the documents and score every query/document pair."""
    t0 = time.perf_counter()
    grid = run_grid(documents, discovery_config, workers=workers)
    t1 = time.perf_counter()
    doc_ids, query_ids = sorted(documents), sorted(queries)
    table = RelevanceTable(query_ids, doc_ids)
    result = ExperimentResult(grid, table)
    for psi in sorted(grid.pattern_sets):
        pset = grid.pattern_sets[psi]
        result.indexes[psi] = build_index(pset, documents, N)
        result.query_indexes[psi] = build_index(pset, queries, N)
        scores, sims = search_pattern_set(pset, result.indexes[psi], result.query_indexes[psi],
                                          doc_ids, query_ids, gammas, beta)
        result.similarities[psi] = sims
        for g, arr in scores.items():
            table.scores[(psi, g)] = arr
            table.weights[(psi, g)] = 1
    result.timings = {"discovery": t1 - t0, "search": time.perf_counter() - t1}
    return result


def baseline_scores(documents, queries):
    doc_ids, query_ids = sorted(documents), sorted(queries)
    out = np.zeros((len(query_ids), len(doc_ids)))
    for qi, q in enumerate(query_ids):
        for di, d in enumerate(doc_ids):
            out[qi, di] = frame_dtw_baseline(queries[q], documents[d])
    return out


def _time_pairs(fn, pairs, repeats):
    best = []
    for p in pairs:
        fn(*p)  # warm-up and JIT
        runs = []
        for _ in range(repeats):
            t = time.perf_counter()
            fn(*p)
            runs.append(time.perf_counter() - t)
        best.append(min(runs))
    return float(np.mean(best))


def benchmark_latency(documents, queries, doc_index, query_index, S, pairs=40, repeats=3, seed=0):
    """Mean per-pair online latency of frame DTW vs pattern SUB and DTW search.

    Pattern timings cover building the matching matrix and scoring it;
    decoding happened offline.  Each pair is timed ``repeats`` times and
    the fastest run counts.
    """
    S = getattr(S, "values", S)
    rng = np.random.default_rng(seed)
    qids = [q for q in sorted(queries) if q in query_index.transcriptions]
    dids = [d for d in sorted(documents) if d in doc_index.transcriptions]
    picks = [(qids[rng.integers(len(qids))], dids[rng.integers(len(dids))]) for _ in range(pairs)]
    frame_pairs = [(queries[q], documents[d]) for q, d in picks]
    pat_pairs = [(doc_index.entry(d), query_index.entry(q)) for q, d in picks]
    sub, dtw = SearchMethod(1, 0, 0), SearchMethod(1, 0, 1)
    t_frame = _time_pairs(frame_dtw_baseline, frame_pairs, repeats)
    t_sub = _time_pairs(lambda d, q: relevance(d, q, sub, S), pat_pairs, repeats)
    t_dtw = _time_pairs(lambda d, q: relevance(d, q, dtw, S), pat_pairs, repeats)
    psi = doc_index.psi
    F = np.asarray(next(iter(documents.values()))).shape[1]
    frames = sum(np.asarray(documents[d]).shape[0] for d in dids)
    tokens = sum(len(doc_index.transcriptions[d].tokens) for d in dids)
    per_token = frames / tokens
    return {"psi": str(psi), "pairs": len(picks), "feature_dim": int(F),
            "mean_latency_frame_dtw": t_frame, "mean_latency_sub": t_sub, "mean_latency_dtw": t_dtw,
            "speedup_sub": t_frame / t_sub, "speedup_dtw": t_frame / t_dtw,
            "theoretical_factor_F_m2": int(F * psi.m ** 2),
            "frames_per_token": per_token, "theoretical_factor_F_T2": F * per_token ** 2}
