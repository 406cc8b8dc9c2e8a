"""Command-line pipeline: one subcommand per stage, artifacts on disk.

Layout under the artifact root (``--root``, ``$PATTERNSTD_ROOT`` or
``./artifacts``)::

    features/    manifest.tsv, <utt>.feat            (synth or features)
    patterns/    bundles.tsv, objects/<hash>.pstd    (discover)
    similarity/  <psi>.hard.pstd, <psi>.soft.pstd    (similarity)
    index/       <psi>/documents.idx, queries.idx    (index)
    search/      scores.tsv, weights.tsv, rankings.tsv
    evaluate/    report.*, trace.csv, selection.json, marginal_*.csv
    bench/       bench.json

Each stage directory holds ``STAGE.json`` (its config hash and the hashes
of the upstream stages it consumed) and ``run_meta.json`` (timings and
versions).  A stage's hash covers its own settings and its upstream
hashes, so changing anything upstream changes everything downstream.

Exit codes: 0 ok, 1 usage, 2 data error, 3 internal error.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .binio import ArtifactError, config_hash
from .corpus import (CorpusError, CorpusManifest, FeatureConfig, Utterance, extract_features,
                     load_audio, read_features, read_manifest, write_features, write_manifest)
from .discovery import DiscoveryConfig, DiscoveryError, run_grid
from .evaluation import (Ranker, fused_map, greedy_select, marginal_analysis, split_queries,
                         write_report, write_trace)
from .experiment import benchmark_latency, entries_for
from .hmm import DecodeError, GranularityConfig, TrainingError, load_bundle, save_bundle
from .indexing import build_index, load_index, save_index
from .retrieval import (ALL_METHODS, RelevanceTable, SearchMethod, fuse, read_score_records,
                        score_table, write_rankings, write_score_records)
from .similarity import build_similarity, load_similarity, save_similarity
from .synthetic import SyntheticSpec, synthesize_corpus

log = logging.getLogger("patternstd")

ROOT_ENV = "PATTERNSTD_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class StageMismatch(DataError):
    pass


@dataclass
class PipelineConfig:
    """Every setting the pipeline reads; loaded from JSON, then overridden by flags."""

    root: str = "artifacts"
    manifest: str = None
    seed: int = 0
    workers: int = 1
    features: dict = field(default_factory=lambda: dataclasses.asdict(FeatureConfig()))
    synthetic: dict = field(default_factory=dict)
    grid: dict = field(default_factory=lambda: {"m": [3, 4], "n": [24, 32], "l": [1, 2]})
    max_iterations: int = 10
    convergence_threshold: float = 0.01
    em_iterations: int = 2
    kmeans_restarts: int = 10
    nbest: int = 5
    beta: object = "100m"
    gammas: list = field(default_factory=lambda: [str(g) for g in ALL_METHODS])
    weights: str = "ones"
    greedy_budget: int = 20
    dev_fraction: float = 0.5
    normalize_sub: bool = False
    normalize_dtw: bool = True
    bench_m: int = 5
    bench_pairs: int = 40
    bench_repeats: int = 3

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def validate(self):
        if self.workers < 1:
            raise UsageError("workers must be >= 1")
        if self.nbest < 1:
            raise UsageError("nbest must be >= 1")
        if not (self.beta == "100m" or (isinstance(self.beta, (int, float)) and self.beta > 0)):
            raise UsageError("beta must be \"100m\" or a positive number")
        try:
            self.gamma_list()
            FeatureConfig(**self.features)
            SyntheticSpec.from_dict(self.synthetic)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
        if self.manifest is not None and not os.path.exists(self.manifest):
            raise UsageError(f"manifest not found: {self.manifest}")
        if self.weights not in ("ones", "greedy") and not os.path.exists(self.weights):
            raise UsageError(f"weights file not found: {self.weights}")
        for axis in ("m", "n", "l"):
            if not self.grid.get(axis):
                raise UsageError(f"grid axis {axis!r} is empty")

    def gamma_list(self):
        return sorted({SearchMethod.parse(g) for g in self.gammas})

    def discovery_config(self):
        return DiscoveryConfig.from_axes(
            self.grid["m"], self.grid["n"], self.grid["l"], max_iterations=self.max_iterations,
            convergence_threshold=self.convergence_threshold, seed=self.seed,
            em_iterations=self.em_iterations, kmeans_restarts=self.kmeans_restarts)

    def beta_for(self, psi):
        return 100.0 * psi.m if self.beta == "100m" else float(self.beta)


# ---------------------------------------------------------------- stages

def _stage_dir(cfg, name):
    return os.path.join(cfg.root, name)


def read_stage(cfg, name):
    path = os.path.join(_stage_dir(cfg, name), "STAGE.json")
    if not os.path.exists(path):
        raise DataError(f"missing upstream artifacts: no completed '{name}' stage under {cfg.root}")
    with open(path) as f:
        return json.load(f)


def _check_upstreams(stages, force):
    """Stages consumed together must agree on the upstream hashes they record."""
    current = {name: st["hash"] for name, st in stages.items()}
    for name, st in stages.items():
        for up, h in st.get("upstream", {}).items():
            if up in current and current[up] != h:
                msg = (f"stage '{name}' was built from {up} {h}, but {up} is now {current[up]}; "
                       "rerun it or pass --force")
                if not force:
                    raise StageMismatch(msg)
                log.warning(msg)


def begin_stage(cfg, name, settings, upstream, force):
    """Compute the stage hash and prepare its directory.

    An existing stage with a different hash is only replaced with --force.
    """
    h = config_hash(name, settings, {k: upstream[k] for k in sorted(upstream)})
    out = _stage_dir(cfg, name)
    stage_file = os.path.join(out, "STAGE.json")
    if os.path.exists(stage_file):
        with open(stage_file) as f:
            old = json.load(f)
        if old.get("hash") != h:
            if not force:
                raise StageMismatch(
                    f"{out} holds stage hash {old.get('hash')}, current config gives {h}; "
                    "pass --force to rebuild")
            log.warning("replacing %s (hash %s -> %s)", out, old.get("hash"), h)
            shutil.rmtree(out)
    os.makedirs(out, exist_ok=True)
    return h, out


def finish_stage(cfg, name, h, upstream, settings, timings, extra=None):
    out = _stage_dir(cfg, name)
    stage = {"stage": name, "hash": h, "seed": cfg.seed, "upstream": upstream, "settings": settings}
    with open(os.path.join(out, "STAGE.json"), "w") as f:
        json.dump(stage, f, sort_keys=True, indent=1)
        f.write("\n")
    meta = {"command": name, "config_hash": h, "seed": cfg.seed, "argv": sys.argv[1:],
            "timings": timings, "versions": _versions()}
    meta.update(extra or {})
    with open(os.path.join(out, "run_meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")


def _versions():
    import numba
    import scipy
    import sklearn
    return {"patternstd": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__, "numba": numba.__version__}


def _check_header(meta, expected, path, force):
    if meta.get("config_hash") != expected:
        msg = f"{path}: artifact hash {meta.get('config_hash')} does not match stage hash {expected}"
        if not force:
            raise StageMismatch(msg)
        log.warning(msg)


def _file_sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


# ---------------------------------------------------------------- loaders

def load_corpus(cfg):
    """(documents, queries, judgments) from the features stage."""
    path = os.path.join(_stage_dir(cfg, "features"), "manifest.tsv")
    manifest = read_manifest(path)
    docs = {u.id: read_features(u.audio_path).frames for u in manifest.documents}
    queries = {u.id: read_features(u.audio_path).frames for u in manifest.queries}
    return docs, queries, manifest.relevance_judgments


def load_bundles(cfg, force=False):
    stage = read_stage(cfg, "patterns")
    out = {}
    base = _stage_dir(cfg, "patterns")
    with open(os.path.join(base, "bundles.tsv")) as f:
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            psi, rel = line.rstrip("\n").split("\t")
            pset, meta = load_bundle(os.path.join(base, rel))
            _check_header(meta, stage["hash"], rel, force)
            out[GranularityConfig.parse(psi)] = pset
    return out, stage


def load_similarities(cfg, psis, force=False):
    stage = read_stage(cfg, "similarity")
    out = {}
    for psi in psis:
        sims = {}
        for mode in ("hard", "soft"):
            path = os.path.join(_stage_dir(cfg, "similarity"), f"{psi}.{mode}.pstd")
            if os.path.exists(path):
                sim, meta = load_similarity(path)
                _check_header(meta, stage["hash"], path, force)
                sims[mode] = sim
        out[psi] = sims
    return out, stage


def load_indexes(cfg, force=False):
    stage = read_stage(cfg, "index")
    out = {}
    for psi_text in stage["settings"]["psis"]:
        psi = GranularityConfig.parse(psi_text)
        pair = []
        for part in ("documents", "queries"):
            path = os.path.join(_stage_dir(cfg, "index"), psi_text, f"{part}.idx")
            index, meta = load_index(path)
            _check_header(meta, stage["hash"], path, force)
            pair.append(index)
        out[psi] = tuple(pair)
    return out, stage


def read_weights(path, keys):
    """psi<TAB>gamma<TAB>weight lines; unlisted keys get weight 0."""
    weights = {k: 0 for k in keys}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split()
            if len(cols) != 3:
                raise DataError(f"{path}:{lineno}: expected 'psi gamma weight'")
            key = (GranularityConfig.parse(cols[0]), SearchMethod.parse(cols[1]))
            w = float(cols[2])
            if w not in (0.0, 1.0):
                raise DataError(f"{path}:{lineno}: weight must be 0 or 1")
            weights[key] = int(w)
    return weights


def write_weights(path, weights):
    with open(path, "w") as f:
        for (psi, gamma) in sorted(weights):
            f.write(f"{psi}\t{gamma}\t{weights[(psi, gamma)]}\n")


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, args):
    spec = SyntheticSpec.smoke() if args.preset == "smoke" else SyntheticSpec()
    spec = SyntheticSpec.from_dict({**spec.to_dict(), **cfg.synthetic})
    settings = {"source": "synthetic", "spec": spec.to_dict()}
    h, out = begin_stage(cfg, "features", settings, {}, args.force)
    t0 = time.perf_counter()
    corpus = synthesize_corpus(spec, cfg.seed, out)
    # stamp the manifest with the stage hash
    m = corpus.manifest
    write_manifest(os.path.join(out, "manifest.tsv"),
                   CorpusManifest(m.documents, m.queries, m.relevance_judgments,
                                  {**m.meta, "config_hash": h}))
    finish_stage(cfg, "features", h, {}, settings, {"total": time.perf_counter() - t0},
                 {"documents": len(m.documents), "queries": len(m.queries)})
    print(f"synthetic corpus: {len(m.documents)} documents, {len(m.queries)} queries -> {out}")
    return EXIT_OK


def cmd_features(cfg, args):
    if cfg.manifest is None:
        raise UsageError("features needs an audio manifest (--manifest or config 'manifest')")
    fcfg = FeatureConfig(**cfg.features)
    settings = {"source": "audio", "features": dataclasses.asdict(fcfg),
                "manifest_sha": _file_sha(cfg.manifest)}
    h, out = begin_stage(cfg, "features", settings, {}, args.force)
    t0 = time.perf_counter()
    src = read_manifest(cfg.manifest)
    failures = {}
    kept = {"document": [], "query": []}
    for role, utts in (("document", src.documents), ("query", src.queries)):
        for u in utts:
            try:
                x, rate = load_audio(u.audio_path)
                seq = extract_features(x, rate, fcfg, u.id)
            except CorpusError as exc:
                failures[u.id] = str(exc)
                log.error("%s: %s", u.id, exc)
                continue
            write_features(os.path.join(out, f"{u.id}.feat"), seq)
            kept[role].append(Utterance(u.id, f"{u.id}.feat", rate, len(x) / rate))
    doc_ids = {u.id for u in kept["document"]}
    judg = {q.id: src.relevance_judgments.get(q.id, set()) & doc_ids for q in kept["query"]}
    write_manifest(os.path.join(out, "manifest.tsv"),
                   CorpusManifest(kept["document"], kept["query"], judg,
                                  {"config_hash": h, "seed": cfg.seed, "source": "audio"}))
    if failures:
        with open(os.path.join(out, "failures.json"), "w") as f:
            json.dump(failures, f, sort_keys=True, indent=1)
    finish_stage(cfg, "features", h, {}, settings, {"total": time.perf_counter() - t0},
                 {"failures": len(failures)})
    print(f"features: {len(doc_ids)} documents, {len(kept['query'])} queries, "
          f"{len(failures)} failures -> {out}")
    return EXIT_DATA if failures else EXIT_OK


def cmd_discover(cfg, args):
    feat = read_stage(cfg, "features")
    dcfg = cfg.discovery_config()
    settings = dcfg.to_dict()
    upstream = {"features": feat["hash"]}
    h, out = begin_stage(cfg, "patterns", settings, upstream, args.force)
    docs, _, _ = load_corpus(cfg)
    t0 = time.perf_counter()
    grid = run_grid(docs, dcfg, workers=cfg.workers)
    elapsed = time.perf_counter() - t0
    objects = os.path.join(out, "objects")
    os.makedirs(objects, exist_ok=True)
    lines = []
    for psi in sorted(grid.pattern_sets):
        tmp = os.path.join(objects, f"tmp-{psi}.pstd")
        save_bundle(tmp, grid.pattern_sets[psi], {"config_hash": h, "seed": cfg.seed, "psi": str(psi)})
        rel = os.path.join("objects", f"{_file_sha(tmp)}.pstd")
        os.replace(tmp, os.path.join(out, rel))
        lines.append(f"{psi}\t{rel}\n")
    with open(os.path.join(out, "bundles.tsv"), "w") as f:
        f.writelines(lines)
    with open(os.path.join(out, "provenance.json"), "w") as f:
        json.dump({"provenance": {str(k): v for k, v in sorted(grid.provenance.items())},
                   "failures": {str(k): v for k, v in sorted(grid.failures.items())}},
                  f, sort_keys=True, indent=1)
        f.write("\n")
    finish_stage(cfg, "patterns", h, upstream, settings, {"total": elapsed},
                 {"pattern_sets": len(grid.pattern_sets), "failures": len(grid.failures)})
    print(f"discovered {len(grid.pattern_sets)} pattern sets, {len(grid.failures)} failures -> {out}")
    return EXIT_DATA if grid.failures else EXIT_OK


def cmd_similarity(cfg, args):
    bundles, pstage = load_bundles(cfg, args.force)
    modes = ["hard", "soft"] if args.mode == "both" else [args.mode]
    settings = {"beta": cfg.beta, "modes": modes}
    upstream = {"patterns": pstage["hash"]}
    h, out = begin_stage(cfg, "similarity", settings, upstream, args.force)
    t0 = time.perf_counter()
    for psi in sorted(bundles):
        for mode in modes:
            sim = build_similarity(bundles[psi], mode, cfg.beta_for(psi) if mode == "soft" else None)
            save_similarity(os.path.join(out, f"{psi}.{mode}.pstd"), sim,
                            {"config_hash": h, "seed": cfg.seed})
    finish_stage(cfg, "similarity", h, upstream, settings, {"total": time.perf_counter() - t0})
    print(f"similarity matrices for {len(bundles)} pattern sets -> {out}")
    return EXIT_OK


def cmd_index(cfg, args):
    bundles, pstage = load_bundles(cfg, args.force)
    feat = read_stage(cfg, "features")
    _check_upstreams({"patterns": pstage, "features": feat}, args.force)
    psis = [str(p) for p in sorted(bundles)]
    settings = {"nbest": cfg.nbest, "psis": psis}
    upstream = {"patterns": pstage["hash"], "features": feat["hash"]}
    h, out = begin_stage(cfg, "index", settings, upstream, args.force)
    docs, queries, _ = load_corpus(cfg)
    t0 = time.perf_counter()
    failures = 0
    for psi in sorted(bundles):
        d = os.path.join(out, str(psi))
        os.makedirs(d, exist_ok=True)
        for part, corpus in (("documents", docs), ("queries", queries)):
            index = build_index(bundles[psi], corpus, cfg.nbest)
            failures += len(index.failures)
            save_index(os.path.join(d, f"{part}.idx"), index, {"config_hash": h, "seed": cfg.seed})
    finish_stage(cfg, "index", h, upstream, settings, {"total": time.perf_counter() - t0},
                 {"decode_failures": failures})
    print(f"indexed {len(docs)} documents and {len(queries)} queries under {len(bundles)} "
          f"pattern sets ({failures} decode failures) -> {out}")
    return EXIT_OK


def _search_table(cfg, indexes, sims, doc_ids, query_ids):
    table = RelevanceTable(query_ids, doc_ids)
    for psi in sorted(indexes):
        dindex, qindex = indexes[psi]
        docs, qs = entries_for(dindex, doc_ids), entries_for(qindex, query_ids)
        live_d = [i for i, e in enumerate(docs) if e is not None]
        live_q = [i for i, e in enumerate(qs) if e is not None]
        partial = score_table([docs[i] for i in live_d], [qs[i] for i in live_q],
                              {k: v.values for k, v in sims[psi].items()}, cfg.gamma_list(),
                              cfg.normalize_sub, cfg.normalize_dtw)
        for g, arr in partial.items():
            full = np.zeros((len(query_ids), len(doc_ids)))
            full[np.ix_(live_q, live_d)] = arr
            table.scores[(psi, g)] = full
    return table


def cmd_search(cfg, args):
    indexes, istage = load_indexes(cfg, args.force)
    sims, sstage = load_similarities(cfg, sorted(indexes), args.force)
    _check_upstreams({"index": istage, "similarity": sstage, "patterns": read_stage(cfg, "patterns")},
                     args.force)
    needed = {g.mode for g in cfg.gamma_list()}
    for psi in indexes:
        missing = needed - set(sims[psi])
        if missing:
            raise DataError(f"no {'/'.join(sorted(missing))} similarity matrix for {psi}")
    wsrc = cfg.weights if cfg.weights in ("ones", "greedy") else {"file": _file_sha(cfg.weights)}
    settings = {"gammas": [str(g) for g in cfg.gamma_list()], "weights": wsrc,
                "normalize_sub": cfg.normalize_sub, "normalize_dtw": cfg.normalize_dtw,
                "greedy_budget": cfg.greedy_budget, "dev_fraction": cfg.dev_fraction}
    upstream = {"index": istage["hash"], "similarity": sstage["hash"]}
    h, out = begin_stage(cfg, "search", settings, upstream, args.force)
    any_index = next(iter(indexes.values()))
    doc_ids = sorted(set(any_index[0].transcriptions) | set(any_index[0].failures))
    query_ids = sorted(set(any_index[1].transcriptions) | set(any_index[1].failures))
    t0 = time.perf_counter()
    table = _search_table(cfg, indexes, sims, doc_ids, query_ids)
    t_score = time.perf_counter() - t0
    keys = table.keys
    if cfg.weights == "ones":
        table.weights = {k: 1 for k in keys}
    elif cfg.weights == "greedy":
        _, _, judg = load_corpus(cfg)
        dev, _ = split_queries(query_ids, cfg.dev_fraction, cfg.seed)
        rows = [query_ids.index(q) for q in dev]
        ranker = Ranker(dev, doc_ids, judg)
        trace = greedy_select({k: table.scores[k][rows] for k in keys}, ranker,
                              min(cfg.greedy_budget, len(keys)))
        chosen = {k for k, _ in trace}
        table.weights = {k: int(k in chosen) for k in keys}
    else:
        table.weights = read_weights(cfg.weights, keys)
    header = {"config_hash": h, "seed": cfg.seed}
    write_score_records(os.path.join(out, "scores.tsv"), table, header)
    write_weights(os.path.join(out, "weights.tsv"), table.weights)
    enabled = sum(1 for w in table.weights.values() if w)
    if enabled == 0:
        log.warning("no (psi, gamma) pair has weight 1; rankings are empty")
        with open(os.path.join(out, "rankings.tsv"), "w") as f:
            f.write("".join(f"# {k}={header[k]}\n" for k in sorted(header)))
    else:
        write_rankings(os.path.join(out, "rankings.tsv"), table, fuse(table), header)
    finish_stage(cfg, "search", h, upstream, settings,
                 {"scoring": t_score, "total": time.perf_counter() - t0},
                 {"pairs": len(query_ids) * len(doc_ids), "keys": len(keys), "enabled": enabled})
    print(f"scored {len(query_ids)} x {len(doc_ids)} pairs under {len(keys)} (psi, gamma) keys, "
          f"{enabled} enabled -> {out}")
    return EXIT_OK


def _rows(table, ids):
    pos = {q: i for i, q in enumerate(table.query_ids)}
    return [pos[q] for q in ids]


def cmd_evaluate(cfg, args):
    sstage = read_stage(cfg, "search")
    settings = {"greedy_budget": cfg.greedy_budget, "dev_fraction": cfg.dev_fraction}
    upstream = {"search": sstage["hash"]}
    h, out = begin_stage(cfg, "evaluate", settings, upstream, args.force)
    t0 = time.perf_counter()
    sdir = _stage_dir(cfg, "search")
    table = read_score_records(os.path.join(sdir, "scores.tsv"), GranularityConfig.parse)
    table.weights = read_weights(os.path.join(sdir, "weights.tsv"), table.keys)
    _, _, judg = load_corpus(cfg)
    ranker = Ranker(table.query_ids, table.document_ids, judg)
    report = ranker.report(fuse(table))
    report.per_key_map = {k: ranker.map(table.scores[k]) for k in table.keys}
    write_report(out, report)

    dev, ev = split_queries(table.query_ids, cfg.dev_fraction, cfg.seed)
    dev_r, ev_r = Ranker(dev, table.document_ids, judg), Ranker(ev, table.document_ids, judg)
    dev_scores = {k: table.scores[k][_rows(table, dev)] for k in table.keys}
    ev_scores = {k: table.scores[k][_rows(table, ev)] for k in table.keys}
    budget = min(cfg.greedy_budget, len(table.keys))
    trace = greedy_select(dev_scores, dev_r, budget)
    oracle = greedy_select(ev_scores, ev_r, budget)
    write_trace(os.path.join(out, "trace.csv"), trace, ev_r, ev_scores)
    selection = {
        "budget": budget, "dev_queries": dev, "eval_queries": ev,
        "all_ones_eval_map": fused_map(ev_scores, table.keys, ev_r),
        "dev_selected_eval_map": fused_map(ev_scores, [k for k, _ in trace], ev_r),
        "oracle_eval_map": oracle[-1][1],
        "dev_selected": [[str(p), str(g)] for (p, g), _ in trace]}
    with open(os.path.join(out, "selection.json"), "w") as f:
        json.dump(selection, f, sort_keys=True, indent=1)
        f.write("\n")
    marginal_analysis(table.scores, ranker, out_dir=out)
    finish_stage(cfg, "evaluate", h, upstream, settings, {"total": time.perf_counter() - t0})
    print(f"MAP {report.map:.4f}  P@5 {report.p_at_5:.4f}  P@10 {report.p_at_10:.4f}  "
          f"({len(report.average_precision)} queries)")
    print(f"eval split: all-ones {selection['all_ones_eval_map']:.4f}  "
          f"dev-selected {selection['dev_selected_eval_map']:.4f}  oracle {selection['oracle_eval_map']:.4f}")
    return EXIT_OK


def cmd_bench(cfg, args):
    indexes, istage = load_indexes(cfg, args.force)
    sims, _ = load_similarities(cfg, sorted(indexes), args.force)
    candidates = sorted(p for p in indexes if p.m == cfg.bench_m and "soft" in sims[p])
    if not candidates:
        raise DataError(f"no indexed pattern set with m={cfg.bench_m} and a soft similarity matrix")
    psi = candidates[0]
    settings = {"psi": str(psi), "pairs": cfg.bench_pairs, "repeats": cfg.bench_repeats}
    upstream = {"index": istage["hash"]}
    h, out = begin_stage(cfg, "bench", settings, upstream, args.force)
    docs, queries, _ = load_corpus(cfg)
    dindex, qindex = indexes[psi]
    result = benchmark_latency(docs, queries, dindex, qindex, sims[psi]["soft"], cfg.bench_pairs,
                               cfg.bench_repeats, cfg.seed)
    t_frame, t_sub, t_dtw = (result[f"mean_latency_{k}"] for k in ("frame_dtw", "sub", "dtw"))
    F, per_token = result["feature_dim"], result["frames_per_token"]
    with open(os.path.join(out, "bench.json"), "w") as f:
        json.dump(result, f, sort_keys=True, indent=1)
        f.write("\n")
    finish_stage(cfg, "bench", h, upstream, settings, {"frame_dtw": t_frame, "sub": t_sub, "dtw": t_dtw})
    print(f"pattern set {psi}, {result['pairs']} pairs, mean per-pair latency:")
    print(f"  frame DTW baseline  {t_frame * 1e3:9.3f} ms")
    print(f"  pattern SUB         {t_sub * 1e3:9.3f} ms   ratio {t_frame / t_sub:8.1f}x")
    print(f"  pattern DTW         {t_dtw * 1e3:9.3f} ms   ratio {t_frame / t_dtw:8.1f}x")
    print(f"  theoretical F*m^2 = {F * psi.m ** 2}  (F*T^2 with T={per_token:.2f} frames/token: "
          f"{F * per_token ** 2:.0f})")
    return EXIT_OK


def cmd_pipeline(cfg, args):
    steps = [cmd_features if cfg.manifest else cmd_synth, cmd_discover, cmd_similarity,
             cmd_index, cmd_search, cmd_evaluate]
    worst = EXIT_OK
    for step in steps:
        code = step(cfg, args)
        if code == EXIT_DATA and step is cmd_discover:
            worst = code  # partial grids still flow downstream
        elif code != EXIT_OK:
            return code
    return worst


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "discover": cmd_discover,
            "similarity": cmd_similarity, "index": cmd_index, "search": cmd_search,
            "evaluate": cmd_evaluate, "bench": cmd_bench, "pipeline": cmd_pipeline}


# ---------------------------------------------------------------- argument handling

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    return [int(v) for v in text.split(",") if v]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--root", help=f"artifact root (default ${ROOT_ENV} or ./artifacts)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; VALUE is parsed as JSON when possible")
    common.add_argument("--force", action="store_true", help="rebuild despite config hash mismatches")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="patternstd", description="Spoken term detection with multi-granularity acoustic patterns")
    p.add_argument("--version", action="version", version=f"patternstd {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus as features")
    s.add_argument("--preset", choices=["default", "smoke"], default="default")
    s = sub.add_parser("features", parents=[common], help="MFCC features from an audio manifest")
    s.add_argument("--manifest")
    s = sub.add_parser("discover", parents=[common], help="train pattern sets over the grid")
    s.add_argument("--m", type=_int_list)
    s.add_argument("--n", type=_int_list)
    s.add_argument("--l", type=_int_list)
    s = sub.add_parser("similarity", parents=[common], help="pattern similarity matrices")
    s.add_argument("--mode", choices=["both", "hard", "soft"], default="both")
    s.add_argument("--beta", help='"100m" or a positive number')
    s = sub.add_parser("index", parents=[common], help="decode documents and queries")
    s.add_argument("--nbest", type=int)
    s = sub.add_parser("search", parents=[common], help="score every query against every document")
    s.add_argument("--gammas", help="comma-separated search methods, e.g. 100,101")
    s.add_argument("--weights", help='"ones", "greedy" or a weights file')
    sub.add_parser("evaluate", parents=[common], help="MAP reports, greedy selection, marginals")
    sub.add_parser("bench", parents=[common], help="online latency: pattern search vs frame DTW")
    s = sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    s.add_argument("--preset", choices=["default", "smoke"], default="default")
    s.add_argument("--manifest")
    s.add_argument("--mode", choices=["both", "hard", "soft"], default="both")
    return p


def resolve_config(args):
    data = {}
    if args.config:
        try:
            with open(args.config) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    cfg = PipelineConfig.from_dict(data)
    cfg.root = os.environ.get(ROOT_ENV, cfg.root) if not args.root else args.root
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        if key not in {f.name for f in dataclasses.fields(cfg)}:
            raise UsageError(f"unknown config key {key!r}")
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
        setattr(cfg, key, value)
    for name in ("seed", "workers", "manifest", "nbest", "weights"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    for axis in ("m", "n", "l"):
        v = getattr(args, axis, None)
        if v:
            cfg.grid = {**cfg.grid, axis: v}
    if getattr(args, "beta", None):
        cfg.beta = args.beta if args.beta == "100m" else float(args.beta)
    if getattr(args, "gammas", None):
        cfg.gammas = args.gammas.split(",")
    cfg.validate()
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"patternstd: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, ArtifactError, DiscoveryError, DecodeError, TrainingError,
            FileNotFoundError, KeyError) as exc:
        print(f"patternstd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"patternstd: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
