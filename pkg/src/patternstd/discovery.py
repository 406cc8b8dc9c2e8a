"""Unsupervised pattern discovery over a granularity grid.

For one granularity (m, n, l) discovery alternates two steps until the
frame labels settle: re-estimate every pattern HMM on the segments
currently labeled with it, then relabel the corpus by free-pattern
decoding.  The starting labels come from cutting every utterance into
3m-frame segments and clustering the segment means into n groups.

Grid runs train every (m, n) cell at one Gaussian per state and then add
Gaussians one at a time, continuing training from the previous labels.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from sklearn.cluster import KMeans

from .hmm import (GranularityConfig, Transcription, as_frames, baum_welch,
                  fixed_label_log_likelihood, flat_start, global_variance_floor,
                  split_components, viterbi_free_decode)

log = logging.getLogger(__name__)

# full-scale grid: 5 x 4 x 4 = 80 pattern sets
FULL_M = (3, 5, 7, 9, 11)
FULL_N = (50, 100, 200, 300)
FULL_L = (1, 2, 3, 4)


class DiscoveryError(ValueError):
    pass


@dataclass
class DiscoveryConfig:
    grid: list
    max_iterations: int = 10
    convergence_threshold: float = 0.01
    seed: int = 0
    em_iterations: int = 2
    kmeans_restarts: int = 10

    def __post_init__(self):
        self.grid = [g if isinstance(g, GranularityConfig) else GranularityConfig(*g) for g in self.grid]
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 < self.convergence_threshold <= 1.0:
            raise ValueError("convergence_threshold must be in (0, 1]")
        if self.em_iterations < 1:
            raise ValueError("em_iterations must be >= 1")

    @classmethod
    def from_axes(cls, ms, ns, ls, **kw):
        return cls([GranularityConfig(m, n, l) for m, n, l in product(ms, ns, ls)], **kw)

    @classmethod
    def full_grid(cls, **kw):
        return cls.from_axes(FULL_M, FULL_N, FULL_L, **kw)

    def to_dict(self):
        return {"grid": [list(g.to_tuple()) for g in self.grid],
                "max_iterations": self.max_iterations,
                "convergence_threshold": self.convergence_threshold,
                "seed": self.seed, "em_iterations": self.em_iterations,
                "kmeans_restarts": self.kmeans_restarts}


@dataclass
class GridResult:
    pattern_sets: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not self.failures


def initialize_labels(corpus, psi, seed=0, restarts=10):
    """Initial labels: uniform 3m-frame segments clustered by k-means.

    The last segment of each utterance absorbs the remainder.  Clustering
    uses segment mean vectors; the best of ``restarts`` seeded runs by
    distortion wins.
    """
    if not corpus:
        raise DiscoveryError("empty corpus")
    target = 3 * psi.m
    keys = sorted(corpus)
    spans, vecs = [], []
    for uid in keys:
        X = as_frames(corpus[uid])
        T = X.shape[0]
        if T < psi.m:
            raise DiscoveryError(f"{uid}: {T} frames is shorter than m={psi.m}")
        nseg = max(1, T // target)
        bounds = [(i * target, (i + 1) * target - 1) for i in range(nseg - 1)]
        bounds.append(((nseg - 1) * target, T - 1))
        for s, e in bounds:
            spans.append((uid, s, e))
            vecs.append(X[s:e + 1].mean(0))
    if len(spans) < psi.n:
        raise DiscoveryError(f"insufficient data for n patterns: {len(spans)} segments < n={psi.n}")
    if psi.n == 1:
        assign = np.zeros(len(spans), dtype=np.int64)
    else:
        km = KMeans(n_clusters=psi.n, n_init=restarts, random_state=seed, algorithm="lloyd")
        assign = km.fit_predict(np.vstack(vecs))
    labels = {uid: [] for uid in keys}
    for (uid, s, e), r in zip(spans, assign):
        labels[uid].append((int(r), s, e))
    return {uid: Transcription(uid, toks) for uid, toks in labels.items()}


def decode_corpus(pset, corpus):
    return {uid: viterbi_free_decode(pset, corpus[uid], uid) for uid in sorted(corpus)}


def label_change_fraction(old, new):
    changed = total = 0
    for uid in old:
        a, b = old[uid].frame_labels(), new[uid].frame_labels()
        changed += int(np.count_nonzero(a != b))
        total += a.size
    return changed / total


def frames_per_pattern(labels, n):
    counts = np.zeros(n, dtype=np.int64)
    for tr in labels.values():
        for r, s, e in tr.tokens:
            counts[r] += e - s + 1
    return counts


def reseed_dead_patterns(pset, labels, scale=0.2):
    """Give patterns without frames a perturbed copy of the busiest pattern.

    Returns the list of (dead, donor) pairs handled.
    """
    counts = frames_per_pattern(labels, pset.n).astype(np.float64)
    moves = []
    for r in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        if counts[donor] == 0:
            break
        sd = np.sqrt(pset.variances[donor])
        pset.means[r] = pset.means[donor] + scale * sd
        pset.means[donor] = pset.means[donor] - scale * sd
        pset.variances[r] = pset.variances[donor]
        pset.weights[r] = pset.weights[donor]
        pset.self_loop[r] = pset.self_loop[donor]
        counts[donor] /= 2.0
        counts[r] = counts[donor]
        moves.append((int(r), donor))
    return moves


def _iterate(pset, corpus, labels, config, stage):
    """Alternate re-estimation and relabeling; returns (set, labels)."""
    for it in range(1, config.max_iterations + 1):
        em_ll = []
        for _ in range(config.em_iterations):
            pset, before = baum_welch(pset, corpus, labels, with_loglik=True)
            em_ll.append(before)
        em_ll.append(fixed_label_log_likelihood(pset, corpus, labels))
        new_labels = decode_corpus(pset, corpus)
        change = label_change_fraction(labels, new_labels)
        decode_ll = sum(tr.total_log_likelihood for tr in new_labels.values())
        labels = new_labels
        done = change < config.convergence_threshold or config.convergence_threshold >= 1.0
        dead = [] if done else reseed_dead_patterns(pset, labels)
        pset.training_log.append({
            "stage": stage, "iteration": it, "em_loglik": em_ll,
            "change_fraction": change, "decode_loglik": decode_ll, "reseeded": len(dead)})
        log.info("%s %s iter %d: change=%.4f decode_ll=%.1f", pset.config, stage, it, change, decode_ll)
        if done:
            break
    return pset, labels


def _discover(corpus, psi, config):
    base = GranularityConfig(psi.m, psi.n, 1)
    labels = initialize_labels(corpus, base, config.seed, config.kmeans_restarts)
    pset = flat_start(base, corpus, labels, global_variance_floor(corpus))
    reseed_dead_patterns(pset, labels)
    pset, labels = _iterate(pset, corpus, labels, config, "l1")
    while pset.config.l < psi.l:
        pset, labels = _grow(pset, corpus, labels, config)
    return pset, labels


def discover(corpus, psi, config):
    """Train one converged pattern set for granularity ``psi``."""
    return _discover(corpus, psi, config)[0]


def _grow(base, corpus, labels, config):
    pset = split_components(base)
    return _iterate(pset, corpus, labels, config, f"l{pset.config.l}")


def grow_gaussians(base, corpus, config, labels=None):
    """Add one Gaussian per state to a converged set and retrain.

    Training restarts from ``labels`` (the base set's final labels); when
    omitted they are recovered by decoding the corpus with ``base``.
    """
    if labels is None:
        labels = decode_corpus(base, corpus)
    return _grow(base, corpus, labels, config)[0]


def _run_cell(corpus, m, n, ls, config):
    """Train the l-chain of one (m, n) cell.  Returns {psi: (set or error, provenance)}."""
    out = {}
    try:
        pset, labels = _discover(corpus, GranularityConfig(m, n, 1), config)
    except Exception as exc:  # recorded per psi, the grid carries on
        for l in ls:
            out[GranularityConfig(m, n, l)] = (f"{type(exc).__name__}: {exc}", None)
        return out
    parent = None
    for l in range(1, max(ls) + 1):
        psi = GranularityConfig(m, n, l)
        if l > 1:
            try:
                pset, labels = _grow(pset, corpus, labels, config)
            except Exception as exc:
                for rest in ls:
                    if rest >= l:
                        out[GranularityConfig(m, n, rest)] = (f"{type(exc).__name__}: {exc}", None)
                return out
        if l in ls:
            stage = [e for e in pset.training_log if e["stage"] == f"l{l}"]
            out[psi] = (pset.copy(), {
                "parent": str(parent) if parent else None,
                "iterations": len(stage),
                "change_curve": [e["change_fraction"] for e in stage]})
        parent = psi
    return out


_WORKER_CORPUS = None


def _init_worker(corpus):
    global _WORKER_CORPUS
    _WORKER_CORPUS = corpus


def _cell_task(args):
    m, n, ls, config = args
    return _run_cell(_WORKER_CORPUS, m, n, ls, config)


def run_grid(corpus, config, workers=1):
    """Train every requested granularity; per-cell failures are recorded."""
    if not config.grid:
        raise DiscoveryError("empty granularity grid")
    cells = {}
    for psi in config.grid:
        cells.setdefault((psi.m, psi.n), set()).add(psi.l)
    tasks = [(m, n, sorted(ls), config) for (m, n), ls in sorted(cells.items())]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(corpus,)) as ex:
            results = list(ex.map(_cell_task, tasks))
    else:
        results = [_run_cell(corpus, *t) for t in tasks]
    grid = GridResult()
    for res in results:
        for psi, (value, prov) in res.items():
            if prov is None:
                grid.failures[psi] = value
                log.error("discovery failed for %s: %s", psi, value)
            else:
                grid.pattern_sets[psi] = value
                grid.provenance[psi] = prov
    return grid


def frame_purity(labels, truth):
    """Fraction of frames whose pattern's majority true unit matches theirs."""
    pairs = {}
    total = 0
    for uid, tr in labels.items():
        lab = tr.frame_labels()
        for p, u in zip(lab, truth[uid]):
            pairs[(int(p), int(u))] = pairs.get((int(p), int(u)), 0) + 1
        total += lab.size
    best = {}
    for (p, u), c in pairs.items():
        best[p] = max(best.get(p, 0), c)
    return sum(best.values()) / total
