"""Online matching of queries against indexed documents.

A search method is three bits (soft, nbest, dtw):

* soft  - soft (exp -KL) or hard (identity) pattern similarity S
* nbest - matching matrix from posteriorgrams, W = P_d S P_q^T, or from
          1-best indices, W[i, j] = S[d_i, q_j]
* dtw   - subsequence DTW over W, or best diagonal (SUB) alignment

Relevance scores from many (pattern set, method) pairs are fused by a
0/1-weighted sum.
"""

import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import _kernels
from .hmm import as_frames

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class SearchMethod:
    soft: int
    nbest: int
    dtw: int

    def __str__(self):
        return f"{self.soft}{self.nbest}{self.dtw}"

    @classmethod
    def parse(cls, text):
        text = str(text).strip().strip("()").replace(",", "")
        if len(text) != 3 or set(text) - {"0", "1"}:
            raise ValueError(f"search method must be three binary digits, got {text!r}")
        return cls(*(int(c) for c in text))

    @property
    def mode(self):
        return "soft" if self.soft else "hard"


ALL_METHODS = tuple(SearchMethod(*bits) for bits in product((0, 1), repeat=3))


@dataclass
class MatchingMatrix:
    document_id: str
    query_id: str
    psi: object
    gamma: SearchMethod
    values: np.ndarray


@dataclass
class RelevanceTable:
    """Scores per (psi, gamma) as (num_queries, num_documents) arrays."""

    query_ids: list
    document_ids: list
    scores: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def score(self, psi, gamma, document_id, query_id):
        return self.scores[(psi, gamma)][self.query_ids.index(query_id),
                                         self.document_ids.index(document_id)]

    @property
    def keys(self):
        return sorted(self.scores)

    def fused(self):
        return fuse(self)


def build_matching_matrix(doc, query, S, gamma, psi=None):
    """D x Q matching matrix between two indexed utterances."""
    S = getattr(S, "values", S)
    if S.shape[0] != doc.posteriorgram.shape[1] or S.shape[0] != query.posteriorgram.shape[1]:
        raise ValueError("similarity matrix and index disagree on the number of patterns")
    if gamma.nbest:
        W = doc.posteriorgram @ S @ query.posteriorgram.T
        W = np.clip(W, 0.0, 1.0)
    else:
        W = S[np.ix_(doc.patterns, query.patterns)]
    return MatchingMatrix(doc.utterance_id, query.utterance_id, psi, gamma, W)


def score_sub(W, normalize=False):
    """Best diagonal alignment of the query inside the document.

    When the document is shorter than the query the roles swap and the
    best sum is divided by the document length.
    """
    W = np.ascontiguousarray(getattr(W, "values", W), dtype=np.float64)
    D, Q = W.shape
    if D >= Q:
        best = float(_kernels.sub_scores(W).max())
        return best / Q if normalize else best
    return float(_kernels.sub_scores(np.ascontiguousarray(W.T)).max()) / D


def score_dtw(W, normalize=True):
    """Best subsequence DTW path; by default the path-length-normalized average."""
    W = np.ascontiguousarray(getattr(W, "values", W), dtype=np.float64)
    if W.size == 0:
        raise ValueError("empty matching matrix")
    if normalize:
        return float(_kernels.dtw_max_average(W))
    return float(_kernels.dtw_max_sum(W))


def relevance(doc, query, gamma, S, normalize_sub=False, normalize_dtw=True):
    """R(d, q) for one pattern set and one search method."""
    W = build_matching_matrix(doc, query, S, gamma).values
    if gamma.dtw:
        return score_dtw(W, normalize_dtw)
    return score_sub(W, normalize_sub)


def score_table(doc_entries, query_entries, similarities, gammas=ALL_METHODS,
                normalize_sub=False, normalize_dtw=True):
    """Scores of every query against every document for one pattern set.

    ``similarities`` maps "hard"/"soft" to matrices.  Returns
    {gamma: array (num_queries, num_documents)}.
    """
    out = {}
    for gamma in gammas:
        S = getattr(similarities[gamma.mode], "values", similarities[gamma.mode])
        table = np.zeros((len(query_entries), len(doc_entries)))
        for qi, q in enumerate(query_entries):
            for di, d in enumerate(doc_entries):
                table[qi, di] = relevance(d, q, gamma, S, normalize_sub, normalize_dtw)
        out[gamma] = table
    return out


def fuse(table):
    """Weighted sum of score arrays over every enabled (psi, gamma)."""
    fused = np.zeros((len(table.query_ids), len(table.document_ids)))
    for key in sorted(table.weights):
        w = table.weights[key]
        if w == 0:
            continue
        if w not in (0, 1):
            raise ValueError(f"weight for {key} must be 0 or 1, got {w}")
        if key not in table.scores:
            raise KeyError(f"no scores for enabled pair {key}")
        fused += table.scores[key]
    return fused


def cosine_similarity_matrix(A, B):
    """(1 + cos) / 2 between rows of A and rows of B; zero rows count as cos 0."""
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    na[na == 0] = np.inf
    nb[nb == 0] = np.inf
    cos = (A / na[:, None]) @ (B / nb[:, None]).T
    return np.clip(0.5 * (1.0 + cos), 0.0, 1.0)


def frame_dtw_baseline(query, doc, normalize=True):
    """Subsequence DTW on raw feature frames with cosine similarity."""
    Q, Dm = as_frames(query), as_frames(doc)
    if Q.shape[0] == 0 or Dm.shape[0] == 0:
        raise ValueError("empty feature sequence")
    return score_dtw(cosine_similarity_matrix(Dm, Q), normalize)


def _meta_lines(meta):
    return "".join(f"# {k}={meta[k]}\n" for k in sorted(meta or {}))


def write_score_records(path, table, meta=None):
    """Text records: query_id, doc_id, psi, gamma, score; ``#`` lines carry metadata."""
    with open(path, "w") as f:
        f.write(_meta_lines(meta))
        for psi, gamma in table.keys:
            arr = table.scores[(psi, gamma)]
            for qi, q in enumerate(table.query_ids):
                for di, d in enumerate(table.document_ids):
                    f.write(f"{q}\t{d}\t{psi}\t{gamma}\t{float(arr[qi, di])!r}\n")


def read_score_records(path, psi_parser):
    rows = {}
    qids, dids = {}, {}
    with open(path) as f:
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            q, d, psi, gamma, score = line.rstrip("\n").split("\t")
            key = (psi_parser(psi), SearchMethod.parse(gamma))
            rows.setdefault(key, []).append((q, d, float(score)))
            qids.setdefault(q, None)
            dids.setdefault(d, None)
    table = RelevanceTable(sorted(qids), sorted(dids))
    qpos = {q: i for i, q in enumerate(table.query_ids)}
    dpos = {d: i for i, d in enumerate(table.document_ids)}
    for key, recs in rows.items():
        arr = np.zeros((len(qpos), len(dpos)))
        for q, d, s in recs:
            arr[qpos[q], dpos[d]] = s
        table.scores[key] = arr
    return table


def rank(fused_row, document_ids):
    """Documents by descending score, ties by document id."""
    order = sorted(range(len(document_ids)), key=lambda i: (-fused_row[i], document_ids[i]))
    return [document_ids[i] for i in order]


def write_rankings(path, table, fused, meta=None):
    pos = {d: i for i, d in enumerate(table.document_ids)}
    with open(path, "w") as f:
        f.write(_meta_lines(meta))
        for qi, q in enumerate(table.query_ids):
            ranked = rank(fused[qi], table.document_ids)
            items = " ".join(f"{d}:{float(fused[qi, pos[d]])!r}" for d in ranked)
            f.write(f"{q}\t{items}\n")
