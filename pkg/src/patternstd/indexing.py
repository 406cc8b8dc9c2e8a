"""Offline decoding of utterances into pattern tokens and posteriorgrams.

Each 1-best token position becomes a distribution over patterns: inside
the token's frame span, every N-best hypothesis contributes the number of
frames it assigns to each pattern, with all hypotheses weighted equally.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .binio import ArtifactError, read_container, write_container
from .hmm import (GranularityConfig, NBestList, Transcription, nbest_decode,
                  viterbi_free_decode)

log = logging.getLogger(__name__)


@dataclass
class PosteriorgramSequence:
    utterance_id: str
    psi: GranularityConfig
    positions: np.ndarray  # (num_tokens, n)


@dataclass
class IndexedUtterance:
    """What online matching needs for one utterance under one pattern set."""

    utterance_id: str
    patterns: np.ndarray
    posteriorgram: np.ndarray


@dataclass
class ArchiveIndex:
    psi: GranularityConfig
    nbest_size: int
    transcriptions: dict = field(default_factory=dict)
    nbest: dict = field(default_factory=dict)
    posteriorgrams: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def entry(self, uid):
        return IndexedUtterance(uid, np.array(self.transcriptions[uid].patterns, dtype=np.int64),
                                self.posteriorgrams[uid].positions)

    @property
    def ids(self):
        return sorted(self.transcriptions)


def build_posteriorgram(nbest, boundaries, n, psi=None):
    """Duration-accumulated pattern distribution per 1-best token."""
    if not nbest.entries:
        raise ValueError("empty N-best list")
    labels = np.vstack([e.frame_labels() for e in nbest.entries])
    E = labels.shape[0]
    pos = np.zeros((len(boundaries.tokens), n))
    for i, (_, s, e) in enumerate(boundaries.tokens):
        span = labels[:, s:e + 1].ravel()
        if span.size == 0:
            raise ValueError(f"{nbest.utterance_id}: empty token span at position {i}")
        pos[i] = np.bincount(span, minlength=n) / ((e - s + 1) * E)
    return PosteriorgramSequence(nbest.utterance_id, psi, pos)


def index_utterance(pset, features, N, utterance_id=None):
    uid = utterance_id or getattr(features, "utterance_id", "utt")
    best = viterbi_free_decode(pset, features, uid)
    nb = nbest_decode(pset, features, N, uid)
    if nb.entries[0].tokens != best.tokens:
        # exact score ties: keep the Viterbi path first so N=1 and 1-best agree
        nb = NBestList(uid, [best] + [e for e in nb.entries if e.tokens != best.tokens][:N - 1])
    pg = build_posteriorgram(nb, best, pset.n, pset.config)
    return best, nb, pg


def build_index(pset, corpus, N=5):
    """Decode every utterance; failures are recorded and skipped."""
    if N < 1:
        raise ValueError("N must be >= 1")
    index = ArchiveIndex(pset.config, N)
    for uid in sorted(corpus):
        try:
            best, nb, pg = index_utterance(pset, corpus[uid], N, uid)
        except Exception as exc:
            index.failures[uid] = f"{type(exc).__name__}: {exc}"
            log.warning("indexing %s failed: %s", uid, exc)
            continue
        index.transcriptions[uid] = best
        index.nbest[uid] = nb
        index.posteriorgrams[uid] = pg
    return index


def _ints(v):
    return np.array(v, dtype=np.int64)


def _triples(v):
    return np.array(v, dtype=np.int64).reshape(-1, 3)


def save_index(path, index, meta=None):
    """Tokens, N-best lists and sparse posteriorgrams in one container."""
    ids = index.ids
    tok, tok_off = [], [0]
    nb_tok, nb_entry_off, nb_utt_off, nb_scores = [], [0], [0], []
    scores = []
    pg_pat, pg_mass, pg_off = [], [], [0]
    for uid in ids:
        tr = index.transcriptions[uid]
        tok.extend(tr.tokens)
        tok_off.append(len(tok))
        scores.append(tr.total_log_likelihood)
        for e in index.nbest[uid].entries:
            nb_tok.extend(e.tokens)
            nb_entry_off.append(len(nb_tok))
            nb_scores.append(e.total_log_likelihood)
        nb_utt_off.append(len(nb_scores))
        for row in index.posteriorgrams[uid].positions:
            nz = np.flatnonzero(row)
            pg_pat.extend(nz.tolist())
            pg_mass.extend(row[nz].tolist())
            pg_off.append(len(pg_pat))
    header = dict(meta or {})
    header.update(kind="archive-index", m=index.psi.m, n=index.psi.n, l=index.psi.l,
                  nbest_size=index.nbest_size, utterances=ids,
                  failures={k: index.failures[k] for k in sorted(index.failures)})
    write_container(path, header, {
        "tokens": _triples(tok), "token_offsets": _ints(tok_off),
        "scores": np.array(scores, dtype=np.float64),
        "nbest_tokens": _triples(nb_tok), "nbest_entry_offsets": _ints(nb_entry_off),
        "nbest_utt_offsets": _ints(nb_utt_off), "nbest_scores": np.array(nb_scores, dtype=np.float64),
        "pg_patterns": _ints(pg_pat), "pg_mass": np.array(pg_mass, dtype=np.float64),
        "pg_offsets": _ints(pg_off)})


def load_index(path):
    meta, a = read_container(path)
    if meta.get("kind") != "archive-index":
        raise ArtifactError(f"{path}: not an archive index")
    psi = GranularityConfig(meta["m"], meta["n"], meta["l"])
    index = ArchiveIndex(psi, meta["nbest_size"], failures=dict(meta.get("failures", {})))
    tokens = [tuple(int(v) for v in row) for row in a["tokens"]]
    nb_tokens = [tuple(int(v) for v in row) for row in a["nbest_tokens"]]
    pos = 0
    for u, uid in enumerate(meta["utterances"]):
        toks = tokens[a["token_offsets"][u]:a["token_offsets"][u + 1]]
        index.transcriptions[uid] = Transcription(uid, toks, float(a["scores"][u]))
        entries = []
        for e in range(a["nbest_utt_offsets"][u], a["nbest_utt_offsets"][u + 1]):
            et = nb_tokens[a["nbest_entry_offsets"][e]:a["nbest_entry_offsets"][e + 1]]
            entries.append(Transcription(uid, et, float(a["nbest_scores"][e])))
        index.nbest[uid] = NBestList(uid, entries)
        pg = np.zeros((len(toks), psi.n))
        for i in range(len(toks)):
            lo, hi = a["pg_offsets"][pos], a["pg_offsets"][pos + 1]
            pg[i, a["pg_patterns"][lo:hi]] = a["pg_mass"][lo:hi]
            pos += 1
        index.posteriorgrams[uid] = PosteriorgramSequence(uid, psi, pg)
    return index, meta
