"""Synthetic spoken-term corpora generated from hidden unit HMMs.

A hidden inventory of left-to-right Gaussian HMMs plays the role of
phone-like units.  Terms are unit sequences; documents are sequences of
words, each either a lexicon term or random filler units; queries are
isolated term instances.  Every utterance is spoken by one of several
speakers, modeled as an affine transform of the feature space.  Features
are written directly (there is no audio), quantized to float32 so that the
in-memory corpus equals what is read back from disk.
"""

import json
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from .corpus import (CorpusError, CorpusManifest, FeatureSequence, Utterance,
                     quantize, write_features, write_manifest)
from .hmm import GranularityConfig, PatternSet


@dataclass(frozen=True)
class SyntheticSpec:
    n_units: int = 16
    unit_states: int = 3
    dim: int = 39
    unit_spread: float = 0.5
    unit_variance: float = 1.0
    self_loop: float = 0.6
    n_terms: int = 24
    term_units: tuple = (3, 5)
    n_documents: int = 200
    n_queries: int = 24
    words_per_document: tuple = (4, 8)
    term_probability: float = 0.35
    filler_units: tuple = (1, 4)
    n_speakers: int = 2
    perturbation_scale: float = 0.6
    lexicon: tuple = None

    def to_dict(self):
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("term_units", "words_per_document", "filler_units"):
            if k in d:
                d[k] = tuple(d[k])
        if d.get("lexicon") is not None:
            d["lexicon"] = tuple(tuple(t) for t in d["lexicon"])
        return cls(**d)

    @classmethod
    def smoke(cls):
        """About two minutes of 10 ms frames."""
        return cls(n_units=8, dim=13, n_terms=8, n_documents=50, n_queries=8,
                   words_per_document=(3, 5))


@dataclass
class SyntheticCorpus:
    manifest: CorpusManifest
    features: dict
    unit_sequences: dict
    frame_units: dict
    generator: PatternSet
    speakers: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)


def generator_set(spec, rng):
    means = rng.normal(0.0, spec.unit_spread, size=(spec.n_units, spec.unit_states, 1, spec.dim))
    return PatternSet(
        GranularityConfig(spec.unit_states, spec.n_units, 1),
        np.ones((spec.n_units, spec.unit_states, 1)), means,
        np.full(means.shape, spec.unit_variance),
        np.full((spec.n_units, spec.unit_states), spec.self_loop),
        np.full(spec.dim, 1e-3 * spec.unit_variance))


def _speaker_transforms(spec, rng):
    out = []
    for _ in range(spec.n_speakers):
        A = np.eye(spec.dim) + spec.perturbation_scale * rng.normal(size=(spec.dim, spec.dim)) / np.sqrt(spec.dim)
        b = spec.perturbation_scale * spec.unit_spread * rng.normal(size=spec.dim)
        out.append((A, b))
    return out


def _render(units, gen, transform, rng):
    """Sample frames for a unit sequence; returns (frames, per-frame unit)."""
    A, b = transform
    frames, labels = [], []
    p_adv = 1.0 - gen.self_loop
    for u in units:
        for k in range(gen.config.m):
            d = int(rng.geometric(p_adv[u, k]))
            x = gen.means[u, k, 0] + np.sqrt(gen.variances[u, k, 0]) * rng.normal(size=(d, gen.dim))
            frames.append(x @ A.T + b)
            labels.extend([u] * d)
    return np.vstack(frames), np.array(labels, dtype=np.int64)


def _contains(seq, term):
    L = len(term)
    return any(tuple(seq[i:i + L]) == term for i in range(len(seq) - L + 1))


def synthesize_corpus(spec, seed, out_dir=None):
    """Generate a corpus; optionally write feature files and a manifest.

    Judgments mark exactly the documents whose unit sequence contains the
    query term's unit sequence.
    """
    if spec.n_documents < 1:
        raise CorpusError("synthetic spec needs at least one document")
    if (spec.lexicon is not None and len(spec.lexicon) == 0) or spec.n_terms < 1:
        raise CorpusError("synthetic spec has an empty lexicon")
    ss = np.random.SeedSequence(seed)
    r_units, r_lex, r_spk, r_docs, r_q = (np.random.default_rng(s) for s in ss.spawn(5))
    gen = generator_set(spec, r_units)
    if spec.lexicon is not None:
        lexicon = [tuple(t) for t in spec.lexicon]
    else:
        lexicon = []
        while len(lexicon) < spec.n_terms:
            L = int(r_lex.integers(spec.term_units[0], spec.term_units[1] + 1))
            term = tuple(int(u) for u in r_lex.integers(0, spec.n_units, size=L))
            if term not in lexicon:
                lexicon.append(term)
    transforms = _speaker_transforms(spec, r_spk)

    features, unit_seqs, frame_units, speakers = {}, {}, {}, {}
    docs = []
    width = len(str(max(spec.n_documents, spec.n_queries)))
    for i in range(spec.n_documents):
        uid = f"doc{i:0{width}d}"
        n_words = int(r_docs.integers(spec.words_per_document[0], spec.words_per_document[1] + 1))
        units = []
        for _ in range(n_words):
            if r_docs.random() < spec.term_probability:
                units.extend(lexicon[int(r_docs.integers(len(lexicon)))])
            else:
                L = int(r_docs.integers(spec.filler_units[0], spec.filler_units[1] + 1))
                units.extend(int(u) for u in r_docs.integers(0, spec.n_units, size=L))
        spk = i % spec.n_speakers
        X, lab = _render(units, gen, transforms[spk], r_docs)
        features[uid] = FeatureSequence(uid, quantize(X))
        unit_seqs[uid], frame_units[uid], speakers[uid] = units, lab, spk
        docs.append(Utterance(uid, f"{uid}.feat", 16000, X.shape[0] * 0.01))

    present = [t for t in range(len(lexicon))
               if any(_contains(unit_seqs[d.id], lexicon[t]) for d in docs)]
    if not present:
        raise CorpusError("no lexicon term occurs in any document")
    queries, judgments, terms = [], {}, {}
    for j in range(spec.n_queries):
        t = present[j % len(present)]
        uid = f"qry{j:0{width}d}"
        spk = int(r_q.integers(spec.n_speakers))
        X, lab = _render(lexicon[t], gen, transforms[spk], r_q)
        features[uid] = FeatureSequence(uid, quantize(X))
        unit_seqs[uid], frame_units[uid], speakers[uid] = list(lexicon[t]), lab, spk
        terms[uid] = lexicon[t]
        queries.append(Utterance(uid, f"{uid}.feat", 16000, X.shape[0] * 0.01))
        judgments[uid] = {d.id for d in docs if _contains(unit_seqs[d.id], lexicon[t])}

    manifest = CorpusManifest(docs, queries, judgments, {"seed": seed, "source": "synthetic"})
    corpus = SyntheticCorpus(manifest, features, unit_seqs, frame_units, gen, speakers, terms)
    if out_dir is not None:
        write_synthetic(corpus, spec, seed, out_dir)
    return corpus


def write_synthetic(corpus, spec, seed, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for uid in sorted(corpus.features):
        write_features(os.path.join(out_dir, f"{uid}.feat"), corpus.features[uid])
    write_manifest(os.path.join(out_dir, "manifest.tsv"), corpus.manifest)
    truth = {uid: {"units": corpus.unit_sequences[uid], "speaker": corpus.speakers[uid]}
             for uid in sorted(corpus.unit_sequences)}
    with open(os.path.join(out_dir, "truth.json"), "w") as f:
        json.dump({"seed": seed, "spec": spec.to_dict(), "utterances": truth}, f, sort_keys=True)
        f.write("\n")
