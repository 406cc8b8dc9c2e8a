"""Left-to-right GMM-HMM acoustic patterns.

A pattern set holds ``n`` HMMs with ``m`` emitting states each; every state
is a diagonal-covariance mixture of ``l`` Gaussians.  Parameters of the
whole set are stored as stacked arrays:

    weights    (n, m, l)
    means      (n, m, l, F)
    variances  (n, m, l, F)
    self_loop  (n, m)         advance probability is 1 - self_loop

Free-pattern decoding tiles an utterance with tokens, each token being one
pass through one pattern HMM (no state skips, so a token spans >= m
frames).  The loop enters a pattern with probability 1/n and leaves it via
the advance transition of its last state.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .binio import ArtifactError, read_container, write_container

LOG_2PI = math.log(2.0 * math.pi)
WEIGHT_FLOOR = 1e-8
TRANSITION_FLOOR = 1e-6


class DecodeError(ValueError):
    """Utterance cannot be decoded (too short, wrong dimension...)."""


class TrainingError(RuntimeError):
    """Numerical failure during re-estimation."""


@dataclass(frozen=True, order=True)
class GranularityConfig:
    """Model granularity (m states, n patterns, l Gaussians per state)."""

    m: int
    n: int
    l: int

    def __post_init__(self):
        # n=1 is accepted: it is the degenerate single-pattern loop
        if self.m < 1 or self.n < 1 or self.l < 1:
            raise ValueError(f"invalid granularity {self.m, self.n, self.l}")

    def __str__(self):
        return f"m{self.m}_n{self.n}_l{self.l}"

    def to_tuple(self):
        return (self.m, self.n, self.l)

    @classmethod
    def parse(cls, text):
        """Accept ``m3_n10_l1`` or ``3,10,1``."""
        text = text.strip()
        if "," in text:
            m, n, l = (int(v) for v in text.split(","))
        else:
            parts = dict((p[0], int(p[1:])) for p in text.split("_"))
            m, n, l = parts["m"], parts["n"], parts["l"]
        return cls(m, n, l)


@dataclass
class MixtureState:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray


@dataclass
class PatternHmm:
    pattern_index: int
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    self_loop: np.ndarray

    @property
    def num_states(self):
        return self.weights.shape[0]

    @property
    def advance(self):
        return 1.0 - self.self_loop

    def state(self, k):
        return MixtureState(self.weights[k], self.means[k], self.variances[k])


@dataclass
class PatternSet:
    config: GranularityConfig
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    self_loop: np.ndarray
    variance_floor: np.ndarray
    training_log: list = field(default_factory=list)

    @property
    def dim(self):
        return self.means.shape[-1]

    @property
    def n(self):
        return self.config.n

    @property
    def hmms(self):
        return [PatternHmm(r, self.weights[r], self.means[r], self.variances[r],
                           self.self_loop[r]) for r in range(self.n)]

    def copy(self):
        return PatternSet(self.config, self.weights.copy(), self.means.copy(),
                          self.variances.copy(), self.self_loop.copy(),
                          self.variance_floor.copy(), [dict(e) for e in self.training_log])

    def check(self):
        n, m, l = self.config.n, self.config.m, self.config.l
        if self.weights.shape != (n, m, l) or self.means.shape[:3] != (n, m, l):
            raise ValueError(f"parameter shapes do not match {self.config}")
        if np.any(np.abs(self.weights.sum(-1) - 1.0) > 1e-9):
            raise ValueError("mixture weights do not sum to 1")
        if np.any(self.variances < self.variance_floor * (1 - 1e-12)):
            raise ValueError("variance below floor")
        if np.any((self.self_loop < 0) | (self.self_loop > 1)):
            raise ValueError("transition probability outside [0, 1]")

    def log_transitions(self):
        with np.errstate(divide="ignore"):
            return np.log(self.self_loop), np.log1p(-self.self_loop)


@dataclass
class Transcription:
    """Pattern tokens (pattern, start_frame, end_frame); end is inclusive."""

    utterance_id: str
    tokens: list
    total_log_likelihood: float = 0.0

    @property
    def num_frames(self):
        return self.tokens[-1][2] + 1 if self.tokens else 0

    @property
    def patterns(self):
        return [t[0] for t in self.tokens]

    def frame_labels(self):
        out = np.empty(self.num_frames, dtype=np.int64)
        for r, s, e in self.tokens:
            out[s:e + 1] = r
        return out

    def check(self, m=1, num_frames=None):
        pos = 0
        for r, s, e in self.tokens:
            if s != pos or e - s + 1 < m:
                raise ValueError(f"{self.utterance_id}: bad token {(r, s, e)}")
            pos = e + 1
        if num_frames is not None and pos != num_frames:
            raise ValueError(f"{self.utterance_id}: tokens cover {pos} of {num_frames} frames")


@dataclass
class NBestList:
    utterance_id: str
    entries: list

    @property
    def best(self):
        return self.entries[0]


def as_frames(x):
    frames = getattr(x, "frames", x)
    return np.atleast_2d(np.asarray(frames, dtype=np.float64))


# --------------------------------------------------------------------------
# likelihoods


def state_log_likelihood(state, frame):
    """Log density of one frame under a diagonal Gaussian mixture state."""
    frame = np.asarray(frame, dtype=np.float64)
    means = np.atleast_2d(state.means)
    variances = np.atleast_2d(state.variances)
    if frame.shape != (means.shape[1],):
        raise ValueError(f"frame dimension {frame.shape} does not match model dimension {means.shape[1]}")
    with np.errstate(divide="ignore"):
        logw = np.log(np.atleast_1d(state.weights))
    comp = logw - 0.5 * (means.shape[1] * LOG_2PI + np.log(variances).sum(1)
                         + ((frame - means) ** 2 / variances).sum(1))
    top = comp.max()
    return float(top + np.log(np.exp(comp - top).sum()))


def component_loglik(pset, X):
    """Weighted component log densities, shape (T, n, m, l)."""
    X = as_frames(X)
    if X.shape[1] != pset.dim:
        raise DecodeError(f"feature dimension {X.shape[1]} does not match model dimension {pset.dim}")
    n, m, l = pset.config.n, pset.config.m, pset.config.l
    prec = (1.0 / pset.variances).reshape(-1, pset.dim)
    mu = pset.means.reshape(-1, pset.dim)
    const = -0.5 * (pset.dim * LOG_2PI + np.log(pset.variances).reshape(-1, pset.dim).sum(1)
                    + (mu * mu * prec).sum(1))
    quad = (X * X) @ prec.T - 2.0 * (X @ (mu * prec).T)
    with np.errstate(divide="ignore"):
        logw = np.log(pset.weights).reshape(-1)
    out = const + logw - 0.5 * quad
    return out.reshape(X.shape[0], n, m, l)


def _logsumexp_last(a):
    top = a.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return (top + np.log(np.exp(a - top).sum(axis=-1, keepdims=True)))[..., 0]


def emission_loglik(pset, X):
    """State log-likelihoods, shape (T, n, m)."""
    return _logsumexp_last(component_loglik(pset, X))


# --------------------------------------------------------------------------
# decoding


def _decode_inputs(pset, features):
    X = as_frames(features)
    if X.shape[0] < pset.config.m:
        raise DecodeError(
            f"utterance of {X.shape[0]} frames is shorter than m={pset.config.m}")
    log_self, log_adv = pset.log_transitions()
    return emission_loglik(pset, X), log_self, log_adv, -math.log(pset.n)


def viterbi_free_decode(pset, features, utterance_id=None):
    """Maximum-likelihood tiling of an utterance by the pattern loop."""
    uid = utterance_id or getattr(features, "utterance_id", "utt")
    ll, log_self, log_adv, log_entry = _decode_inputs(pset, features)
    exit_pat, exit_start, exit_score = _kernels.viterbi_loop(ll, log_self, log_adv, log_entry)
    T = ll.shape[0]
    if not np.isfinite(exit_score[T - 1]):
        raise DecodeError(f"{uid}: no complete path through the pattern loop")
    tokens = []
    end = T - 1
    while end >= 0:
        r, s = int(exit_pat[end]), int(exit_start[end])
        tokens.append((r, s, end))
        end = s - 1
    tokens.reverse()
    return Transcription(uid, tokens, float(exit_score[T - 1]))


def nbest_decode(pset, features, N, utterance_id=None):
    """Up to N best distinct token sequences, best first.

    Equal scores are ordered by the lexicographic token sequence.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    uid = utterance_id or getattr(features, "utterance_id", "utt")
    ll, log_self, log_adv, log_entry = _decode_inputs(pset, features)
    prev, pat, start, end, score, final = _kernels.nbest_loop(
        ll, log_self, log_adv, log_entry, int(N))
    T = ll.shape[0]
    entries = []
    for rec in final:
        if end[rec] != T - 1:
            continue
        tokens = []
        cur = rec
        while cur >= 0:
            tokens.append((int(pat[cur]), int(start[cur]), int(end[cur])))
            cur = prev[cur]
        tokens.reverse()
        entries.append(Transcription(uid, tokens, float(score[rec])))
    if not entries:
        raise DecodeError(f"{uid}: no complete path through the pattern loop")
    entries.sort(key=lambda tr: (-tr.total_log_likelihood, tr.tokens))
    return NBestList(uid, entries)


# --------------------------------------------------------------------------
# training


def segment_log_likelihood(pset, X, token, ll=None):
    """Forward log-likelihood of one labeled segment."""
    r, s, e = token
    if ll is None:
        ll = emission_loglik(pset, as_frames(X)[s:e + 1])
        seg = ll[:, r, :]
    else:
        seg = ll[s:e + 1, r, :]
    log_self, log_adv = pset.log_transitions()
    total, _, _, _ = _kernels.forward_backward(np.ascontiguousarray(seg), log_self[r], log_adv[r])
    return total


def fixed_label_log_likelihood(pset, corpus, labels):
    """Sum over labeled segments of their forward log-likelihoods."""
    log_self, log_adv = pset.log_transitions()
    total = 0.0
    for uid in sorted(labels):
        ll = emission_loglik(pset, corpus[uid])
        for r, s, e in labels[uid].tokens:
            seg_ll, _, _, _ = _kernels.forward_backward(
                np.ascontiguousarray(ll[s:e + 1, r, :]), log_self[r], log_adv[r])
            total += seg_ll
    return total


def _accumulate(pset, corpus, labels):
    n, m, l = pset.config.n, pset.config.m, pset.config.l
    F = pset.dim
    occ = np.zeros((n, m, l))
    sx = np.zeros((n * m * l, F))
    sxx = np.zeros((n * m * l, F))
    n_self = np.zeros((n, m))
    n_adv = np.zeros((n, m))
    total = 0.0
    log_self, log_adv = pset.log_transitions()
    for uid in sorted(labels):
        X = as_frames(corpus[uid])
        comp = component_loglik(pset, X)
        state_ll = _logsumexp_last(comp)
        post = np.zeros(state_ll.shape)
        for r, s, e in labels[uid].tokens:
            seg_ll, g, ns, na = _kernels.forward_backward(
                np.ascontiguousarray(state_ll[s:e + 1, r, :]), log_self[r], log_adv[r])
            if not np.isfinite(seg_ll):
                raise TrainingError(
                    f"{uid}: segment {(r, s, e)} has log-likelihood {seg_ll} under pattern {r}")
            total += seg_ll
            post[s:e + 1, r, :] = g
            n_self[r] += ns
            n_adv[r] += na
        with np.errstate(invalid="ignore"):
            resp = np.exp(comp - state_ll[..., None])
        resp = np.nan_to_num(resp, nan=0.0)
        w = (post[..., None] * resp).reshape(X.shape[0], -1)
        occ += w.sum(0).reshape(n, m, l)
        sx += w.T @ X
        sxx += w.T @ (X * X)
    if not (np.all(np.isfinite(sx)) and np.all(np.isfinite(sxx)) and np.isfinite(total)):
        bad = np.argwhere(~np.isfinite(sx.sum(1)))
        raise TrainingError(f"non-finite statistics accumulated (flat component indices {bad[:5].ravel().tolist()})")
    return occ, sx.reshape(n, m, l, F), sxx.reshape(n, m, l, F), n_self, n_adv, total


def baum_welch(pset, corpus, labels, with_loglik=False):
    """One EM re-estimation of every pattern over its labeled segments.

    ``corpus`` maps utterance ids to frames, ``labels`` maps the same ids to
    Transcriptions.  Patterns without labeled frames keep their parameters.
    With ``with_loglik`` the fixed-label log-likelihood of the *input* set
    (a by-product of the E-step) is returned alongside.
    """
    occ, sx, sxx, n_self, n_adv, before = _accumulate(pset, corpus, labels)
    new = pset.copy()
    state_occ = occ.sum(-1)
    floor = pset.variance_floor
    for r in range(pset.n):
        for k in range(pset.config.m):
            if state_occ[r, k] <= 0.0:
                continue
            w = occ[r, k] / state_occ[r, k]
            live = occ[r, k] > 1e-10
            mu = new.means[r, k]
            var = new.variances[r, k]
            mu[live] = sx[r, k, live] / occ[r, k, live, None]
            var[live] = np.maximum(sxx[r, k, live] / occ[r, k, live, None] - mu[live] ** 2, floor)
            w = np.maximum(w, WEIGHT_FLOOR)
            new.weights[r, k] = w / w.sum()
            tot = n_self[r, k] + n_adv[r, k]
            if tot > 0:
                new.self_loop[r, k] = np.clip(n_self[r, k] / tot, TRANSITION_FLOOR, 1 - TRANSITION_FLOOR)
    if with_loglik:
        return new, before
    return new


def global_variance_floor(corpus, factor=1e-3):
    X = np.vstack([as_frames(corpus[k]) for k in sorted(corpus)])
    return factor * np.maximum(X.var(axis=0), 1e-12)


def flat_start(config, corpus, labels, variance_floor=None):
    """Initial single-Gaussian set from labeled segments.

    Each segment is cut into m equal parts; state k pools part k of every
    segment of its pattern.  Patterns with no segments get global statistics.
    """
    n, m = config.n, config.m
    X_all = np.vstack([as_frames(corpus[k]) for k in sorted(corpus)])
    F = X_all.shape[1]
    floor = global_variance_floor(corpus) if variance_floor is None else variance_floor
    g_mean, g_var = X_all.mean(0), np.maximum(X_all.var(0), floor)
    s1 = np.zeros((n, m, F))
    s2 = np.zeros((n, m, F))
    cnt = np.zeros((n, m))
    nseg = np.zeros(n)
    for uid in sorted(labels):
        X = as_frames(corpus[uid])
        for r, s, e in labels[uid].tokens:
            L = e - s + 1
            nseg[r] += 1
            for k in range(m):
                a, b = s + (k * L) // m, s + ((k + 1) * L) // m
                seg = X[a:b]
                s1[r, k] += seg.sum(0)
                s2[r, k] += (seg * seg).sum(0)
                cnt[r, k] += b - a
    means = np.tile(g_mean, (n, m, 1))
    variances = np.tile(g_var, (n, m, 1))
    self_loop = np.full((n, m), 0.5)
    for r in range(n):
        if nseg[r] == 0:
            continue
        for k in range(m):
            if cnt[r, k] > 0:
                means[r, k] = s1[r, k] / cnt[r, k]
                variances[r, k] = np.maximum(s2[r, k] / cnt[r, k] - means[r, k] ** 2, floor)
            dur = max(cnt[r, k] / nseg[r], 1.0)
            self_loop[r, k] = np.clip(1.0 - 1.0 / dur, 0.1, 0.95)
    pset = PatternSet(GranularityConfig(m, n, 1), np.ones((n, m, 1)), means[:, :, None, :],
                      variances[:, :, None, :], self_loop, floor)
    while pset.config.l < config.l:
        pset = split_components(pset)
    return pset


def split_components(pset, scale=0.2):
    """Add one Gaussian per state by splitting the heaviest component.

    The two halves get means shifted by +-scale standard deviations and
    half the original weight each.
    """
    n, m, l = pset.config.n, pset.config.m, pset.config.l
    weights = np.concatenate([pset.weights, np.zeros((n, m, 1))], axis=2)
    means = np.concatenate([pset.means, np.zeros((n, m, 1, pset.dim))], axis=2)
    variances = np.concatenate([pset.variances, np.ones((n, m, 1, pset.dim))], axis=2)
    for r in range(n):
        for k in range(m):
            c = int(np.argmax(pset.weights[r, k]))
            sd = np.sqrt(pset.variances[r, k, c])
            mu = pset.means[r, k, c]
            means[r, k, c] = mu - scale * sd
            means[r, k, l] = mu + scale * sd
            variances[r, k, l] = pset.variances[r, k, c]
            weights[r, k, c] = weights[r, k, l] = pset.weights[r, k, c] / 2.0
    weights /= weights.sum(-1, keepdims=True)
    return PatternSet(GranularityConfig(m, n, l + 1), weights, means, variances,
                      pset.self_loop.copy(), pset.variance_floor.copy(),
                      [dict(e) for e in pset.training_log])


# --------------------------------------------------------------------------
# bundles and transcription records


def save_bundle(path, pset, meta=None):
    header = dict(meta or {})
    header.update(kind="pattern-bundle", m=pset.config.m, n=pset.config.n,
                  l=pset.config.l, training_log=pset.training_log)
    write_container(path, header, {
        "weights": pset.weights, "means": pset.means, "variances": pset.variances,
        "self_loop": pset.self_loop, "variance_floor": pset.variance_floor})


def load_bundle(path):
    """Return ``(pattern_set, header)``."""
    meta, arrays = read_container(path)
    if meta.get("kind") != "pattern-bundle":
        raise ArtifactError(f"{path}: not a pattern bundle")
    cfg = GranularityConfig(meta["m"], meta["n"], meta["l"])
    pset = PatternSet(cfg, arrays["weights"], arrays["means"], arrays["variances"],
                      arrays["self_loop"], arrays["variance_floor"], meta.get("training_log", []))
    return pset, meta


def bundle_summary(pset):
    lines = [f"pattern set {pset.config}  dim={pset.dim}"]
    for e in pset.training_log:
        lines.append("  " + " ".join(f"{k}={e[k]}" for k in sorted(e)))
    mean_dur = [float(np.sum(1.0 / np.maximum(1 - pset.self_loop[r], 1e-12))) for r in range(pset.n)]
    lines.append(f"  expected token duration (frames): min={min(mean_dur):.2f} max={max(mean_dur):.2f}")
    return "\n".join(lines) + "\n"


def format_transcription(tr):
    toks = " ".join(f"{r}:{s}:{e}" for r, s, e in tr.tokens)
    return f"{tr.utterance_id}\t{tr.total_log_likelihood!r}\t{toks}"


def parse_transcription(line):
    uid, score, toks = line.rstrip("\n").split("\t")
    tokens = [tuple(int(v) for v in t.split(":")) for t in toks.split()]
    return Transcription(uid, tokens, float(score))


def write_transcriptions(path, transcriptions):
    with open(path, "w") as f:
        for tr in transcriptions:
            f.write(format_transcription(tr) + "\n")


def read_transcriptions(path):
    with open(path) as f:
        return [parse_transcription(line) for line in f if line.strip()]
