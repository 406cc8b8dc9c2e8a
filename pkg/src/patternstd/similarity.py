"""Pattern-to-pattern similarity matrices.

Hard similarity is the identity.  Soft similarity is exp(-KL/beta), where
KL between two pattern HMMs is the sum over aligned states of a
KL-divergence between their Gaussian mixtures, using the variational
approximation of Hershey and Olsen (2007) for mixtures:

    KL(f||g) ~ sum_a w_a log( sum_a' w_a' exp(-KL(f_a||f_a'))
                              / sum_b v_b exp(-KL(f_a||g_b)) )

The directed divergences are symmetrized as (KL(i,j) + KL(j,i)) / 2.
"""

from dataclasses import dataclass

import numpy as np

from .binio import ArtifactError, read_container, write_container
from .hmm import GranularityConfig


@dataclass
class SimilarityMatrix:
    psi: GranularityConfig
    mode: str
    beta: float
    values: np.ndarray


def gaussian_kl(mu1, var1, mu2, var2):
    """KL(N1 || N2) for diagonal Gaussians, summed over the last axis."""
    return 0.5 * np.sum(np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / var2 - 1.0, axis=-1)


def _logsumexp(a, axis):
    top = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(top, axis) + np.log(np.sum(np.exp(a - top), axis=axis))


def state_kl(a, b):
    """Divergence between two mixture states (variational for l > 1).

    Single-Gaussian states give the exact closed form.  Negative values of
    the approximation are clipped to 0.
    """
    ma, va, wa = np.atleast_2d(a.means), np.atleast_2d(a.variances), np.atleast_1d(a.weights)
    mb, vb, wb = np.atleast_2d(b.means), np.atleast_2d(b.variances), np.atleast_1d(b.weights)
    if ma.shape[1] != mb.shape[1]:
        raise ValueError(f"dimension mismatch: {ma.shape[1]} vs {mb.shape[1]}")
    if ma.shape[0] == 1 and mb.shape[0] == 1:
        return max(0.0, float(gaussian_kl(ma[0], va[0], mb[0], vb[0])))
    kl_ff = gaussian_kl(ma[:, None], va[:, None], ma[None], va[None])
    kl_fg = gaussian_kl(ma[:, None], va[:, None], mb[None], vb[None])
    with np.errstate(divide="ignore"):
        num = _logsumexp(np.log(wa)[None] - kl_ff, axis=1)
        den = _logsumexp(np.log(wb)[None] - kl_fg, axis=1)
    return max(0.0, float(np.sum(wa * (num - den))))


def hmm_kl(pa, pb):
    """Sum of state divergences over positionally aligned states."""
    if pa.num_states != pb.num_states:
        raise ValueError(f"state counts differ: {pa.num_states} vs {pb.num_states}")
    return sum(state_kl(pa.state(k), pb.state(k)) for k in range(pa.num_states))


def kl_matrix(pset):
    """Directed divergence KL(i, j) for every pattern pair, shape (n, n)."""
    n, m, l = pset.config.n, pset.config.m, pset.config.l
    out = np.zeros((n, n))
    with np.errstate(divide="ignore"):
        logw = np.log(pset.weights)
    for k in range(m):
        mu, var, lw = pset.means[:, k], pset.variances[:, k], logw[:, k]
        w = pset.weights[:, k]
        for i in range(n):
            # (l, n, l): component a of pattern i against component b of every pattern j
            kl = gaussian_kl(mu[i][:, None, None], var[i][:, None, None], mu[None], var[None])
            if l == 1:
                out[i] += kl[0, :, 0]
                continue
            den = _logsumexp(lw[None] - kl, axis=2)           # (l, n)
            num = den[:, i]
            out[i] += np.maximum(np.sum(w[i][:, None] * (num[:, None] - den), axis=0), 0.0)
    np.fill_diagonal(out, 0.0)
    return np.maximum(out, 0.0)


def build_similarity(pset, mode="soft", beta=None):
    """Hard (identity) or soft exp(-KLsym/beta) similarity; beta defaults to 100*m."""
    n = pset.config.n
    if mode == "hard":
        return SimilarityMatrix(pset.config, "hard", 0.0, np.eye(n))
    if mode != "soft":
        raise ValueError(f"unknown similarity mode {mode!r}")
    beta = 100.0 * pset.config.m if beta is None else float(beta)
    if not beta > 0:
        raise ValueError("beta must be positive")
    kl = kl_matrix(pset)
    sym = 0.5 * (kl + kl.T)
    values = np.exp(-sym / beta)
    np.fill_diagonal(values, 1.0)
    return SimilarityMatrix(pset.config, "soft", beta, values)


def save_similarity(path, sim, meta=None):
    header = dict(meta or {})
    header.update(kind="similarity", m=sim.psi.m, n=sim.psi.n, l=sim.psi.l,
                  mode=sim.mode, beta=sim.beta)
    write_container(path, header, {"values": sim.values.astype(np.float32)})


def load_similarity(path):
    meta, arrays = read_container(path)
    if meta.get("kind") != "similarity":
        raise ArtifactError(f"{path}: not a similarity matrix")
    psi = GranularityConfig(meta["m"], meta["n"], meta["l"])
    return SimilarityMatrix(psi, meta["mode"], meta["beta"], arrays["values"].astype(np.float64)), meta
