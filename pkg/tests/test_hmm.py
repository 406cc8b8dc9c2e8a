import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patternstd.hmm import (
    DecodeError, GranularityConfig, MixtureState, PatternSet, Transcription,
    baum_welch, bundle_summary, emission_loglik, fixed_label_log_likelihood,
    load_bundle, nbest_decode, read_transcriptions, save_bundle, split_components,
    state_log_likelihood, viterbi_free_decode, write_transcriptions,
)

from conftest import random_pattern_set
from oracles import enumerate_transcriptions


def _brute(pset, X):
    # emissions from the per-state reference density, not the batched path
    T = X.shape[0]
    n, m = pset.config.n, pset.config.m
    ll = np.empty((T, n, m))
    for t in range(T):
        for r, hmm in enumerate(pset.hmms):
            for k in range(m):
                ll[t, r, k] = state_log_likelihood(hmm.state(k), X[t])
    log_self, log_adv = pset.log_transitions()
    return enumerate_transcriptions(ll, log_self, log_adv)


class TestStateLikelihood:
    def test_density_at_mean(self):
        F = 5
        state = MixtureState(np.ones(1), np.zeros((1, F)), np.ones((1, F)))
        assert state_log_likelihood(state, np.zeros(F)) == pytest.approx(-F / 2 * math.log(2 * math.pi), abs=1e-12)

    def test_duplicate_components(self):
        rng = np.random.default_rng(0)
        mu, var = rng.normal(size=(1, 3)), rng.uniform(0.5, 2, size=(1, 3))
        x = rng.normal(size=3)
        one = state_log_likelihood(MixtureState(np.ones(1), mu, var), x)
        two = state_log_likelihood(MixtureState(np.full(2, 0.5), np.vstack([mu, mu]), np.vstack([var, var])), x)
        assert one == pytest.approx(two, abs=1e-12)

    def test_far_frame_finite(self):
        import mpmath
        F = 4
        state = MixtureState(np.array([0.3, 0.7]), np.array([[0.0] * F, [1.0] * F]), np.ones((2, F)))
        x = np.full(F, 100.0)
        got = state_log_likelihood(state, x)
        mpmath.mp.dps = 50
        ref = mpmath.log(sum(
            w * mpmath.exp(-0.5 * F * mpmath.log(2 * mpmath.pi) - 0.5 * sum((100.0 - mu) ** 2 for _ in range(F)))
            for w, mu in ((0.3, 0.0), (0.7, 1.0))))
        assert np.isfinite(got)
        assert got == pytest.approx(float(ref), rel=1e-12)

    def test_dimension_mismatch(self):
        state = MixtureState(np.ones(1), np.zeros((1, 3)), np.ones((1, 3)))
        with pytest.raises(ValueError):
            state_log_likelihood(state, np.zeros(4))

    def test_batched_matches_reference(self, rng):
        pset = random_pattern_set(rng, m=3, n=4, l=2, dim=5)
        X = rng.normal(size=(7, 5)) * 3
        ll = emission_loglik(pset, X)
        for t in range(7):
            for r, hmm in enumerate(pset.hmms):
                for k in range(3):
                    assert ll[t, r, k] == pytest.approx(state_log_likelihood(hmm.state(k), X[t]), abs=1e-9)


class TestDecoding:
    def test_single_pattern(self, rng):
        pset = random_pattern_set(rng, m=2, n=1)
        tr = viterbi_free_decode(pset, rng.normal(size=(10, 2)))
        assert {t[0] for t in tr.tokens} == {0}
        tr.check(m=2, num_frames=10)

    def test_separable_sample(self, rng):
        n, m, F = 6, 3, 4
        pset = random_pattern_set(rng, m=m, n=n, dim=F)
        pset.means[:] = np.arange(n)[:, None, None, None] * 20.0
        pset.variances[:] = 1.0
        X = 60.0 + rng.normal(size=(15, F))
        tr = viterbi_free_decode(pset, X)
        assert [t[0] for t in tr.tokens] == [3]

    def test_too_short(self, rng):
        pset = random_pattern_set(rng, m=3, n=2)
        with pytest.raises(DecodeError):
            viterbi_free_decode(pset, rng.normal(size=(2, 2)))

    def test_toy_enumeration(self, rng):
        pset = random_pattern_set(rng, m=2, n=2)
        X = rng.normal(size=(6, 2))
        ref = _brute(pset, X)
        tr = viterbi_free_decode(pset, X)
        assert tr.tokens == ref[0][1]
        assert tr.total_log_likelihood == pytest.approx(ref[0][0], abs=1e-9)
        nb = nbest_decode(pset, X, 4)
        assert [e.tokens for e in nb.entries] == [h[1] for h in ref[:4]]
        for e, h in zip(nb.entries, ref):
            assert e.total_log_likelihood == pytest.approx(h[0], abs=1e-9)

    def test_nbest_one_is_viterbi(self, rng):
        pset = random_pattern_set(rng, m=2, n=3)
        X = rng.normal(size=(20, 2))
        nb = nbest_decode(pset, X, 1)
        tr = viterbi_free_decode(pset, X)
        assert len(nb.entries) == 1
        assert nb.entries[0].tokens == tr.tokens

    def test_nbest_exhaustion(self, rng):
        pset = random_pattern_set(rng, m=2, n=1)
        X = rng.normal(size=(5, 2))
        # segmentations of 5 frames into pieces >= 2: (5), (2,3), (3,2)
        nb = nbest_decode(pset, X, 10)
        assert len(nb.entries) == 3
        assert len({tuple(e.tokens) for e in nb.entries}) == 3

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), T=st.integers(1, 7), n=st.integers(1, 3),
           m=st.integers(1, 2), N=st.integers(1, 6))
    def test_matches_enumeration(self, seed, T, n, m, N):
        rng = np.random.default_rng(seed)
        pset = random_pattern_set(rng, m=m, n=n)
        X = rng.normal(size=(max(T, m), 2))
        ref = _brute(pset, X)
        nb = nbest_decode(pset, X, N)
        assert len(nb.entries) == min(N, len(ref))
        for e, h in zip(nb.entries, ref):
            assert e.total_log_likelihood == pytest.approx(h[0], abs=1e-9)
        assert viterbi_free_decode(pset, X).tokens == ref[0][1]

    def test_tiling_and_determinism(self, rng):
        pset = random_pattern_set(rng, m=3, n=5, l=2, dim=3)
        X = rng.normal(size=(60, 3))
        a = nbest_decode(pset, X, 5)
        b = nbest_decode(pset, X, 5)
        assert [e.tokens for e in a.entries] == [e.tokens for e in b.entries]
        scores = [e.total_log_likelihood for e in a.entries]
        assert scores == sorted(scores, reverse=True)
        for e in a.entries:
            e.check(m=3, num_frames=60)


def _sample_hmm(rng, mean, var, self_loop, T):
    return mean + np.sqrt(var) * rng.normal(size=(T, mean.size))


class TestBaumWelch:
    def test_recovers_mean(self):
        rng = np.random.default_rng(5)
        F, T = 3, 400
        true_mean = np.array([1.0, -2.0, 0.5])
        corpus = {f"u{i}": true_mean + rng.normal(size=(T, F)) for i in range(5)}
        labels = {k: Transcription(k, [(0, 0, T - 1)]) for k in corpus}
        pset = PatternSet(GranularityConfig(1, 1, 1), np.ones((1, 1, 1)), np.zeros((1, 1, 1, F)),
                          np.ones((1, 1, 1, F)), np.full((1, 1), 0.9), np.full(F, 1e-3))
        new = baum_welch(pset, corpus, labels)
        se = 1.0 / math.sqrt(5 * T)
        assert np.all(np.abs(new.means[0, 0, 0] - true_mean) < 3 * se)

    def test_monotone_from_truth(self, rng):
        pset = random_pattern_set(rng, m=2, n=2, l=2, dim=2)
        corpus = {f"u{i}": rng.normal(size=(30, 2)) for i in range(4)}
        labels = {k: viterbi_free_decode(pset, X, k) for k, X in corpus.items()}
        prev = fixed_label_log_likelihood(pset, corpus, labels)
        cur = pset
        for _ in range(5):
            cur = baum_welch(cur, corpus, labels)
            ll = fixed_label_log_likelihood(cur, corpus, labels)
            assert ll >= prev - 1e-6 * abs(prev)
            np.testing.assert_allclose(cur.weights.sum(-1), 1.0, atol=1e-9)
            prev = ll

    def test_single_segment_floored(self):
        F = 2
        corpus = {"u": np.array([[1.0, 2.0]])}
        labels = {"u": Transcription("u", [(0, 0, 0)])}
        pset = PatternSet(GranularityConfig(1, 2, 1), np.ones((2, 1, 1)), np.zeros((2, 1, 1, F)),
                          np.ones((2, 1, 1, F)), np.full((2, 1), 0.5), np.full(F, 1e-3))
        new = baum_welch(pset, corpus, labels)
        assert np.all(np.isfinite(new.means)) and np.all(new.variances[0] == 1e-3)
        new.check()

    def test_with_loglik(self, rng):
        pset = random_pattern_set(rng, m=2, n=2)
        corpus = {"a": rng.normal(size=(12, 2))}
        labels = {"a": viterbi_free_decode(pset, corpus["a"], "a")}
        _, ll = baum_welch(pset, corpus, labels, with_loglik=True)
        assert ll == pytest.approx(fixed_label_log_likelihood(pset, corpus, labels), abs=1e-9)


def test_split_components_valid(rng):
    pset = random_pattern_set(rng, m=2, n=3, l=1, dim=3)
    pset.variances[0, 0, 0] = pset.variance_floor
    grown = split_components(pset)
    assert grown.config.l == 2
    grown.check()
    d = grown.means[:, :, 1] - grown.means[:, :, 0]
    np.testing.assert_allclose(d, 0.4 * np.sqrt(pset.variances[:, :, 0]))


def test_bundle_roundtrip(tmp_path, rng):
    pset = random_pattern_set(rng, m=3, n=4, l=2, dim=3)
    pset.training_log = [{"iteration": 1, "change_fraction": 0.5}]
    save_bundle(tmp_path / "a.bin", pset, {"seed": 3})
    back, meta = load_bundle(tmp_path / "a.bin")
    assert meta["seed"] == 3 and back.config == pset.config
    np.testing.assert_array_equal(back.means, pset.means)
    save_bundle(tmp_path / "b.bin", back, {"seed": 3})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert "m3_n4_l2" in bundle_summary(back)


def test_transcription_records(tmp_path):
    trs = [Transcription("a", [(1, 0, 2), (0, 3, 7)], -12.5), Transcription("b", [(2, 0, 4)], -3.0)]
    write_transcriptions(tmp_path / "t.txt", trs)
    back = read_transcriptions(tmp_path / "t.txt")
    assert [(t.utterance_id, t.tokens, t.total_log_likelihood) for t in back] == \
        [(t.utterance_id, t.tokens, t.total_log_likelihood) for t in trs]
