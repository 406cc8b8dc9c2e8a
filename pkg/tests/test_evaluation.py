import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from patternstd.evaluation import (Ranker, average_precision, evaluate, fused_map, greedy_select,
                                   marginal_analysis, precision_at, write_report, write_trace)
from patternstd.hmm import GranularityConfig
from patternstd.retrieval import SearchMethod

from oracles import average_precision_oracle

G = SearchMethod(1, 0, 0)


class TestAveragePrecision:
    def test_hand_values(self):
        assert average_precision(list("abcde"), {"a", "c"}) == pytest.approx(0.8333, abs=5e-5)
        assert average_precision(list("abcde"), {"a", "b"}) == 1.0
        assert average_precision(list("abcdefghij"), {"j"}) == 0.1

    def test_missing_relevant_counts_zero(self):
        assert average_precision(["a", "b"], {"a", "z"}) == 0.5

    def test_empty_relevant(self):
        with pytest.raises(ValueError):
            average_precision(["a"], set())

    @given(st.permutations(list(range(12))), st.sets(st.integers(0, 11), min_size=1))
    def test_oracle(self, ranking, relevant):
        assert average_precision(ranking, relevant) == pytest.approx(
            average_precision_oracle(ranking, relevant), abs=1e-15)

    def test_random_ranking_expectation(self):
        # E[AP] for a random ranking of D docs with R relevant
        rng = np.random.default_rng(0)
        D, R = 20, 4
        rel = set(range(R))
        sims = [average_precision(list(rng.permutation(D)), rel) for _ in range(20000)]
        expected = sum((1 + (R - 1) * (k - 1) / (D - 1)) / k for k in range(1, D + 1)) / D
        assert np.mean(sims) == pytest.approx(expected, abs=0.005)


class TestRanker:
    def test_ties_by_document_id(self):
        r = Ranker(["q"], ["d2", "d1", "d3"], {"q": {"d1"}})
        assert r.ap_values(np.zeros((1, 3))) == [1.0]

    def test_matches_reference(self, rng):
        docs = [f"d{i:02d}" for i in range(15)]
        judg = {"q0": {"d01", "d07"}, "q1": {"d14"}, "q2": set()}
        scores = rng.integers(0, 4, size=(3, 15)).astype(float)
        r = Ranker(["q0", "q1", "q2"], docs, judg)
        for qi, q in enumerate(["q0", "q1"]):
            ranking = sorted(docs, key=lambda d: (-scores[qi, docs.index(d)], d))
            assert r.ap_values(scores)[qi] == pytest.approx(average_precision(ranking, judg[q]), abs=1e-15)
        rep = evaluate(scores, ["q0", "q1", "q2"], docs, judg)
        assert set(rep.average_precision) == {"q0", "q1"}
        ranking = sorted(docs, key=lambda d: (-scores[0, docs.index(d)], d))
        assert precision_at(ranking, judg["q0"], 5) == pytest.approx(
            np.mean([rep.p_at_5 * 2 - precision_at(sorted(docs, key=lambda d: (-scores[1, docs.index(d)], d)),
                                                   judg["q1"], 5)]))

    def test_report_files(self, tmp_path):
        rep = evaluate(np.array([[1.0, 0.0]]), ["q"], ["a", "b"], {"q": {"a"}})
        write_report(tmp_path, rep)
        assert "MAP   1.0000" in (tmp_path / "report.txt").read_text()


def _psi(m, n, l):
    return GranularityConfig(m, n, l)


class TestGreedy:
    def setup_method(self):
        # two queries over three documents; each candidate solves one query
        self.ranker = Ranker(["q0", "q1"], ["a", "b", "c"], {"q0": {"c"}, "q1": {"c"}})
        self.A = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        self.B = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])

    def test_single_candidate(self):
        k = (_psi(3, 5, 1), G)
        assert greedy_select({k: self.A}, self.ranker, 1)[0][0] == k

    def test_complementary_pair(self):
        ka, kb = (_psi(3, 5, 1), G), (_psi(5, 5, 1), G)
        trace = greedy_select({ka: self.A, kb: self.B}, self.ranker, 2)
        assert [k for k, _ in trace] == [ka, kb]
        single = self.ranker.map(self.A)
        assert trace[0][1] == single and trace[1][1] == 1.0 > single
        assert fused_map({ka: self.A, kb: self.B}, [ka, kb], self.ranker) == 1.0

    def test_zero_candidate_last(self):
        kz, ka, kb = (_psi(3, 5, 1), G), (_psi(5, 5, 1), G), (_psi(7, 5, 1), G)
        trace = greedy_select({kz: np.zeros((2, 3)), ka: self.A, kb: self.B}, self.ranker, 3)
        assert trace[-1][0] == kz

    def test_budget_errors(self):
        with pytest.raises(ValueError):
            greedy_select({(_psi(3, 5, 1), G): self.A}, self.ranker, 2)
        with pytest.raises(ValueError):
            greedy_select({(_psi(3, 5, 1), G): self.A}, self.ranker, 0)

    def test_trace_file(self, tmp_path):
        ka = (_psi(3, 5, 1), G)
        write_trace(tmp_path / "t.csv", greedy_select({ka: self.A}, self.ranker, 1), self.ranker, {ka: self.A})
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[1][:3] == ["1", "m3_n5_l1", "100"]


class TestMarginals:
    def test_single_psi(self):
        r = Ranker(["q"], ["a", "b"], {"q": {"b"}})
        s = {(_psi(3, 5, 1), G): np.array([[0.2, 0.1]])}
        out = marginal_analysis(s, r)
        assert out["m"] == [(3, r.map(s[(_psi(3, 5, 1), G)]))]

    def test_l_dominance_and_csv(self, tmp_path, rng):
        r = Ranker(["q0", "q1"], list("abcd"), {"q0": {"a"}, "q1": {"d"}})
        good = np.array([[1.0, 0, 0, 0], [0, 0, 0, 1.0]])
        bad = np.array([[0, 0, 0, 1.0], [1.0, 0, 0, 0]])
        scores = {}
        for m in (3, 5):
            for n in (5, 10):
                scores[(_psi(m, n, 1), G)] = bad
                scores[(_psi(m, n, 2), G)] = good
        out = marginal_analysis(scores, r, out_dir=tmp_path)
        ls = dict(out["l"])
        assert ls[2] > ls[1]
        assert out["plane"]["map"].shape == (2, 2)
        for name in ("marginal_gamma", "marginal_m", "marginal_n", "marginal_l", "plane_mn"):
            assert (tmp_path / f"{name}.csv").exists()

    def test_incomplete_grid_warns(self, caplog):
        r = Ranker(["q"], ["a", "b"], {"q": {"b"}})
        s = {(_psi(3, 5, 1), G): np.zeros((1, 2)), (_psi(5, 10, 2), G): np.ones((1, 2))}
        out = marginal_analysis(s, r)
        assert "incomplete grid" in caplog.text
        assert np.isnan(out["plane"]["map"]).sum() == 3
