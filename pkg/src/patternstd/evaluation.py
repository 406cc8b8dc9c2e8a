"""Ranking metrics, greedy weight selection and marginal analyses."""

import csv
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

log = logging.getLogger(__name__)


def average_precision(ranking, relevant):
    """Mean of precision@rank over the ranks of the relevant documents.

    The denominator is the number of relevant documents; relevant
    documents missing from the ranking contribute zero.  The sum is kept
    as an exact fraction, so the result is the correctly rounded value.
    """
    relevant = set(relevant)
    if not relevant:
        raise ValueError("average precision needs at least one relevant document")
    hits = 0
    total = Fraction(0)
    for i, doc in enumerate(ranking, 1):
        if doc in relevant:
            hits += 1
            total += Fraction(hits, i)
    return float(total / len(relevant))


def precision_at(ranking, relevant, k):
    return sum(1 for d in ranking[:k] if d in relevant) / k


@dataclass
class EvaluationReport:
    average_precision: dict
    map: float
    p_at_5: float
    p_at_10: float
    per_key_map: dict = field(default_factory=dict)
    selection_trace: list = field(default_factory=list)


class Ranker:
    """Fast MAP for score arrays of shape (num_queries, num_documents).

    Documents with equal scores are ordered by document id.
    """

    def __init__(self, query_ids, document_ids, judgments):
        self.query_ids = list(query_ids)
        self.document_ids = list(document_ids)
        order = sorted(range(len(self.document_ids)), key=lambda i: self.document_ids[i])
        self.id_rank = np.empty(len(order), dtype=np.int64)
        self.id_rank[order] = np.arange(len(order))
        dpos = {d: i for i, d in enumerate(self.document_ids)}
        self.rows = []
        self.relevant = []
        for qi, q in enumerate(self.query_ids):
            rel = judgments.get(q, set())
            if not rel:
                log.warning("query %s has no relevant documents; skipped in metrics", q)
                continue
            mask = np.zeros(len(self.document_ids), dtype=bool)
            mask[[dpos[d] for d in rel if d in dpos]] = True
            self.rows.append(qi)
            self.relevant.append((mask, len(rel)))

    def _order(self, row):
        return np.lexsort((self.id_rank, -row))

    def ap_values(self, scores):
        out = []
        for qi, (mask, n_rel) in zip(self.rows, self.relevant):
            hit = mask[self._order(scores[qi])]
            ranks = np.flatnonzero(hit) + 1
            out.append(float(np.sum(np.arange(1, ranks.size + 1) / ranks) / n_rel))
        return out

    def map(self, scores):
        ap = self.ap_values(scores)
        return float(np.mean(ap)) if ap else 0.0

    def report(self, scores):
        ap = self.ap_values(scores)
        p5, p10 = [], []
        for qi, (mask, _) in zip(self.rows, self.relevant):
            hit = mask[self._order(scores[qi])]
            p5.append(hit[:5].sum() / 5)
            p10.append(hit[:10].sum() / 10)
        return EvaluationReport(
            {self.query_ids[qi]: a for qi, a in zip(self.rows, ap)},
            float(np.mean(ap)) if ap else 0.0,
            float(np.mean(p5)) if p5 else 0.0,
            float(np.mean(p10)) if p10 else 0.0)


def evaluate(scores, query_ids, document_ids, judgments):
    return Ranker(query_ids, document_ids, judgments).report(scores)


def split_queries(query_ids, dev_fraction=0.5, seed=0):
    """Seeded split of query ids into (dev, eval) lists, each kept sorted."""
    ids = sorted(query_ids)
    if not 0.0 < dev_fraction < 1.0:
        raise ValueError("dev_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ids))
    k = min(max(1, int(round(dev_fraction * len(ids)))), len(ids) - 1)
    dev = sorted(ids[i] for i in order[:k])
    return dev, sorted(ids[i] for i in order[k:])


def greedy_select(scores, ranker, budget):
    """Forward selection of (psi, gamma) keys maximizing fused MAP.

    ``scores`` maps keys to (num_queries, num_documents) arrays.  Ties go to
    the lexicographically smallest key.  Returns [(key, cumulative MAP)].
    """
    keys = sorted(scores)
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if budget > len(keys):
        raise ValueError(f"budget {budget} exceeds the {len(keys)} available (psi, gamma) pairs")
    fused = np.zeros_like(scores[keys[0]])
    chosen, trace = set(), []
    for _ in range(budget):
        best_key, best_map = None, -1.0
        for key in keys:
            if key in chosen:
                continue
            value = ranker.map(fused + scores[key])
            if value > best_map:
                best_key, best_map = key, value
        chosen.add(best_key)
        fused = fused + scores[best_key]
        trace.append((best_key, best_map))
    return trace


def fused_map(scores, keys, ranker):
    if not keys:
        return 0.0
    total = sum((scores[k] for k in sorted(keys)), np.zeros_like(next(iter(scores.values()))))
    return ranker.map(total)


def marginal_analysis(scores, ranker, gamma=None, plane_l=None, out_dir=None):
    """MAP after summing scores over all but one granularity dimension.

    ``scores`` maps (psi, gamma) to arrays.  Returns a dict of tables:
    ``gamma`` (sum over every psi, per method), ``m``/``n``/``l`` marginals
    for the chosen method, and the (m, n) plane of single-set MAPs at
    ``plane_l``.  Missing grid points are reported and skipped.
    """
    gammas = sorted({g for _, g in scores})
    gamma = gamma if gamma is not None else gammas[-1]
    psis = sorted(p for p, g in scores if g == gamma)
    ms = sorted({p.m for p in psis})
    ns = sorted({p.n for p in psis})
    ls = sorted({p.l for p in psis})
    expected = len(ms) * len(ns) * len(ls)
    if len(psis) != expected:
        log.warning("incomplete grid: %d of %d (m, n, l) points have scores", len(psis), expected)
    out = {"gamma": [(str(g), fused_map(scores, [k for k in scores if k[1] == g], ranker)) for g in gammas]}
    for dim in ("m", "n", "l"):
        values = sorted({getattr(p, dim) for p in psis})
        out[dim] = [(v, fused_map(scores, [(p, gamma) for p in psis if getattr(p, dim) == v], ranker))
                    for v in values]
    plane_l = plane_l if plane_l is not None else (ls[-1] if ls else None)
    plane = np.full((len(ms), len(ns)), np.nan)
    for p in psis:
        if p.l == plane_l:
            plane[ms.index(p.m), ns.index(p.n)] = ranker.map(scores[(p, gamma)])
    out["plane"] = {"m": ms, "n": ns, "l": plane_l, "gamma": str(gamma), "map": plane}
    if out_dir is not None:
        write_marginals(out_dir, out)
    return out


def write_marginals(out_dir, result):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "marginal_gamma.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["gamma", "map"])
        w.writerows([g, f"{v:.6f}"] for g, v in result["gamma"])
    for dim in ("m", "n", "l"):
        with open(os.path.join(out_dir, f"marginal_{dim}.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([dim, "map"])
            w.writerows([v, f"{x:.6f}"] for v, x in result[dim])
    plane = result["plane"]
    with open(os.path.join(out_dir, "plane_mn.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["m\\n"] + plane["n"])
        for i, m in enumerate(plane["m"]):
            w.writerow([m] + ["" if np.isnan(x) else f"{x:.6f}" for x in plane["map"][i]])


def write_trace(path, trace, eval_ranker=None, scores=None):
    """Selection trace CSV: step, psi, gamma, cumulative dev MAP, eval MAP."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "psi", "gamma", "dev_map", "eval_map"])
        chosen = []
        for step, ((psi, gamma), dev) in enumerate(trace, 1):
            chosen.append((psi, gamma))
            ev = fused_map(scores, chosen, eval_ranker) if eval_ranker is not None else float("nan")
            w.writerow([step, str(psi), str(gamma), f"{dev:.6f}", f"{ev:.6f}"])


def write_report(out_dir, report, name="report"):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query", "average_precision"])
        for q in sorted(report.average_precision):
            w.writerow([q, f"{report.average_precision[q]:.6f}"])
    lines = [f"MAP   {report.map:.4f}", f"P@5   {report.p_at_5:.4f}", f"P@10  {report.p_at_10:.4f}",
             f"queries {len(report.average_precision)}"]
    if report.per_key_map:
        lines.append("")
        lines.append("per (psi, gamma) MAP:")
        for (psi, gamma), v in sorted(report.per_key_map.items()):
            lines.append(f"  {psi} {gamma} {v:.4f}")
    with open(os.path.join(out_dir, f"{name}.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
