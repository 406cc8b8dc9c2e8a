"""Online latency of pattern-based search against frame-level DTW.

    python3 scripts/benchmark.py --m 5 --n 24 --pairs 60
"""

import argparse
import json

from patternstd.discovery import DiscoveryConfig, discover
from patternstd.experiment import benchmark_latency
from patternstd.hmm import GranularityConfig
from patternstd.indexing import build_index
from patternstd.similarity import build_similarity
from patternstd.synthetic import SyntheticSpec, synthesize_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=5)
    ap.add_argument("--n", type=int, default=24)
    ap.add_argument("--l", type=int, default=1)
    ap.add_argument("--pairs", type=int, default=60)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    corpus = synthesize_corpus(SyntheticSpec(), args.seed)
    docs = {u.id: corpus.features[u.id].frames for u in corpus.manifest.documents}
    queries = {u.id: corpus.features[u.id].frames for u in corpus.manifest.queries}
    psi = GranularityConfig(args.m, args.n, args.l)
    pset = discover(docs, psi, DiscoveryConfig([psi], seed=args.seed))
    out = benchmark_latency(docs, queries, build_index(pset, docs), build_index(pset, queries),
                            build_similarity(pset, "soft"), args.pairs, args.repeats, args.seed)
    print(json.dumps(out, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
