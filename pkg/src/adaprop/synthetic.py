"""Synthetic graphs: random toy graphs and the planted-path benchmark.

In the planted-path benchmark every hub entity answers ``m`` query
relations. The answer of query relation ``j`` sits at the end of a chain
``hub -r_j1-> a_1 -r_j2-> ... -> answer`` of length 3 or 4. The first hop
is ambiguous: the hub also has ``siblings`` dead-end children under the
same relation ``r_j1``, so the right child cannot be told apart until its
continuation has been seen. Further distractor trees hang off the hub
through noise relations. Hubs are disjoint components; entity ids are
shuffled so that id order carries no signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg_store import DatasetBundle, KnowledgeGraph, Vocab, build_filter_index


def random_kg(n: int, n_rel: int, n_edges: int, rng: np.random.Generator) -> KnowledgeGraph:
    """Uniform random multigraph (duplicates dropped)."""
    triples = np.stack([rng.integers(n, size=n_edges), rng.integers(n_rel, size=n_edges),
                        rng.integers(n, size=n_edges)], axis=1)
    return KnowledgeGraph(triples, n, n_rel)


def chain_kg(n: int) -> KnowledgeGraph:
    """``0 -r0-> 1 -r0-> ... -> n-1``."""
    e = np.arange(n - 1)
    return KnowledgeGraph(np.stack([e, np.zeros_like(e), e + 1], axis=1), n, 1)


def star_kg(leaves: int) -> KnowledgeGraph:
    """Centre 0 linked to ``1..leaves`` with one relation."""
    e = np.arange(1, leaves + 1)
    return KnowledgeGraph(np.stack([np.zeros_like(e), np.zeros_like(e), e], axis=1), leaves + 1, 1)


@dataclass
class PlantedConfig:
    hubs: int = 60
    query_rels: int = 4
    chain_lens: tuple = (3, 4)
    siblings: int = 3
    distractors: int = 4
    distractor_depth: int = 3
    branching: int = 2
    noise_rels: int = 6
    train_frac: float = 0.6
    valid_frac: float = 0.2


@dataclass
class PlantedBenchmark:
    bundle: DatasetBundle
    hop: dict

    def forward_queries(self, split: str) -> np.ndarray:
        """Hub-to-answer queries only (no reverse direction)."""
        return self.bundle.queries(split)[0::2]


def planted_paths(cfg: PlantedConfig = PlantedConfig(), seed: int = 0) -> PlantedBenchmark:
    rng = np.random.default_rng([seed, 0x9A7])
    m = cfg.query_rels
    lens = [cfg.chain_lens[j % len(cfg.chain_lens)] for j in range(m)]
    # relation ids: query relations, chain relations per query relation, noise
    chain_rel = []
    nxt = m
    for j in range(m):
        chain_rel.append(list(range(nxt, nxt + lens[j])))
        nxt += lens[j]
    noise = list(range(nxt, nxt + cfg.noise_rels))
    n_rel = nxt + cfg.noise_rels

    facts, queries, hop = [], [], {}
    count = 0

    def new():
        nonlocal count
        count += 1
        return count - 1

    for _ in range(cfg.hubs):
        hub = new()
        hub_queries = []
        for j in range(m):
            prev = hub
            for k, r in enumerate(chain_rel[j]):
                cur = new()
                facts.append((prev, r, cur))
                if k == 0:
                    for _ in range(cfg.siblings):
                        facts.append((hub, r, new()))
                prev = cur
            hub_queries.append((hub, j, prev))
            hop[(hub, j)] = lens[j]
        frontier = [hub]
        for depth in range(cfg.distractor_depth):
            width = cfg.distractors if depth == 0 else cfg.branching
            grown = []
            for e in frontier:
                for _ in range(width):
                    c = new()
                    facts.append((e, int(rng.choice(noise)), c))
                    grown.append(c)
            frontier = grown
        queries.append(hub_queries)

    perm = rng.permutation(count)
    facts = np.array(facts, dtype=np.int64)
    facts[:, 0], facts[:, 2] = perm[facts[:, 0]], perm[facts[:, 2]]
    hub_order = rng.permutation(cfg.hubs)
    n_train = int(round(cfg.train_frac * cfg.hubs))
    n_valid = int(round(cfg.valid_frac * cfg.hubs))
    parts = np.split(hub_order, [n_train, n_train + n_valid])

    def triples(hubs):
        rows = [(perm[h], j, perm[a]) for i in sorted(hubs) for h, j, a in queries[i]]
        return np.array(rows, dtype=np.int64).reshape(-1, 3)

    train, valid, test = (triples(p) for p in parts)
    hop = {(int(perm[h]), j): v for (h, j), v in hop.items()}
    names_e = [f"e{i}" for i in range(count)]
    names_r = ([f"q{j}" for j in range(m)]
               + [f"c{j}_{k}" for j in range(m) for k in range(lens[j])]
               + [f"n{i}" for i in range(cfg.noise_rels)])
    vocab = Vocab(names_e, names_r)
    graph = KnowledgeGraph(facts, count, n_rel)
    filt = build_filter_index([facts, train, valid, test], n_rel)
    bundle = DatasetBundle(vocab, facts, train, valid, test, graph, filt, name=f"planted{seed}")
    return PlantedBenchmark(bundle, hop)
