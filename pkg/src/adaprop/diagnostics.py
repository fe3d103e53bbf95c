"""Propagation-path statistics and export.

IE is the fraction of entities a path touches after step 0, ToC the
chance a uniformly picked final candidate is the answer, and overlap a
stepwise Jaccard ratio between the paths of two queries.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ContractError
from .kg_store import KnowledgeGraph, bfs_distance
from .propagation import PropagationPath


@dataclass
class PathStats:
    ie: float
    toc: float
    sizes: list

    @classmethod
    def of(cls, path: PropagationPath, n: int, e_a: int) -> PathStats:
        return cls(ie_ratio(path, n), toc_ratio(path, e_a), [len(s) for s in path.steps])


def ie_ratio(path: PropagationPath, n: int) -> float:
    if n <= 0:
        raise ContractError("graph must have at least one entity")
    return len(path.involved()) / n


def toc_ratio(path: PropagationPath, e_a: int) -> float:
    final = path.final
    if len(final) == 0:
        raise ContractError("path has an empty final set")
    i = np.searchsorted(final, e_a)
    return 1.0 / len(final) if i < len(final) and final[i] == e_a else 0.0


def path_overlap(p1: PropagationPath, p2: PropagationPath) -> float:
    """``sum_l |V1 & V2| / sum_l |V1 | V2|`` over steps ``1..L``."""
    if p1.L != p2.L:
        raise ContractError(f"paths have different depths ({p1.L} vs {p2.L})")
    inter = sum(len(np.intersect1d(a, b)) for a, b in zip(p1.steps[1:], p2.steps[1:]))
    union = sum(len(np.union1d(a, b)) for a, b in zip(p1.steps[1:], p2.steps[1:]))
    return inter / union if union else 1.0


def overlap_pairs(queries, max_pairs: int | None = None) -> list[tuple[int, int]]:
    """Index pairs of queries sharing ``e_q`` but differing in ``r_q``."""
    by_entity = defaultdict(list)
    for i, (e_q, r_q) in enumerate(np.asarray(queries)[:, :2].tolist()):
        by_entity[e_q].append((r_q, i))
    pairs = []
    for e_q in sorted(by_entity):
        for (r1, i), (r2, j) in combinations(by_entity[e_q], 2):
            if r1 != r2:
                pairs.append((i, j))
                if max_pairs and len(pairs) >= max_pairs:
                    return pairs
    return pairs


def mean_overlap(paths, pairs) -> float:
    if not pairs:
        return float("nan")
    return float(np.mean([path_overlap(paths[i], paths[j]) for i, j in pairs]))


def per_hop_report(ranks, kg: KnowledgeGraph) -> list[tuple]:
    """``(hop, count, MRR)`` per distance from ``e_q`` to ``e_a``; ``inf`` last."""
    cache = {}
    buckets = defaultdict(list)
    for r in ranks:
        e_q, _, e_a = r.query
        if e_q not in cache:
            cache[e_q] = bfs_distance(kg, e_q)
        buckets[cache[e_q][e_a]].append(1.0 / r.filtered_rank)
    return [(h, len(v), float(np.mean(v))) for h, v in sorted(buckets.items())]


def curves(paths, queries, n: int) -> list[tuple]:
    """Mean IE and ToC of the truncated paths for every ``l`` (``l >= 1``)."""
    L = paths[0].L
    rows = []
    for l in range(1, L + 1):
        ie = np.mean([ie_ratio(p.truncate(l), n) for p in paths])
        toc = np.mean([toc_ratio(p.truncate(l), int(q[2])) for p, q in zip(paths, queries)])
        rows.append((l, float(ie), float(toc)))
    return rows


def summarize(paths, queries, n: int, pairs=None) -> dict:
    """Aggregate row for the analyze table."""
    queries = np.asarray(queries)
    stats = [PathStats.of(p, n, int(q[2])) for p, q in zip(paths, queries)]
    reach = [s.toc > 0 for s in stats]
    pairs = overlap_pairs(queries) if pairs is None else pairs
    return {"IE": float(np.mean([s.ie for s in stats])),
            "ToC": float(np.mean([s.toc for s in stats])),
            "reach": float(np.mean(reach)),
            "overlap": mean_overlap(paths, pairs),
            "pairs": len(pairs)}


# ---------------------------------------------------------------- export

def path_to_json(path: PropagationPath, query) -> dict:
    return {"query": [int(x) for x in query],
            "steps": [{"level": l, "entities": s.tolist(), "newly_sampled": new.tolist()}
                      for l, (s, new) in enumerate(zip(path.steps, path.sampled))]}


def path_from_json(obj) -> tuple[PropagationPath, list]:
    steps = sorted(obj["steps"], key=lambda s: s["level"])
    path = PropagationPath([np.array(s["entities"], dtype=np.int64) for s in steps],
                           [np.array(s["newly_sampled"], dtype=np.int64) for s in steps])
    return path, list(obj["query"])


def path_to_dot(path: PropagationPath, query, names=None) -> str:
    """Graphviz digraph; node colour encodes the step an entity first entered."""
    palette = ["#d62728", "#ff7f0e", "#2ca02c", "#1f77b4", "#9467bd", "#8c564b",
               "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    e_q = int(query[0])
    e_a = int(query[2]) if len(query) > 2 else None
    first = path.first_step()
    lines = ["digraph propagation {", "  node [style=filled];"]
    for e in sorted(first):
        label = names[e] if names is not None else str(e)
        attrs = [f'label="{label}"', f'fillcolor="{palette[first[e] % len(palette)]}"',
                 f'step="{first[e]}"']
        if e == e_q:
            attrs.append("shape=doublecircle")
        elif e == e_a:
            attrs.append("shape=box")
        lines.append(f"  {e} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_path(path: PropagationPath, query, fmt: str, out_file, names=None) -> None:
    if fmt == "json":
        text = json.dumps(path_to_json(path, query), indent=1) + "\n"
    elif fmt == "dot":
        text = path_to_dot(path, query, names)
    else:
        raise ContractError(f"unknown export format {fmt!r}")
    with open(out_file, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def load_path(in_file) -> tuple[PropagationPath, list]:
    with open(in_file, encoding="utf-8") as f:
        return path_from_json(json.load(f))
