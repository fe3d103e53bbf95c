"""Loading, validating and indexing knowledge-graph datasets.

Entities and relations are dense integer ids. A graph over ``R`` base
relations is stored with ``2R + 1`` augmented relations: ``r + R`` is the
inverse of ``r`` and ``2R`` is the self-loop relation. Triples are plain
``(N, 3)`` int64 arrays of ``(subject, relation, object)``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, VocabError

logger = logging.getLogger(__name__)

INDUCTIVE_SUFFIX = "_ind"


@dataclass
class Vocab:
    """Ordered entity and relation names with reverse lookup."""

    entity_names: list[str] = field(default_factory=list)
    relation_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._entity_ids = _index_names(self.entity_names, "entity")
        self._relation_ids = _index_names(self.relation_names, "relation")

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def entity_id(self, name: str, grow: bool = False) -> int:
        idx = self._entity_ids.get(name)
        if idx is None:
            if not grow:
                raise VocabError(f"unknown entity {name!r}")
            idx = len(self.entity_names)
            self.entity_names.append(name)
            self._entity_ids[name] = idx
        return idx

    def relation_id(self, name: str, grow: bool = False) -> int:
        idx = self._relation_ids.get(name)
        if idx is None:
            if not grow:
                raise VocabError(f"unknown relation {name!r}")
            idx = len(self.relation_names)
            self.relation_names.append(name)
            self._relation_ids[name] = idx
        return idx

    def copy(self) -> Vocab:
        return Vocab(list(self.entity_names), list(self.relation_names))


def _index_names(names, kind):
    index = {}
    for i, name in enumerate(names):
        if name in index:
            raise VocabError(f"duplicate {kind} name {name!r}")
        index[name] = i
    return index


def read_names(path) -> list[str]:
    """One name per line; the line index is the id."""
    with open(path, encoding="utf-8") as f:
        names = [line.rstrip("\r\n") for line in f]
    while names and names[-1] == "":
        names.pop()
    return names


def load_triples(path, vocab: Vocab, grow_entities: bool = False,
                 grow_relations: bool = False) -> np.ndarray:
    """Read ``head<TAB>relation<TAB>tail`` lines into a deduplicated array.

    With ``grow_*`` set the vocabulary is extended in first-seen order,
    otherwise an unknown name raises :class:`VocabError`.
    """
    rows = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, line_no, f"expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            try:
                triple = (vocab.entity_id(h, grow_entities),
                          vocab.relation_id(r, grow_relations),
                          vocab.entity_id(t, grow_entities))
            except VocabError as exc:
                raise VocabError(f"{path}:{line_no}: {exc}") from None
            if triple not in seen:
                seen.add(triple)
                rows.append(triple)
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def write_triples(path, triples: np.ndarray, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for h, r, t in np.asarray(triples):
            f.write(f"{vocab.entity_names[h]}\t{vocab.relation_names[r]}\t{vocab.entity_names[t]}\n")


def write_names(path, names) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for name in names:
            f.write(f"{name}\n")


def dedup_triples(triples: np.ndarray) -> np.ndarray:
    """Drop exact duplicates, keeping first occurrences in order."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) == 0:
        return triples
    _, first = np.unique(triples, axis=0, return_index=True)
    return triples[np.sort(first)]


class KnowledgeGraph:
    """Immutable augmented adjacency in CSR form.

    ``subj``, ``rel`` and ``obj`` hold every augmented edge sorted by
    ``(subject, relation, object)``; edges of entity ``e`` occupy
    ``indptr[e]:indptr[e + 1]``.
    """

    def __init__(self, triples, n: int, n_rel: int):
        triples = dedup_triples(triples)
        if len(triples):
            if triples[:, [0, 2]].min() < 0 or triples[:, [0, 2]].max() >= n:
                raise IndexError(f"entity id out of range [0, {n})")
            if triples[:, 1].min() < 0 or triples[:, 1].max() >= n_rel:
                raise IndexError(f"relation id out of range [0, {n_rel})")
        self.n = int(n)
        self.n_rel = int(n_rel)
        self.triples = triples
        ids = np.arange(n, dtype=np.int64)
        s = np.concatenate([triples[:, 0], triples[:, 2], ids])
        r = np.concatenate([triples[:, 1], triples[:, 1] + n_rel,
                            np.full(n, 2 * n_rel, dtype=np.int64)])
        o = np.concatenate([triples[:, 2], triples[:, 0], ids])
        order = np.lexsort((o, r, s))
        self.subj = s[order]
        self.rel = r[order]
        self.obj = o[order]
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.subj, minlength=n), out=self.indptr[1:])
        for arr in (self.subj, self.rel, self.obj, self.indptr):
            arr.setflags(write=False)

    @property
    def n_aug_rel(self) -> int:
        return 2 * self.n_rel + 1

    @property
    def self_loop(self) -> int:
        return 2 * self.n_rel

    @property
    def edge_count(self) -> int:
        return len(self.subj)

    def degree(self) -> np.ndarray:
        """Augmented out-degree, self-loop included."""
        return np.diff(self.indptr)

    def adjacency(self, e: int) -> list[tuple[int, int]]:
        lo, hi = self.indptr[e], self.indptr[e + 1]
        return list(zip(self.rel[lo:hi].tolist(), self.obj[lo:hi].tolist()))

    def edge_ids(self, entities: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ids of all edges leaving ``entities``, and for each the position
        of its subject inside ``entities``."""
        entities = np.asarray(entities, dtype=np.int64)
        starts = self.indptr[entities]
        counts = self.indptr[entities + 1] - starts
        owner = np.repeat(np.arange(len(entities)), counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        return starts[owner] + offsets, owner

    def find_edges(self, subj, rel, obj) -> np.ndarray:
        """Edge ids of the given augmented triples; ``-1`` where absent."""
        if not hasattr(self, "_edge_keys"):
            self._edge_keys = (self.subj * self.n_aug_rel + self.rel) * self.n + self.obj
        keys = (np.asarray(subj) * self.n_aug_rel + np.asarray(rel)) * self.n + np.asarray(obj)
        pos = np.searchsorted(self._edge_keys, keys)
        pos_c = np.minimum(pos, max(len(self._edge_keys) - 1, 0))
        found = (pos < len(self._edge_keys)) & (self._edge_keys[pos_c] == keys)
        return np.where(found, pos, -1)


def build_graph(triples, n: int, n_rel: int) -> KnowledgeGraph:
    return KnowledgeGraph(triples, n, n_rel)


def neighbors(kg: KnowledgeGraph, entity_set) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor closure of ``entity_set`` and the edges leaving it.

    Returns the sorted neighbor ids and an ``(E, 3)`` array of augmented
    edges whose subject lies in ``entity_set``. Self-loops guarantee the
    input set is contained in the result.
    """
    entity_set = np.unique(np.asarray(entity_set, dtype=np.int64))
    if len(entity_set) and (entity_set[0] < 0 or entity_set[-1] >= kg.n):
        raise IndexError(f"entity id out of range [0, {kg.n})")
    eids, _ = kg.edge_ids(entity_set)
    edges = np.stack([kg.subj[eids], kg.rel[eids], kg.obj[eids]], axis=1)
    return np.unique(edges[:, 2]), edges


def bfs_distance(kg: KnowledgeGraph, source: int) -> np.ndarray:
    """Hop distances from ``source`` over base and inverse edges.

    Self-loops are ignored; since every base edge has its inverse the
    traversal is effectively undirected. Unreachable entities get ``inf``.
    """
    dist = np.full(kg.n, np.inf)
    dist[source] = 0
    frontier = np.array([source], dtype=np.int64)
    hop = 0
    while len(frontier):
        hop += 1
        eids, _ = kg.edge_ids(frontier)
        nxt = kg.obj[eids[kg.rel[eids] != kg.self_loop]]
        nxt = np.unique(nxt[np.isinf(dist[nxt])])
        dist[nxt] = hop
        frontier = nxt
    return dist


def queries_from_triples(triples: np.ndarray, n_rel: int) -> np.ndarray:
    """Forward ``(h, r, t)`` and reverse ``(t, r + R, h)`` queries, interleaved
    per triple, as ``(2N, 3)`` rows of ``(e_q, r_q, e_a)``."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    fwd = triples
    rev = np.stack([triples[:, 2], triples[:, 1] + n_rel, triples[:, 0]], axis=1)
    out = np.empty((2 * len(triples), 3), dtype=np.int64)
    out[0::2] = fwd
    out[1::2] = rev
    return out


class FilterIndex:
    """Map ``(entity, augmented relation)`` to every known true object."""

    def __init__(self, triples, n_rel: int):
        self.n_rel = int(n_rel)
        q = queries_from_triples(dedup_triples(triples), n_rel)
        keys = q[:, 0] * (2 * n_rel) + q[:, 1]
        order = np.lexsort((q[:, 2], keys))
        keys, objs = keys[order], q[order, 2]
        uniq, starts = np.unique(keys, return_index=True)
        self._index = dict(zip(uniq.tolist(), np.split(objs, starts[1:])))
        self.size = len(q)

    def get(self, e: int, r: int) -> np.ndarray:
        """Sorted objects true for ``(e, r)``; empty if none."""
        return self._index.get(int(e) * 2 * self.n_rel + int(r), np.empty(0, dtype=np.int64))

    def __len__(self):
        return len(self._index)


def build_filter_index(splits, n_rel: int) -> FilterIndex:
    splits = [np.asarray(s, dtype=np.int64).reshape(-1, 3) for s in splits]
    return FilterIndex(np.concatenate(splits) if splits else np.empty((0, 3), np.int64), n_rel)


@dataclass
class InductiveSplit:
    """Test graph with its own entity vocabulary and the shared relations."""

    vocab: Vocab
    facts: np.ndarray
    graph: KnowledgeGraph
    test: np.ndarray
    valid: np.ndarray
    filter_index: FilterIndex

    def queries(self, split: str = "test") -> np.ndarray:
        return queries_from_triples(getattr(self, split), self.vocab.n_relations)


@dataclass
class DatasetBundle:
    vocab: Vocab
    facts: np.ndarray
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    fact_graph: KnowledgeGraph
    filter_index: FilterIndex
    inductive_test: InductiveSplit | None = None
    name: str = ""

    @property
    def n_rel(self) -> int:
        return self.vocab.n_relations

    def queries(self, split: str) -> np.ndarray:
        return queries_from_triples(getattr(self, split), self.n_rel)

    def eval_graph(self) -> KnowledgeGraph:
        """Graph used to answer valid/test queries: facts plus train triples."""
        if not hasattr(self, "_eval_graph"):
            self._eval_graph = KnowledgeGraph(
                np.concatenate([self.facts, self.train]), self.vocab.n_entities, self.n_rel)
        return self._eval_graph

    def split_for_eval(self, split: str):
        """``(graph, queries, filter_index)`` used to evaluate ``split``."""
        if split == "ind_test":
            ind = self.inductive_test
            if ind is None:
                raise ContractError("dataset has no inductive test graph")
            return ind.graph, ind.queries("test"), ind.filter_index
        return self.eval_graph(), self.queries(split), self.filter_index


def split_train(triples: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a single train file 3:1 into fact triples and train queries."""
    rng = np.random.default_rng([seed, 0x5EED])
    perm = rng.permutation(len(triples))
    n_fact = (3 * len(triples)) // 4
    return triples[np.sort(perm[:n_fact])], triples[np.sort(perm[n_fact:])]


def _read_optional(path, vocab, **grow):
    if os.path.exists(path):
        return load_triples(path, vocab, **grow)
    return np.empty((0, 3), dtype=np.int64)


def load_dataset(path, mode: str = "transductive", seed: int = 0) -> DatasetBundle:
    """Load a dataset directory (see README for the layout).

    ``entities.txt``/``relations.txt`` fix the vocabularies when present;
    otherwise names are assigned ids in first-seen order over facts and
    train. Valid and test names must already be known. Without
    ``facts.txt`` the train file is split 3:1 with ``seed``.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    if mode not in ("transductive", "inductive"):
        raise ContractError(f"unknown mode {mode!r}")
    ent_file, rel_file = path / "entities.txt", path / "relations.txt"
    vocab = Vocab(read_names(ent_file) if ent_file.exists() else [],
                  read_names(rel_file) if rel_file.exists() else [])
    grow = dict(grow_entities=not ent_file.exists(), grow_relations=not rel_file.exists())
    if (path / "facts.txt").exists():
        facts = load_triples(path / "facts.txt", vocab, **grow)
        train = load_triples(path / "train.txt", vocab, **grow)
    else:
        facts, train = split_train(load_triples(path / "train.txt", vocab, **grow), seed)
    valid = _read_optional(path / "valid.txt", vocab)
    test = _read_optional(path / "test.txt", vocab)
    if len(train) == 0:
        raise ContractError(f"{path}: no train triples")
    overlap = _count_overlap(facts, train)
    if overlap:
        logger.warning("%s: %d train triples also appear as facts; they are masked per batch",
                       path, overlap)
    n_rel = vocab.n_relations
    graph = KnowledgeGraph(facts, vocab.n_entities, n_rel)
    filt = build_filter_index([facts, train, valid, test], n_rel)
    inductive = None
    if mode == "inductive":
        inductive = load_inductive(path.parent / (path.name + INDUCTIVE_SUFFIX), vocab)
    return DatasetBundle(vocab, facts, train, valid, test, graph, filt, inductive, name=path.name)


def load_inductive(path, train_vocab: Vocab) -> InductiveSplit:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"inductive test directory not found: {path}")
    ent_file = path / "entities.txt"
    vocab = Vocab(read_names(ent_file) if ent_file.exists() else [], list(train_vocab.relation_names))
    grow = not ent_file.exists()
    facts_file = path / "facts.txt" if (path / "facts.txt").exists() else path / "train.txt"
    facts = load_triples(facts_file, vocab, grow_entities=grow)
    test = load_triples(path / "test.txt", vocab, grow_entities=grow)
    valid = _read_optional(path / "valid.txt", vocab, grow_entities=grow)
    shared = set(vocab.entity_names) & set(train_vocab.entity_names)
    if shared:
        logger.warning("%s: %d entity names also occur in the training graph; "
                       "they are treated as distinct entities", path, len(shared))
    n_rel = vocab.n_relations
    graph = KnowledgeGraph(facts, vocab.n_entities, n_rel)
    filt = build_filter_index([facts, valid, test], n_rel)
    return InductiveSplit(vocab, facts, graph, test, valid, filt)


def _count_overlap(a: np.ndarray, b: np.ndarray) -> int:
    if len(a) == 0 or len(b) == 0:
        return 0
    sa = {tuple(t) for t in a.tolist()}
    return sum(tuple(t) in sa for t in b.tolist())


def write_dataset(path, vocab: Vocab, facts, train, valid, test) -> None:
    """Write a dataset directory in the layout :func:`load_dataset` reads."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_names(path / "entities.txt", vocab.entity_names)
    write_names(path / "relations.txt", vocab.relation_names)
    for name, triples in (("facts", facts), ("train", train), ("valid", valid), ("test", test)):
        write_triples(path / f"{name}.txt", triples, vocab)
