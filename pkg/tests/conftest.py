import numpy as np
import pytest

from adaprop.kg_store import KnowledgeGraph, Vocab, write_dataset
from adaprop.synthetic import random_kg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chain3():
    """0 -r0-> 1 -r0-> 2"""
    return KnowledgeGraph(np.array([[0, 0, 1], [1, 0, 2]]), 3, 1)


@pytest.fixture
def toy_kg():
    return random_kg(15, 3, 35, np.random.default_rng(7))


def make_dataset_dir(path, n=20, n_rel=3, seed=0, with_facts=True):
    """Small random dataset directory; returns its vocab."""
    r = np.random.default_rng(seed)
    triples = np.unique(np.stack([r.integers(n, size=80), r.integers(n_rel, size=80),
                                  r.integers(n, size=80)], axis=1), axis=0)
    triples = triples[r.permutation(len(triples))]
    vocab = Vocab([f"ent_{i}" for i in range(n)], [f"rel_{i}" for i in range(n_rel)])
    facts, train, valid, test = np.split(triples, [40, 55, 62])
    if with_facts:
        write_dataset(path, vocab, facts, train, valid, test)
    else:
        write_dataset(path, vocab, facts[:0], np.concatenate([facts, train]), valid, test)
        (path / "facts.txt").unlink()
    return vocab, facts, train, valid, test


def make_bundle(facts, train, valid, test, n, n_rel):
    """In-memory dataset with generated names."""
    from adaprop.kg_store import DatasetBundle, build_filter_index

    arrs = [np.asarray(x, dtype=np.int64).reshape(-1, 3) for x in (facts, train, valid, test)]
    vocab = Vocab([f"e{i}" for i in range(n)], [f"r{i}" for i in range(n_rel)])
    return DatasetBundle(vocab, *arrs, KnowledgeGraph(arrs[0], n, n_rel),
                         build_filter_index(arrs, n_rel))
