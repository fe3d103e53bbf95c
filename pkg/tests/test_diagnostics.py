import json

import numpy as np
import pytest

from adaprop.baselines import full_path, progressive_path
from adaprop.diagnostics import (PathStats, curves, export_path, ie_ratio, load_path,
                                 mean_overlap, overlap_pairs, path_overlap, path_to_dot,
                                 per_hop_report, summarize, toc_ratio)
from adaprop.errors import ContractError
from adaprop.evaluator import RankResult
from adaprop.propagation import ModelConfig, ModelParams, PropagationPath
from adaprop.sampler import adaprop_forward
from adaprop.synthetic import chain_kg, random_kg


def P(*steps):
    return PropagationPath([np.array(s, dtype=np.int64) for s in steps])


class TestRatios:
    def test_ie_full_path(self, toy_kg):
        assert ie_ratio(full_path(toy_kg, 3), toy_kg.n) == 1.0

    def test_ie_arithmetic(self):
        assert ie_ratio(P([0], [0, 1, 2], [0, 1, 2, 3, 4]), 50) == pytest.approx(0.1)

    def test_ie_needs_entities(self):
        with pytest.raises(ContractError):
            ie_ratio(P([0]), 0)

    def test_toc(self):
        p = P([0], [0, 3, 5, 9])
        assert toc_ratio(p, 5) == 0.25
        assert toc_ratio(p, 4) == 0.0

    def test_toc_progressive_reaches_within_depth(self):
        p = progressive_path(chain_kg(5), 0, 3)
        assert toc_ratio(p, 3) > 0 and toc_ratio(p, 4) == 0

    def test_stats_sizes(self):
        s = PathStats.of(P([0], [0, 1], [0, 1, 2]), 10, 2)
        assert s.sizes == [1, 2, 3] and s.toc == pytest.approx(1 / 3)


class TestOverlap:
    def test_hand_example(self):
        a = P([7], [1, 2], [1, 2, 4])
        b = P([7], [2, 3], [2, 3, 4])
        assert path_overlap(a, b) == pytest.approx(3 / 7)

    def test_identical_and_disjoint(self):
        a = P([0], [0, 1])
        assert path_overlap(a, a) == 1.0
        assert path_overlap(a, P([5], [5, 6])) == 0.0

    def test_symmetric_and_bounded(self, rng):
        for _ in range(50):
            a = P([0], rng.choice(20, 5, replace=False), rng.choice(20, 8, replace=False))
            b = P([0], rng.choice(20, 4, replace=False), rng.choice(20, 9, replace=False))
            o = path_overlap(a, b)
            assert o == path_overlap(b, a) and 0 <= o <= 1

    def test_mismatched_depth(self):
        with pytest.raises(ContractError):
            path_overlap(P([0], [0]), P([0]))

    def test_pairs_share_entity_differ_relation(self):
        q = np.array([[1, 0, 5], [1, 1, 6], [1, 0, 7], [2, 0, 1], [2, 2, 3]])
        assert overlap_pairs(q) == [(0, 1), (1, 2), (3, 4)]
        assert overlap_pairs(q, max_pairs=2) == [(0, 1), (1, 2)]

    def test_progressive_overlap_is_one(self, toy_kg):
        q = np.array([[0, 0, 1], [0, 1, 2], [0, 2, 3]])
        paths = [progressive_path(toy_kg, 0, 3)] * 3
        assert mean_overlap(paths, overlap_pairs(q)) == 1.0

    def test_adaprop_paths_depend_on_relation(self):
        kg = random_kg(40, 3, 120, np.random.default_rng(2))
        params = ModelParams(ModelConfig(3, d=8, L=3, mess_op="mul"), seed=1)
        _, p1 = adaprop_forward([0, 0, 1], kg, params, 3, 2, None)
        _, p2 = adaprop_forward([0, 2, 1], kg, params, 3, 2, None)
        assert p1 != p2
        assert path_overlap(p1, p2) < 1
        prog = progressive_path(kg, 0, 3)
        assert path_overlap(prog, prog) == 1


class TestReports:
    def test_per_hop_buckets(self):
        kg = chain_kg(5)
        ranks = [RankResult((0, 0, 1), 1.0, True), RankResult((0, 0, 2), 2.0, True),
                 RankResult((1, 0, 3), 4.0, True), RankResult((3, 0, 0), 3.0, True)]
        rows = per_hop_report(ranks, kg)
        assert [(h, c) for h, c, _ in rows] == [(1, 1), (2, 2), (3, 1)]
        assert rows[1][2] == pytest.approx((0.5 + 0.25) / 2)

    def test_single_bucket(self):
        ranks = [RankResult((0, 0, 1), 1.0, True), RankResult((1, 0, 2), 1.0, True)]
        assert len(per_hop_report(ranks, chain_kg(3))) == 1

    def test_curves_and_summary(self):
        paths = [P([0], [0, 1], [0, 1, 2]), P([0], [0, 2], [0, 2, 3])]
        q = np.array([[0, 0, 2], [0, 1, 9]])
        rows = curves(paths, q, 10)
        assert rows[0] == (1, pytest.approx(0.2), 0.0)
        assert rows[1] == (2, pytest.approx(0.3), pytest.approx(1 / 6))
        s = summarize(paths, q, 10)
        assert s["reach"] == 0.5 and s["pairs"] == 1
        assert s["overlap"] == pytest.approx((1 + 2) / (3 + 4))


class TestExport:
    def test_json_roundtrip(self, tmp_path):
        p = P([3], [3, 4], [1, 3, 4])
        export_path(p, [3, 0, 1], "json", tmp_path / "p.json")
        back, q = load_path(tmp_path / "p.json")
        assert back == p and q == [3, 0, 1]
        data = json.loads((tmp_path / "p.json").read_text())
        assert data["steps"][2] == {"level": 2, "entities": [1, 3, 4], "newly_sampled": [1]}

    def test_trivial_path(self, tmp_path):
        export_path(P([3]), [3, 0, 3], "dot", tmp_path / "p.dot")
        text = (tmp_path / "p.dot").read_text()
        assert text.count("label=") == 1 and "doublecircle" in text

    def test_dot_marks_steps_query_and_answer(self):
        text = path_to_dot(P([3], [3, 4], [1, 3, 4]), [3, 0, 1], names=["a", "b", "c", "d", "e"])
        assert 'label="b"' in text and "shape=box" in text
        assert 'step="2"' in text and text.startswith("digraph")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ContractError):
            export_path(P([0]), [0, 0, 0], "png", tmp_path / "x")

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            export_path(P([0]), [0, 0, 0], "json", tmp_path / "missing" / "p.json")
