import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaprop import autodiff as ad
from adaprop.errors import ContractError
from adaprop.kg_store import KnowledgeGraph
from adaprop.propagation import ModelConfig, ModelParams
from adaprop.sampler import (IncrementalSampler, SamplerParams, adaprop_batch, adaprop_forward,
                             candidates, gumbel_topk, plackett_luce_logp, query_streams,
                             segment_topk, straight_through)
from adaprop.synthetic import random_kg, star_kg
from adaprop.trainer import batch_loss

from gradcheck import check_values, numeric_grad, rel_error
from oracles import hop_ball, plackett_luce_pair_probs


def params(n_rel, d=8, L=3, seed=0):
    return ModelParams(ModelConfig(n_rel, d=d, L=L), seed=seed)


class TestSamplerParams:
    def test_rejects_bad_tau_and_budget(self):
        with pytest.raises(ContractError):
            SamplerParams(K=3, tau=0.0)
        with pytest.raises(ContractError):
            SamplerParams(K=0)
        SamplerParams(K=None)


class TestCandidates:
    def test_set_difference(self):
        assert candidates([1, 3], [3, 4, 1, 7]).tolist() == [4, 7]

    def test_empty(self):
        assert candidates([1, 2], [2, 1]).size == 0


class TestGumbelTopK:
    def test_budget_covers_all(self, rng):
        r = gumbel_topk({5: 0.1, 2: -3.0, 9: 1.0}, K=5, tau=1.0, rng=rng)
        assert r.selected.tolist() == [2, 5, 9]
        assert r.p.sum() == pytest.approx(1.0)

    def test_empty_candidates(self, rng):
        assert gumbel_topk({}, 2, 1.0, rng).selected.size == 0

    def test_greedy_is_top_k_with_id_tiebreak(self):
        r = gumbel_topk({4: 1.0, 1: 1.0, 3: 2.0, 0: -1.0}, K=2, tau=0.5, rng=None)
        assert r.order.tolist() == [3, 1]

    def test_non_finite_logits(self, rng):
        with pytest.raises(ContractError):
            gumbel_topk({0: np.nan, 1: 0.0}, 1, 1.0, rng)

    def test_equal_logits_fair_coin(self):
        rng = np.random.default_rng(0)
        hits = sum(gumbel_topk({0: 0.0, 1: 0.0}, 1, 1.0, rng).selected[0] == 0
                   for _ in range(20000))
        assert abs(hits / 20000 - 0.5) < 0.02

    def test_ordered_pairs_follow_plackett_luce(self):
        g, tau = np.array([1.0, 0.0, -0.5]), 0.7
        p = np.exp(g / tau) / np.exp(g / tau).sum()
        exact = plackett_luce_pair_probs(p)
        rng = np.random.default_rng(3)
        n = 20000
        counts = dict.fromkeys(exact, 0)
        logits = dict(enumerate(g))
        for _ in range(n):
            o = gumbel_topk(logits, 2, tau, rng).order
            counts[(int(o[0]), int(o[1]))] += 1
        tv = 0.5 * sum(abs(counts[k] / n - exact[k]) for k in exact)
        assert tv < 0.03

    def test_temperature_sharpens(self):
        rng = np.random.default_rng(1)
        logits = {0: 1.0, 1: 0.0}
        cold = np.mean([gumbel_topk(logits, 1, 0.1, rng).selected[0] == 0 for _ in range(2000)])
        hot = np.mean([gumbel_topk(logits, 1, 10.0, rng).selected[0] == 0 for _ in range(2000)])
        assert cold > 0.99 and 0.45 < hot < 0.6

    def test_segment_topk_per_segment(self):
        seg = np.array([0, 0, 0, 1, 1])
        keys = np.array([0.1, 0.9, 0.5, 2.0, 3.0])
        chosen = segment_topk(seg, np.arange(5), keys, 2)
        assert chosen.tolist() == [1, 2, 4, 3]


class TestStraightThrough:
    def test_forward_identity(self, rng):
        rep = rng.normal(size=(4, 3))
        out = straight_through(rep, rng.uniform(size=4))
        assert np.array_equal(out.data, rep)
        vec = rng.normal(size=5)
        assert np.array_equal(straight_through(vec, 0.3).data, vec)

    def test_gradient_matches_softmax_surrogate(self, rng):
        g = ad.parameter(rng.normal(size=4))
        rep = rng.normal(size=(4, 3))
        w = rng.normal(size=3)
        sel = np.array([0, 2])

        def build():
            p = ad.gather(ad.segment_softmax(g, np.zeros(4, np.int64), 1), sel)
            return ad.sum_all(ad.mul(straight_through(rep[sel], p), ad.Value(w)))

        with ad.Tape() as tape:
            loss = build()
        tape.backward(loss)

        def surrogate():
            e = np.exp(g.data - g.data.max())
            p = e / e.sum()
            return float(np.sum(p[sel] * (rep[sel] @ w)))

        assert rel_error(g.grad, numeric_grad(surrogate, g.data)) < 1e-6


class TestPlackettLuce:
    def test_matches_explicit_formula(self):
        z = ad.Value(np.array([0.3, -1.0, 2.0, 0.0, 1.0]))
        seg = np.array([0, 0, 0, 1, 1])
        chosen = np.array([2, 0, 4])
        lp = plackett_luce_logp(z, seg, chosen, 2).data
        e = np.exp(z.data)
        first = np.log(e[2] / e[:3].sum()) + np.log(e[0] / (e[0] + e[1]))
        second = np.log(e[4] / (e[3] + e[4]))
        np.testing.assert_allclose(lp, [first, second], rtol=1e-12)

    def test_probabilities_sum_to_one(self):
        z = np.array([0.5, -0.2, 1.1, 0.0])
        total = 0.0
        for perm in itertools.permutations(range(4), 2):
            total += np.exp(plackett_luce_logp(ad.Value(z), np.zeros(4, np.int64),
                                               np.array(perm), 1).data[0])
        assert total == pytest.approx(1.0)

    def test_gradient(self, rng):
        z = ad.parameter(rng.normal(size=6))
        seg = np.array([0, 0, 0, 0, 1, 1])
        chosen = np.array([3, 1, 5])
        err = check_values(lambda: ad.sum_all(plackett_luce_logp(z, seg, chosen, 2)), [z])
        assert err < 1e-6


class TestAdaPropForward:
    def test_unbounded_budget_is_hop_ball(self, toy_kg):
        _, path = adaprop_forward([2, 1, 3], toy_kg, params(toy_kg.n_rel), 3, None,
                                  np.random.default_rng(0))
        for got, want in zip(path.steps, hop_ball(toy_kg, 2, 3)):
            np.testing.assert_array_equal(got, want)

    def test_star_budget(self):
        kg = star_kg(5)
        _, path = adaprop_forward([0, 0, 3], kg, params(1, L=1), 1, 2, np.random.default_rng(0))
        assert len(path.steps[1]) == 3 and 0 in path.steps[1]

    def test_isolated_entity(self):
        kg = KnowledgeGraph(np.array([[0, 0, 1]]), 3, 1)
        scores, path = adaprop_forward([2, 0, 0], kg, params(1, L=2), 2, 2,
                                       np.random.default_rng(0))
        assert [s.tolist() for s in path.steps] == [[2], [2], [2]]
        assert list(scores) == [2]

    def test_seed_determinism(self, toy_kg):
        p = params(toy_kg.n_rel)
        runs = [adaprop_forward([0, 2, 5], toy_kg, p, 3, 2, np.random.default_rng(11))
                for _ in range(2)]
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_batch_composition_does_not_change_samples(self, toy_kg):
        p = params(toy_kg.n_rel)
        qs = np.array([[0, 2, 5], [4, 1, 3], [9, 0, 1]])
        both = adaprop_batch(qs, toy_kg, p, 2, 1.0, query_streams(3, [10, 11, 12]))
        one = adaprop_batch(qs[1:2], toy_kg, p, 2, 1.0, query_streams(3, [11]))
        assert both.paths()[1] == one.paths()[0]

    def test_st_gradient_reaches_sampler(self, toy_kg):
        p = params(toy_kg.n_rel)
        q = np.array([[0, 2, 5], [4, 1, 3]])
        with ad.Tape() as tape:
            loss = batch_loss(adaprop_batch(q, toy_kg, p, 2, 1.0, query_streams(0, [0, 1])))[0]
        tape.backward(loss)
        assert any(np.any(p[f"sampler_u.{l}"].grad) for l in range(1, 4)
                   if p[f"sampler_u.{l}"].grad is not None)

    def test_reinforce_records_logp(self, toy_kg):
        p = params(toy_kg.n_rel)
        res = adaprop_batch(np.array([[0, 2, 5]]), toy_kg, p, 2, 1.0, query_streams(0, [0]),
                            estimator="reinforce")
        assert res.logp is not None and res.logp.data[0] < 0

    def test_unknown_estimator(self):
        with pytest.raises(ContractError):
            IncrementalSampler(2, 1.0, estimator="gumbel")


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(1, 4), L=st.integers(1, 4))
def test_nesting_and_budget(seed, K, L):
    r = np.random.default_rng(seed)
    kg = random_kg(int(r.integers(2, 25)), 2, int(r.integers(1, 60)), r)
    p = params(kg.n_rel, d=4, L=L, seed=seed)
    e_q = int(r.integers(kg.n))
    _, path = adaprop_forward([e_q, 0, 0], kg, p, L, K, r)
    ball = hop_ball(kg, e_q, L)
    for l in range(1, L + 1):
        assert set(path.steps[l - 1]) <= set(path.steps[l])
        assert set(path.steps[l]) <= set(ball[l])
    assert len(path.final) <= 1 + L * K
