import numpy as np
import pytest

from adaprop import autodiff as ad
from adaprop.errors import ContractError, DimensionError
from adaprop.propagation import (ModelConfig, ModelParams, PropagationPath, Selector, attention,
                                 init_frontier, message, propagate, run_fixed_path,
                                 run_fixed_paths, score)
from adaprop.synthetic import random_kg
from adaprop.trainer import batch_loss

from gradcheck import check_values
from oracles import forward_on_path, hop_ball

OPS = ["add", "mul", "rotate"]
AGGS = ["sum", "mean", "max"]


def model(n_rel=3, **kw):
    kw.setdefault("d", 8)
    kw.setdefault("L", 3)
    return ModelParams(ModelConfig(n_rel, **kw), seed=5)


class TestConfig:
    def test_odd_width_rejected(self):
        with pytest.raises(DimensionError):
            ModelConfig(2, d=7)

    @pytest.mark.parametrize("bad", [dict(mess_op="sub"), dict(agg="median"), dict(act="gelu"),
                                     dict(h0="ones")])
    def test_unknown_choices(self, bad):
        with pytest.raises(ContractError):
            ModelConfig(2, **bad)

    def test_symbol_aliases_and_h0_auto(self):
        assert ModelConfig(2, mess_op="*").mess_op == "mul"
        assert ModelConfig(2, mess_op="+").h0 == "zero"
        assert ModelConfig(2, mess_op="∘").h0 == "query"

    def test_parameter_shapes(self):
        p = model(n_rel=4, d=6, L=2, attn_dim=5)
        assert p["rel_emb.2"].shape == (9, 6)
        assert p["attn_W.1"].shape == (5, 18)
        assert p["query_rel"].shape == (8, 6)
        assert p["sampler_b.1"].shape == ()

    def test_state_dict_roundtrip_and_mismatch(self):
        p, q = model(), model()
        for v in q.values():
            v.data = v.data + 1.0
        q.load_state_dict(p.state_dict())
        for k in p.tensors:
            np.testing.assert_array_equal(p[k].data, q[k].data)
        bad = p.state_dict()
        bad["score_w"] = np.zeros(3)
        with pytest.raises(DimensionError):
            q.load_state_dict(bad)
        bad = p.state_dict()
        del bad["score_b"]
        with pytest.raises(ContractError):
            q.load_state_dict(bad)


class TestPrimitives:
    def test_message_ops(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, -1.0])
        np.testing.assert_array_equal(message("add", a, b).data, [4, 1])
        np.testing.assert_array_equal(message("mul", a, b).data, [3, -2])
        np.testing.assert_allclose(message("rotate", a, b).data, [5, 5])

    def test_attention_in_unit_interval(self, rng):
        d = 4
        a = attention(rng.normal(size=d), rng.normal(size=d), rng.normal(size=d),
                      rng.normal(size=(3, 3 * d)), rng.normal(size=3))
        assert 0 < float(a.data) < 1

    def test_attention_dimension_check(self, rng):
        with pytest.raises(DimensionError):
            attention(np.ones(3), np.ones(4), np.ones(4), np.ones((2, 12)), np.ones(2))

    def test_score_in_unit_interval(self, rng):
        p = model()
        s = score(ad.Value(rng.normal(size=(5, 8)) * 100), p)
        assert np.all((s.data >= 0) & (s.data <= 1))

    def test_h0_query_rows(self):
        p = model(mess_op="mul")
        f = init_frontier(np.array([[2, 4, 0]]), p)
        np.testing.assert_array_equal(f.reps.data[0], p["query_rel"].data[4])
        f0 = init_frontier(np.array([[2, 4, 0]]), model())
        assert not f0.reps.data.any()


class TestForwardAgainstOracle:
    @pytest.mark.parametrize("op", OPS)
    @pytest.mark.parametrize("agg", AGGS)
    def test_progressive(self, op, agg, toy_kg):
        p = model(mess_op=op, agg=agg, act="tanh")
        queries = np.array([[0, 1, 4], [5, 3, 2], [0, 2, 7]])
        res = propagate(queries, toy_kg, p, Selector())
        for b, q in enumerate(queries):
            steps = hop_ball(toy_kg, q[0], 3)
            expect = forward_on_path(toy_kg, p, q, steps)
            got = res.scores_of(b)
            assert set(got) == set(expect)
            np.testing.assert_allclose([got[e] for e in sorted(got)],
                                       [expect[e] for e in sorted(expect)], rtol=1e-12, atol=1e-12)

    def test_arbitrary_fixed_path(self, toy_kg):
        p = model(agg="mean")
        q = np.array([3, 0, 1])
        ball = hop_ball(toy_kg, 3, 3)
        steps = [ball[0], ball[1][::2], ball[2][::3], ball[3][1::2]]
        path = PropagationPath(steps)
        got = run_fixed_path(q, path, toy_kg, p)
        expect = forward_on_path(toy_kg, p, q, path.steps)
        for e in expect:
            assert got[e] == pytest.approx(expect[e], rel=1e-12, abs=1e-12)

    def test_progressive_paths_are_hop_balls(self, toy_kg):
        res = propagate(np.array([[4, 0, 1]]), toy_kg, model(), Selector())
        for got, want in zip(res.paths()[0].steps, hop_ball(toy_kg, 4, 3)):
            np.testing.assert_array_equal(got, want)

    def test_batch_equals_single(self, toy_kg):
        p = model()
        qs = np.array([[1, 0, 2], [6, 4, 3]])
        both = propagate(qs, toy_kg, p, Selector())
        for b in range(2):
            one = propagate(qs[b:b + 1], toy_kg, p, Selector()).scores_of(0)
            two = both.scores_of(b)
            assert one.keys() == two.keys()
            for e in one:
                assert one[e] == pytest.approx(two[e], rel=1e-12)

    def test_fixed_path_contracts(self, toy_kg):
        p = model()
        with pytest.raises(ContractError):
            run_fixed_paths(np.array([[0, 0, 1]]), [PropagationPath([[1], [1, 2]])], toy_kg, p)
        with pytest.raises(ContractError):
            run_fixed_paths(np.array([[0, 0, 1]]), [], toy_kg, p)

    def test_depth_beyond_model(self, toy_kg):
        with pytest.raises(ContractError):
            propagate(np.array([[0, 0, 1]]), toy_kg, model(L=2), Selector(), L=3)


class TestGradients:
    @pytest.mark.parametrize("op", OPS)
    @pytest.mark.parametrize("agg", AGGS)
    def test_full_forward_finite_difference(self, op, agg):
        kg = random_kg(12, 3, 30, np.random.default_rng(0))
        p = model(mess_op=op, agg=agg, act="tanh")
        q = np.array([[0, 1, 5], [3, 4, 7]])

        def build():
            return batch_loss(propagate(q, kg, p, Selector()))[0]

        used = [v for k, v in p.tensors.items() if not k.startswith("sampler")]
        assert check_values(build, used, h=1e-5) < 1e-4


class TestPropagationPath:
    def test_sampled_derived_from_steps(self):
        p = PropagationPath([[0], [0, 2], [0, 1, 2]])
        assert [s.tolist() for s in p.sampled] == [[0], [2], [1]]
        assert p.first_step() == {0: 0, 2: 1, 1: 2}
        assert p.involved().tolist() == [0, 1, 2]
        assert p.truncate(1) == PropagationPath([[0], [0, 2]])
