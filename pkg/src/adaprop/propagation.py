"""Query-conditioned message propagation over a propagation path.

All routines are batched over queries. A row of a frontier is a
``(query index, entity)`` pair; rows are kept sorted by that pair, so a
single query is simply a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError
from .kg_store import KnowledgeGraph

MESS_OPS = {"add": "add", "+": "add", "mul": "mul", "*": "mul",
            "rotate": "rotate", "o": "rotate", "∘": "rotate", "circ": "rotate"}
AGG_OPS = ("sum", "mean", "max")
ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass
class ModelConfig:
    n_rel: int
    d: int = 64
    L: int = 5
    mess_op: str = "add"
    agg: str = "sum"
    act: str = "relu"
    attn_dim: int = 0
    h0: str = "auto"

    def __post_init__(self):
        self.mess_op = MESS_OPS.get(self.mess_op, self.mess_op)
        if self.mess_op not in ("add", "mul", "rotate"):
            raise ContractError(f"unknown message op {self.mess_op!r}")
        if self.agg not in AGG_OPS:
            raise ContractError(f"unknown aggregation {self.agg!r}")
        if self.act not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.act!r}")
        if self.d <= 0 or self.d % 2:
            raise DimensionError("representation width d must be positive and even")
        if self.attn_dim <= 0:
            self.attn_dim = self.d
        if self.h0 == "auto":
            # a zero start state is annihilated by * and rotate
            self.h0 = "zero" if self.mess_op == "add" else "query"
        if self.h0 not in ("zero", "query"):
            raise ContractError(f"unknown h0 {self.h0!r}")


class ModelParams:
    """All learnable tensors, keyed by name.

    Per layer ``l`` (1-based): ``rel_emb.l`` (2R+1, d), ``attn_W.l``
    (attn_dim, 3d), ``attn_w.l`` (attn_dim,), ``sampler_u.l`` (d,) and
    ``sampler_b.l`` (). Shared: ``query_rel`` (2R, d), ``score_w`` (d,) and
    ``score_b`` ().
    """

    def __init__(self, config: ModelConfig, seed: int = 0, zero: bool = False):
        self.config = config
        rng = np.random.default_rng([seed, 0xA11CE])
        d, a, n_aug = config.d, config.attn_dim, 2 * config.n_rel + 1

        def init(shape, fan_in, fan_out):
            if zero:
                return np.zeros(shape)
            return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)

        t = {}
        for l in range(1, config.L + 1):
            t[f"rel_emb.{l}"] = init((n_aug, d), d, d)
            t[f"attn_W.{l}"] = init((a, 3 * d), 3 * d, a)
            t[f"attn_w.{l}"] = init((a,), a, 1)
            t[f"sampler_u.{l}"] = init((d,), d, 1)
            t[f"sampler_b.{l}"] = np.zeros(())
        t["query_rel"] = init((2 * config.n_rel, d), d, d)
        t["score_w"] = init((d,), d, 1)
        t["score_b"] = np.zeros(())
        self.tensors = {k: ad.parameter(v, name=k) for k, v in t.items()}

    def __getitem__(self, name) -> ad.Value:
        return self.tensors[name]

    def values(self) -> list[ad.Value]:
        return list(self.tensors.values())

    def layer(self, l: int, name: str) -> ad.Value:
        return self.tensors[f"{name}.{l}"]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.tensors) - set(state)
        extra = set(state) - set(self.tensors)
        if missing or extra:
            raise ContractError(f"parameter mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for k, v in self.tensors.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise DimensionError(f"{k}: expected shape {v.shape}, got {arr.shape}")
            v.data = arr.copy()

    def zero_grad(self):
        for v in self.tensors.values():
            v.grad = None


@dataclass
class PropagationPath:
    """Per-step entity sets ``V^0..V^L`` of one query with provenance."""

    steps: list[np.ndarray]
    sampled: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.steps = [np.unique(np.asarray(s, dtype=np.int64)) for s in self.steps]
        if not self.sampled:
            prev = np.empty(0, dtype=np.int64)
            for s in self.steps:
                self.sampled.append(np.setdiff1d(s, prev))
                prev = s
        self.sampled = [np.unique(np.asarray(s, dtype=np.int64)) for s in self.sampled]

    @property
    def L(self) -> int:
        return len(self.steps) - 1

    @property
    def final(self) -> np.ndarray:
        return self.steps[-1]

    def involved(self) -> np.ndarray:
        """Union of ``V^1..V^L``."""
        if self.L == 0:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(self.steps[1:]))

    def truncate(self, l: int) -> PropagationPath:
        return PropagationPath(self.steps[: l + 1], self.sampled[: l + 1])

    def first_step(self) -> dict[int, int]:
        out = {}
        for l, s in enumerate(self.sampled):
            for e in s.tolist():
                out.setdefault(e, l)
        return out

    def __eq__(self, other):
        if not isinstance(other, PropagationPath) or len(self.steps) != len(other.steps):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.steps, other.steps)) and all(
            np.array_equal(a, b) for a, b in zip(self.sampled, other.sampled))


@dataclass
class Frontier:
    """Working state after step ``step`` for a batch of queries."""

    step: int
    queries: np.ndarray
    batch: np.ndarray
    entity: np.ndarray
    reps: ad.Value
    first_step: np.ndarray
    probs: np.ndarray

    @property
    def size(self) -> int:
        return len(self.batch)

    def keys(self, n: int) -> np.ndarray:
        return self.batch * n + self.entity

    def entities_of(self, b: int) -> np.ndarray:
        return self.entity[self.batch == b]


@dataclass
class LayerOutput:
    """Representations after one propagation step, rows sorted by (query, entity)."""

    batch: np.ndarray
    entity: np.ndarray
    reps: ad.Value
    prev_rows: np.ndarray
    edge_src: np.ndarray
    edge_tgt: np.ndarray
    edge_rel: np.ndarray


def as_queries(queries) -> np.ndarray:
    q = np.asarray(queries, dtype=np.int64)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] < 2:
        raise ContractError("queries need at least (e_q, r_q)")
    return q


def init_frontier(queries, params: ModelParams, start=None) -> Frontier:
    """``V^0 = {e_q}`` per query (or ``start`` sets) with initial representations.

    With ``h0 = zero`` every start row is the zero vector; with ``h0 = query``
    the query entity's row is its query-relation embedding.
    """
    q = as_queries(queries)
    B, d = len(q), params.config.d
    if start is None:
        batch, entity = np.arange(B, dtype=np.int64), q[:, 0].copy()
    else:
        batch = np.concatenate([np.full(len(s), b, dtype=np.int64) for b, s in enumerate(start)])
        entity = np.concatenate([np.unique(np.asarray(s, dtype=np.int64)) for s in start])
    if params.config.h0 == "query":
        is_q = entity == q[batch, 0]
        rows = np.flatnonzero(is_q)
        table = ad.gather(params["query_rel"], q[batch[rows], 1])
        perm = np.empty(len(batch), dtype=np.int64)
        rest = np.flatnonzero(~is_q)
        perm[rows] = np.arange(len(rows))
        perm[rest] = len(rows) + np.arange(len(rest))
        reps = ad.gather(ad.concat([table, ad.Value(np.zeros((len(rest), d)))]), perm)
    else:
        reps = ad.Value(np.zeros((len(batch), d)))
    return Frontier(0, q, batch, entity, reps, np.zeros(len(batch), dtype=np.int64),
                    np.ones(len(batch)))


def message(op: str, h_src, h_rel) -> ad.Value:
    if op == "add":
        return ad.add(h_src, h_rel)
    if op == "mul":
        return ad.mul(h_src, h_rel)
    return ad.rotate(h_src, h_rel)


def attention(h_es, h_r, h_rq, W, w) -> ad.Value:
    """Edge weight ``sigmoid(w . relu(W . [h_es; h_r; h_rq]))`` for single vectors."""
    for v in (h_es, h_r, h_rq):
        if ad.constant(v).shape != (ad.constant(W).shape[1] // 3,):
            raise DimensionError("attention inputs must be d-vectors matching W")
    x = ad.concat([h_es, h_r, h_rq])
    return ad.sigmoid(ad.matmul(w, ad.relu(ad.matmul(W, x))))


def _edge_attention(params, l, reps, src, rel, edge_batch, rq) -> ad.Value:
    d = params.config.d
    W = params.layer(l, "attn_W")
    proj_src = ad.matmul(reps, _transpose_cols(W, 0, d))
    proj_rel = ad.matmul(params.layer(l, "rel_emb"), _transpose_cols(W, d, 2 * d))
    proj_q = ad.matmul(ad.gather(params["query_rel"], rq), _transpose_cols(W, 2 * d, 3 * d))
    hidden = ad.relu(ad.add(ad.add(ad.gather(proj_src, src), ad.gather(proj_rel, rel)),
                            ad.gather(proj_q, edge_batch)))
    return ad.sigmoid(ad.matmul(hidden, params.layer(l, "attn_w")))


def _transpose_cols(W, start, stop) -> ad.Value:
    """``W[:, start:stop].T``."""
    return ad.transpose(ad.take_cols(W, start, stop))


def propagate_step(frontier: Frontier, kg: KnowledgeGraph, params: ModelParams, l: int,
                   targets: np.ndarray | None = None, blocked: np.ndarray | None = None
                   ) -> LayerOutput:
    """One round of message passing out of ``frontier`` (step ``l``).

    Messages flow along every augmented edge leaving a frontier row. By
    default every reached entity (the neighbor closure) is updated;
    ``targets`` (sorted keys ``query * n + entity``) restricts both the
    edges and the output rows to that set. ``blocked`` masks kg edges.
    """
    cfg = params.config
    n = kg.n
    eids, src = kg.edge_ids(frontier.entity)
    if blocked is not None:
        keep = ~blocked[eids]
        eids, src = eids[keep], src[keep]
    edge_batch = frontier.batch[src]
    obj = kg.obj[eids]
    keys = edge_batch * n + obj
    if targets is None:
        out_keys, tgt = np.unique(keys, return_inverse=True)
    else:
        out_keys = np.asarray(targets, dtype=np.int64)
        pos = np.searchsorted(out_keys, keys)
        hit = (pos < len(out_keys)) & (out_keys[np.minimum(pos, len(out_keys) - 1)] == keys)
        eids, src, edge_batch, tgt = eids[hit], src[hit], edge_batch[hit], pos[hit]
    if len(out_keys) == 0:
        raise ContractError("propagation step has no target entities")
    order = np.argsort(tgt, kind="stable")
    src, tgt, eids, edge_batch = src[order], tgt[order], eids[order], edge_batch[order]
    rel = kg.rel[eids]

    rq = frontier.queries[:, 1]
    alpha = _edge_attention(params, l, frontier.reps, src, rel, edge_batch, rq)
    msg = message(cfg.mess_op, ad.gather(frontier.reps, src), ad.gather(params.layer(l, "rel_emb"), rel))
    msg = ad.mul(msg, ad.reshape(alpha, (-1, 1)))
    agg = ad.segment_reduce(msg, tgt, len(out_keys), cfg.agg)
    reps = ACTIVATIONS[cfg.act](agg)

    out_batch, out_entity = np.divmod(out_keys, n)
    prev_keys = frontier.keys(n)
    pos = np.searchsorted(out_keys, prev_keys)
    found = (pos < len(out_keys)) & (out_keys[np.minimum(pos, len(out_keys) - 1)] == prev_keys)
    prev_rows = np.where(found, pos, -1)
    return LayerOutput(out_batch, out_entity, reps, prev_rows, src, tgt, rel)


def sampler_logits(params: ModelParams, l: int, reps: ad.Value) -> ad.Value:
    """``g(h; theta^l) = u . h + b`` per row."""
    return ad.add(ad.matmul(reps, params.layer(l, "sampler_u")), params.layer(l, "sampler_b"))


def score_logits(reps: ad.Value, params: ModelParams) -> ad.Value:
    """Raw scores ``w_phi . h + b_phi``; monotone in the probability score."""
    return ad.add(ad.matmul(reps, params["score_w"]), params["score_b"])


def score(reps: ad.Value, params: ModelParams) -> ad.Value:
    """Candidate scores in (0, 1)."""
    return ad.sigmoid(score_logits(reps, params))


def next_frontier(out: LayerOutput, frontier: Frontier, l: int, rows: np.ndarray,
                  st_rows: np.ndarray | None = None, st_p: ad.Value | None = None,
                  probs: np.ndarray | None = None) -> Frontier:
    """Keep ``rows`` (sorted indices into ``out``) as the new frontier.

    Rows listed in ``st_rows`` pass through the straight-through multiplier
    with selection probabilities ``st_p``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if st_rows is None or len(st_rows) == 0:
        reps = ad.gather(out.reps, rows)
    else:
        st_rows = np.asarray(st_rows, dtype=np.int64)
        is_st = np.isin(rows, st_rows)
        plain = rows[~is_st]
        # st_rows order defines the order of st_p
        st_pos = {r: i for i, r in enumerate(st_rows.tolist())}
        st_in_rows = rows[is_st]
        st_idx = np.array([st_pos[r] for r in st_in_rows.tolist()], dtype=np.int64)
        st_part = ad.straight_through(ad.gather(out.reps, st_in_rows), ad.gather(st_p, st_idx))
        stacked = ad.concat([ad.gather(out.reps, plain), st_part])
        perm = np.empty(len(rows), dtype=np.int64)
        perm[np.flatnonzero(~is_st)] = np.arange(len(plain))
        perm[np.flatnonzero(is_st)] = len(plain) + np.arange(len(st_in_rows))
        reps = ad.gather(stacked, perm)
    first = np.full(len(out.batch), l, dtype=np.int64)
    prev_p = np.full(len(out.batch), np.nan)
    ok = out.prev_rows >= 0
    first[out.prev_rows[ok]] = frontier.first_step[ok]
    prev_p[out.prev_rows[ok]] = frontier.probs[ok]
    if probs is not None:
        prev_p = np.where(np.isnan(probs), prev_p, probs)
    return Frontier(l, frontier.queries, out.batch[rows], out.entity[rows], reps,
                    first[rows], prev_p[rows])


class Selector:
    """Decides the entity set of each step. The default keeps every reached
    entity, which is progressive propagation."""

    def targets(self, l: int, frontier: Frontier, kg: KnowledgeGraph):
        return None

    def select(self, l: int, frontier: Frontier, out: LayerOutput, params: ModelParams,
               kg: KnowledgeGraph) -> Frontier:
        return next_frontier(out, frontier, l, np.arange(len(out.batch)))


@dataclass
class ForwardResult:
    """Final-step rows with raw scores and the realized paths."""

    queries: np.ndarray
    batch: np.ndarray
    entity: np.ndarray
    logits: ad.Value
    frontiers: list
    logp: ad.Value | None = None

    def paths(self) -> list[PropagationPath]:
        out = []
        for b in range(len(self.queries)):
            steps = [f.entities_of(b) for f in self.frontiers]
            sampled = []
            for l, f in enumerate(self.frontiers):
                sampled.append(f.entity[(f.batch == b) & (f.first_step == l)])
            out.append(PropagationPath(steps, sampled))
        return out

    def scores_of(self, b: int) -> dict[int, float]:
        m = self.batch == b
        return dict(zip(self.entity[m].tolist(), self.logits.data[m].tolist()))


def propagate(queries, kg: KnowledgeGraph, params: ModelParams, selector: Selector,
              L: int | None = None, blocked=None, start=None) -> ForwardResult:
    """Run ``L`` steps, letting ``selector`` shape the path, and score ``V^L``."""
    L = params.config.L if L is None else L
    if L > params.config.L:
        raise ContractError(f"model has {params.config.L} layers, asked for {L}")
    frontier = init_frontier(queries, params, start)
    frontiers = [frontier]
    for l in range(1, L + 1):
        targets = selector.targets(l, frontier, kg)
        out = propagate_step(frontier, kg, params, l, targets=targets, blocked=blocked)
        frontier = selector.select(l, frontier, out, params, kg)
        frontiers.append(frontier)
    logits = score_logits(frontier.reps, params)
    return ForwardResult(frontier.queries, frontier.batch, frontier.entity, logits, frontiers,
                         getattr(selector, "logp", None))


class FixedPathSelector(Selector):
    """Follows given per-query entity sets, one list of steps per query."""

    def __init__(self, paths: list[PropagationPath]):
        self.paths = paths

    def targets(self, l, frontier, kg):
        keys = [b * kg.n + p.steps[l] for b, p in enumerate(self.paths)]
        for b, p in enumerate(self.paths):
            if len(p.steps[l]) == 0:
                raise ContractError(f"empty entity set at step {l} for query {b}")
        return np.concatenate(keys)

    def select(self, l, frontier, out, params, kg):
        return next_frontier(out, frontier, l, np.arange(len(out.batch)))


def run_fixed_paths(queries, paths: list[PropagationPath], kg: KnowledgeGraph,
                    params: ModelParams, progressive: bool = True, blocked=None) -> ForwardResult:
    q = as_queries(queries)
    if len(paths) != len(q):
        raise ContractError("one path per query required")
    L = {p.L for p in paths}
    if len(L) != 1:
        raise ContractError("all paths must have the same depth")
    for b, p in enumerate(paths):
        if len(p.steps[0]) == 0:
            raise ContractError("empty V^0")
        if progressive and not np.array_equal(p.steps[0], [q[b, 0]]):
            raise ContractError(f"V^0 must be {{e_q}} for progressive propagation (query {b})")
    return propagate(q, kg, params, FixedPathSelector(paths), L=L.pop(), blocked=blocked,
                     start=[p.steps[0] for p in paths])


def run_fixed_path(query, path: PropagationPath, kg: KnowledgeGraph, params: ModelParams,
                   progressive: bool = True) -> dict[int, float]:
    """Scores (raw logits) over ``V^L`` for one query along a given path."""
    res = run_fixed_paths(as_queries(query), [path], kg, params, progressive=progressive)
    return res.scores_of(0)
