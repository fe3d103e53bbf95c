"""Learned incremental sampling of the propagation path.

At every step the entities newly reached by message passing become
candidates; ``K`` of them are drawn without replacement from
``softmax(g(h; theta) / tau)`` with the Gumbel top-k trick and added to the
entities already kept. Gradients reach ``theta`` through a straight-through
multiplier on the sampled entities' representations, or through the
Plackett-Luce log-probability of the sample when training with REINFORCE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .kg_store import KnowledgeGraph
from .propagation import (ForwardResult, Frontier, LayerOutput, ModelParams, Selector,
                          next_frontier, propagate, sampler_logits)

_TINY = np.finfo(np.float64).tiny


@dataclass
class SamplerParams:
    """Budget and temperature; ``theta`` itself lives in :class:`ModelParams`."""

    K: int | None = 100
    tau: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("temperature tau must be positive")
        if self.K is not None and self.K < 1:
            raise ContractError("budget K must be at least 1")


@dataclass
class SampleResult:
    """Sorted selected ids, their probabilities, the draw order and the
    perturbed keys ``G`` of every candidate (sorted by id)."""

    selected: np.ndarray
    p: np.ndarray
    order: np.ndarray
    trace: np.ndarray


def candidates(v_prev, v_neib) -> np.ndarray:
    """Newly reached entities: ``V_neib`` minus the entities already kept."""
    return np.setdiff1d(np.asarray(v_neib, dtype=np.int64), np.asarray(v_prev, dtype=np.int64))


def query_streams(seed: int, query_ids, tag: int = 0) -> list[np.random.Generator]:
    """One independent generator per query, keyed by ``(seed, tag, query id)``."""
    return [np.random.default_rng([seed, tag, int(q)]) for q in query_ids]


def draw_gumbel(seg: np.ndarray, streams) -> np.ndarray:
    """Standard Gumbel noise for rows grouped by sorted segment ``seg``.

    Each segment draws from its own stream, in row order, so the noise of
    one query never depends on the rest of the batch.
    """
    noise = np.zeros(len(seg))
    if streams is None or len(seg) == 0:
        return noise
    uniq, starts, counts = np.unique(seg, return_index=True, return_counts=True)
    for b, s, c in zip(uniq.tolist(), starts.tolist(), counts.tolist()):
        noise[s:s + c] = streams[b].gumbel(size=c)
    return noise


def segment_topk(seg: np.ndarray, tiebreak: np.ndarray, keys: np.ndarray, K: int | None):
    """Top-``K`` rows by ``keys`` within each segment, ties to lower ``tiebreak``.

    Returns the chosen rows in selection order (segment, then rank).
    """
    order = np.lexsort((tiebreak, -keys, seg))
    if K is None:
        return order
    s = seg[order]
    first = np.searchsorted(s, s, side="left")
    rank = np.arange(len(s)) - first
    return order[rank < K]


def gumbel_topk(logits: dict, K: int, tau: float, rng: np.random.Generator | None) -> SampleResult:
    """Sample ``min(K, n)`` entities without replacement from ``softmax(g / tau)``.

    ``logits`` maps entity id to ``g``. With ``rng=None`` the top-K of
    ``g / tau`` is taken (greedy mode).
    """
    SamplerParams(K, tau)
    if not logits:
        empty = np.empty(0, np.int64)
        return SampleResult(empty, np.empty(0), empty, np.empty(0))
    ent = np.array(sorted(logits), dtype=np.int64)
    g = np.array([logits[e] for e in ent.tolist()], dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ContractError("logits must be finite")
    z = g / tau
    seg = np.zeros(len(ent), dtype=np.int64)
    noise = draw_gumbel(seg, None if rng is None else [rng])
    keys = z + noise
    chosen = segment_topk(seg, ent, keys, K)
    p = np.exp(z - z.max())
    p /= p.sum()
    sel = np.sort(chosen)
    return SampleResult(ent[sel], p[sel], ent[chosen], keys)


def straight_through(rep, p) -> ad.Value:
    """``(1 - no_grad(p) + p) * rep`` for one vector or a batch of rows."""
    rep, p = ad.constant(rep), ad.constant(p)
    if rep.data.ndim == 1:
        out = ad.straight_through(ad.reshape(rep, (1, -1)), ad.reshape(p, (1,)))
        return ad.reshape(out, rep.shape)
    return ad.straight_through(rep, p)


def plackett_luce_logp(z: ad.Value, seg: np.ndarray, chosen: np.ndarray, B: int) -> ad.Value:
    """Log-probability per segment of drawing ``chosen`` rows in that order.

    ``z`` are the tempered logits of all candidate rows, ``seg`` their sorted
    segment ids and ``chosen`` the selected rows in draw order.
    """
    shift = np.zeros(B)
    _, starts = np.unique(seg, return_index=True)
    if len(seg):
        shift[seg[starts]] = np.maximum.reduceat(z.data, starts)
    ez = ad.exp(ad.sub(z, ad.Value(shift[seg])))
    total = ad.segment_reduce(ez, seg, B, "sum")
    cseg = seg[chosen]
    ez_sel = ad.gather(ez, chosen)
    used = ad.segment_cumsum(ez_sel, cseg, B, exclusive=True)
    remaining = ad.clamp(ad.sub(ad.gather(total, cseg), used), lo=1e-300)
    terms = ad.sub(ad.sub(ad.gather(z, chosen), ad.Value(shift[cseg])), ad.log(remaining))
    return ad.segment_reduce(terms, cseg, B, "sum")


class GumbelSampler:
    """Shared machinery for samplers drawing top-K rows from ``g / tau``."""

    def __init__(self, K, tau, streams=None, learned=True, estimator="st"):
        SamplerParams(K, tau)
        if estimator not in ("st", "reinforce"):
            raise ContractError(f"unknown estimator {estimator!r}")
        self.K, self.tau = K, tau
        self.streams = streams
        self.learned = learned
        self.estimator = estimator
        self.logp = None

    def draw(self, params, l, out: LayerOutput, rows, seg, n_seg, B, seg_query=None,
             base_logits=None):
        """Choose up to ``K`` of ``rows`` in each segment of sorted ``seg``.

        ``seg_query`` maps segments to queries (identity by default); it
        picks the noise stream and sums log-probabilities per query.
        Returns positions into ``rows`` in draw order and the softmax over
        all of ``rows`` (``None`` when there is nothing to choose from).
        """
        if len(rows) == 0:
            return rows, None
        seg_query = np.arange(n_seg) if seg_query is None else seg_query
        tiebreak = out.entity[rows]
        if self.learned:
            g = ad.gather(sampler_logits(params, l, out.reps), rows)
            z = ad.scale(g, 1.0 / self.tau)
        else:
            z = ad.Value(np.zeros(len(rows)) if base_logits is None else base_logits)
        keys = z.data + draw_gumbel(seg_query[seg], self.streams)
        chosen = segment_topk(seg, tiebreak, keys, self.K)
        p_all = ad.segment_softmax(z, seg, n_seg)
        if self.learned and self.estimator == "reinforce":
            lp = plackett_luce_logp(z, seg, chosen, n_seg)
            if n_seg != B or not np.array_equal(seg_query, np.arange(B)):
                lp = ad.segment_reduce(lp, seg_query, B, "sum")
            self.logp = lp if self.logp is None else ad.add(self.logp, lp)
        return chosen, p_all

    def st_args(self, rows, chosen, p_all):
        """Rows and probabilities that go through the straight-through multiplier."""
        if not self.learned or self.estimator != "st" or p_all is None:
            return None, None
        sel_rows = rows[chosen]
        p = ad.clamp(ad.gather(p_all, chosen), lo=_TINY)
        return sel_rows, p


class IncrementalSampler(GumbelSampler, Selector):
    """Keeps ``V^{l-1}`` and adds up to ``K`` sampled candidates per query."""

    def select(self, l, frontier: Frontier, out: LayerOutput, params: ModelParams,
               kg: KnowledgeGraph) -> Frontier:
        is_prev = np.zeros(len(out.batch), dtype=bool)
        is_prev[out.prev_rows[out.prev_rows >= 0]] = True
        cand = np.flatnonzero(~is_prev)
        seg = out.batch[cand]
        B = len(frontier.queries)
        chosen, p_all = self.draw(params, l, out, cand, seg, B, B)
        probs = np.full(len(out.batch), np.nan)
        if p_all is not None:
            probs[cand[chosen]] = p_all.data[chosen]
        keep = np.sort(np.concatenate([np.flatnonzero(is_prev), cand[chosen]]))
        st_rows, st_p = self.st_args(cand, chosen, p_all)
        return next_frontier(out, frontier, l, keep, st_rows, st_p, probs)


def adaprop_batch(queries, kg: KnowledgeGraph, params: ModelParams, K: int | None, tau: float,
                  streams=None, L: int | None = None, estimator: str = "st",
                  learned: bool = True, blocked=None) -> ForwardResult:
    """Propagate a batch along learned incremental paths and score ``V^L``.

    ``streams`` holds one generator per query; ``None`` takes the
    deterministic top-K of ``g / tau``. ``K=None`` disables sampling.
    """
    sampler = IncrementalSampler(K, tau, streams, learned=learned, estimator=estimator)
    return propagate(queries, kg, params, sampler, L=L, blocked=blocked)


def adaprop_forward(query, kg: KnowledgeGraph, params: ModelParams, L: int | None, K: int | None,
                    rng: np.random.Generator | None, tau: float = 1.0, learned: bool = True):
    """Single-query convenience form: ``(scores over V^L, path)``."""
    res = adaprop_batch(query, kg, params, K, tau, None if rng is None else [rng], L=L,
                        learned=learned)
    return res.scores_of(0), res.paths()[0]
