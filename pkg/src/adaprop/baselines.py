"""Alternative propagation-path constructors and samplers.

Full and progressive propagation, random-walk subgraphs, node-wise and
layer-wise sampling (unlearned or learned), plus the REINFORCE estimator
used as an alternative to straight-through gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .kg_store import KnowledgeGraph, neighbors
from .propagation import (ForwardResult, ModelParams, PropagationPath, Selector, as_queries,
                          next_frontier, propagate, run_fixed_paths)
from .sampler import GumbelSampler, IncrementalSampler, segment_topk

SCHEMES = ("full", "progressive", "nodewise", "layerwise", "subgraph", "incremental")


@dataclass
class SchemeConfig:
    scheme: str = "incremental"
    learned: bool = True
    K: int | None = 100
    tau: float = 1.0
    num_walks: int = 20
    walk_len: int = 5
    estimator: str = "st"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.scheme == "subgraph" and self.learned:
            raise ContractError("the subgraph scheme has no learned variant; set learned=false")
        if self.scheme in ("full", "progressive"):
            self.learned = False
        if self.num_walks < 1 or self.walk_len < 0:
            raise ContractError("num_walks must be >= 1 and walk_len >= 0")
        if self.estimator not in ("st", "reinforce"):
            raise ContractError(f"unknown estimator {self.estimator!r}")


# ---------------------------------------------------------------- fixed paths

def full_path(kg: KnowledgeGraph, L: int) -> PropagationPath:
    everything = np.arange(kg.n, dtype=np.int64)
    return PropagationPath([everything] * (L + 1))


def progressive_path(kg: KnowledgeGraph, e_q: int, L: int) -> PropagationPath:
    """Hop balls ``{e : hop(e_q, e) <= l}`` for ``l = 0..L``."""
    steps = [np.array([e_q], dtype=np.int64)]
    for _ in range(L):
        steps.append(neighbors(kg, steps[-1])[0])
    return PropagationPath(steps)


def random_walks(kg: KnowledgeGraph, e_q: int, num_walks: int, walk_len: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Entities visited by uniform walks over non-self-loop edges from ``e_q``."""
    visited = {int(e_q)}
    for _ in range(num_walks):
        cur = int(e_q)
        for _ in range(walk_len):
            lo, hi = kg.indptr[cur], kg.indptr[cur + 1]
            out = kg.obj[lo:hi][kg.rel[lo:hi] != kg.self_loop]
            if len(out) == 0:
                break
            cur = int(out[rng.integers(len(out))])
            visited.add(cur)
    return np.array(sorted(visited), dtype=np.int64)


def subgraph_path(kg: KnowledgeGraph, e_q: int, num_walks: int, walk_len: int, L: int,
                  rng: np.random.Generator) -> PropagationPath:
    """Progressive closure from ``e_q`` restricted to the walk-visited set."""
    region = random_walks(kg, e_q, num_walks, walk_len, rng)
    steps = [np.array([e_q], dtype=np.int64)]
    for _ in range(L):
        steps.append(np.intersect1d(neighbors(kg, steps[-1])[0], region))
    return PropagationPath(steps)


# ---------------------------------------------------------- set-level samplers

def _theta_scores(reps, theta, entities, tau):
    u, b = theta
    return np.array([(np.dot(u, reps[e]) + b) / tau for e in entities.tolist()])


def nodewise_sample(kg: KnowledgeGraph, v_prev, K: int, mode: str = "random", reps=None,
                    theta=None, rng: np.random.Generator | None = None,
                    tau: float = 1.0) -> np.ndarray:
    """Union over ``e`` in ``v_prev`` of ``K`` neighbors drawn without replacement.

    ``mode="learned"`` ranks each neighborhood by ``g(h_e) / tau`` plus Gumbel
    noise, where ``reps`` maps entity id to representation and ``theta`` is
    ``(u, b)``.
    """
    v_prev = np.unique(np.asarray(v_prev, dtype=np.int64))
    if len(v_prev) == 0:
        raise ContractError("node-wise sampling needs a nonempty entity set")
    if mode not in ("random", "learned"):
        raise ContractError(f"unknown node-wise mode {mode!r}")
    picked = []
    for e in v_prev.tolist():
        nb = np.unique(kg.obj[kg.indptr[e]:kg.indptr[e + 1]])
        z = _theta_scores(reps, theta, nb, tau) if mode == "learned" else np.zeros(len(nb))
        noise = rng.gumbel(size=len(nb)) if rng is not None else 0.0
        seg = np.zeros(len(nb), dtype=np.int64)
        picked.append(nb[segment_topk(seg, nb, z + noise, K)])
    return np.unique(np.concatenate(picked))


def layerwise_sample(kg: KnowledgeGraph, v_prev, K: int, mode: str = "degree", reps=None,
                     theta=None, rng: np.random.Generator | None = None,
                     tau: float = 1.0) -> np.ndarray:
    """At most ``K`` entities drawn without replacement from the neighbor closure.

    ``degree`` weights entities by augmented degree; ``learned`` uses
    ``softmax(g / tau)``. The previous set is not kept automatically.
    """
    v_prev = np.unique(np.asarray(v_prev, dtype=np.int64))
    if len(v_prev) == 0:
        raise ContractError("layer-wise sampling needs a nonempty entity set")
    nb = neighbors(kg, v_prev)[0]
    if mode == "degree":
        z = np.log(kg.degree()[nb].astype(np.float64))
    elif mode == "learned":
        z = _theta_scores(reps, theta, nb, tau)
    else:
        raise ContractError(f"unknown layer-wise mode {mode!r}")
    noise = rng.gumbel(size=len(nb)) if rng is not None else 0.0
    seg = np.zeros(len(nb), dtype=np.int64)
    return np.sort(nb[segment_topk(seg, nb, z + noise, K)])


# ------------------------------------------------------- batched selectors

class NodewiseSelector(GumbelSampler, Selector):
    """Each frontier row keeps ``K`` of its distinct out-neighbors.

    Representations are computed over the whole neighbor closure and the
    union of the per-node samples is retained. With several parents the
    straight-through probability comes from the first parent.
    """

    def select(self, l, frontier, out, params, kg):
        pair = np.unique(out.edge_src * len(out.batch) + out.edge_tgt)
        parent, child = np.divmod(pair, len(out.batch))
        B = len(frontier.queries)
        chosen, p_all = self.draw(params, l, out, child, parent, frontier.size, B,
                                  seg_query=frontier.batch)
        hit = child[chosen]
        keep, first = np.unique(hit, return_index=True)
        probs = np.full(len(out.batch), np.nan)
        st_rows = st_p = None
        if p_all is not None:
            # ``chosen`` is ordered by parent, so ``first`` picks the lowest parent
            probs[keep] = p_all.data[chosen[first]]
            if self.learned and self.estimator == "st":
                st_rows = keep
                st_p = ad.clamp(ad.gather(p_all, chosen[first]), lo=np.finfo(float).tiny)
        return next_frontier(out, frontier, l, keep, st_rows, st_p, probs)


class LayerwiseSelector(GumbelSampler, Selector):
    """Each query keeps at most ``K`` entities of its neighbor closure."""

    def select(self, l, frontier, out, params, kg):
        rows = np.arange(len(out.batch))
        base = None
        if not self.learned:
            base = np.log(kg.degree()[out.entity].astype(np.float64))
        B = len(frontier.queries)
        chosen, p_all = self.draw(params, l, out, rows, out.batch, B, B, base_logits=base)
        probs = np.full(len(out.batch), np.nan)
        probs[chosen] = p_all.data[chosen]
        st_rows, st_p = self.st_args(rows, chosen, p_all)
        return next_frontier(out, frontier, l, np.sort(chosen), st_rows, st_p, probs)


# ----------------------------------------------------------------- REINFORCE

class EmaBaseline:
    """Exponential moving average of rewards; starts at the first reward."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.value = None

    def get(self) -> float:
        return 0.0 if self.value is None else self.value

    def update(self, reward: float) -> None:
        r = float(reward)
        self.value = r if self.value is None else self.decay * self.value + (1 - self.decay) * r

    def state_dict(self):
        return {"decay": self.decay, "value": self.value}


def reinforce_surrogate(logp: ad.Value, reward, baseline: float) -> ad.Value:
    """Scalar whose gradient is ``-mean((reward - baseline) * grad logp)``.

    Minimising it ascends the expected reward.
    """
    adv = np.asarray(reward, dtype=np.float64) - baseline
    if logp.data.ndim == 0:
        return ad.scale(logp, -float(adv))
    return ad.scale(ad.sum_all(ad.mul(logp, ad.Value(adv))), -1.0 / max(len(adv), 1))


def reinforce_grad(sample_logp_fn, reward: float, baseline: EmaBaseline, params) -> list:
    """REINFORCE gradient ``-(reward - baseline) * grad logp`` for each of ``params``.

    ``sample_logp_fn`` is called on a fresh tape and must return the
    log-probability of the realized sample. The baseline is read first and
    then updated with ``reward``.
    """
    for v in params:
        v.grad = None
    b = baseline.get()
    with ad.Tape() as tape:
        logp = sample_logp_fn()
        surrogate = reinforce_surrogate(logp, reward, b)
    if surrogate.parents or surrogate.requires_grad:
        tape.backward(surrogate)
    baseline.update(reward)
    return [np.zeros_like(v.data) if v.grad is None else v.grad.copy() for v in params]


# ---------------------------------------------------------------- dispatch

def make_selector(cfg: SchemeConfig, streams=None) -> Selector:
    if cfg.scheme == "progressive":
        return Selector()
    if cfg.scheme == "incremental":
        return IncrementalSampler(cfg.K, cfg.tau, streams, cfg.learned, cfg.estimator)
    if cfg.scheme == "nodewise":
        return NodewiseSelector(cfg.K, cfg.tau, streams, cfg.learned, cfg.estimator)
    if cfg.scheme == "layerwise":
        return LayerwiseSelector(cfg.K, cfg.tau, streams, cfg.learned, cfg.estimator)
    raise ContractError(f"scheme {cfg.scheme!r} is path-based, use run_scheme")


def run_scheme(cfg: SchemeConfig, queries, kg: KnowledgeGraph, params: ModelParams,
               streams=None, L: int | None = None, blocked=None) -> ForwardResult:
    """Forward pass of any scheme. ``streams`` has one generator per query."""
    q = as_queries(queries)
    L = params.config.L if L is None else L
    if cfg.scheme == "full":
        return run_fixed_paths(q, [full_path(kg, L)] * len(q), kg, params, progressive=False,
                               blocked=blocked)
    if cfg.scheme == "subgraph":
        if streams is None:
            raise ContractError("the subgraph scheme needs random streams")
        paths = [subgraph_path(kg, int(e), cfg.num_walks, cfg.walk_len, L, streams[b])
                 for b, e in enumerate(q[:, 0])]
        return run_fixed_paths(q, paths, kg, params, blocked=blocked)
    return propagate(q, kg, params, make_selector(cfg, streams), L=L, blocked=blocked)
