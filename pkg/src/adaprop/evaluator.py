"""Filtered ranking and metric aggregation.

Scores are raw logits over the reached set ``V^L``; every other entity
scores ``-inf``. Ties, including the block of unreached entities, count
half: ``rank = 1 + #higher + #equal / 2``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .kg_store import FilterIndex


@dataclass(frozen=True)
class RankResult:
    query: tuple
    filtered_rank: float
    reached: bool


@dataclass(frozen=True)
class MetricsReport:
    mrr: float
    hit1: float
    hit10: float
    count: int
    reach_rate: float

    def as_dict(self) -> dict:
        return asdict(self)

    def to_kv(self, prefix: str = "") -> str:
        """``key=value`` lines with fixed formatting."""
        return "".join(f"{prefix}{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def to_tsv_row(self) -> str:
        return "\t".join(_fmt(v) for v in self.as_dict().values())


TSV_HEADER = "\t".join(MetricsReport.__dataclass_fields__)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def _competitor_mask(query, filter_index: FilterIndex | None, n: int) -> np.ndarray:
    e_q, r_q, e_a = (int(x) for x in query[:3])
    if not 0 <= e_a < n:
        raise ContractError(f"answer entity {e_a} outside [0, {n})")
    mask = np.ones(n, dtype=bool)
    if filter_index is not None:
        mask[filter_index.get(e_q, r_q)] = False
    mask[e_a] = False
    return mask


def rank_query(scores: dict, query, filter_index: FilterIndex | None, n: int) -> RankResult:
    """Filtered rank of ``query[2]`` given scores for the reached entities."""
    mask = _competitor_mask(query, filter_index, n)
    e_a = int(query[2])
    full = np.full(n, -np.inf)
    if scores:
        ids = np.fromiter(scores.keys(), dtype=np.int64, count=len(scores))
        full[ids] = np.fromiter(scores.values(), dtype=np.float64, count=len(scores))
    target = full[e_a]
    comp = full[mask]
    rank = 1.0 + np.count_nonzero(comp > target) + 0.5 * np.count_nonzero(comp == target)
    return RankResult(tuple(int(x) for x in query[:3]), float(rank), e_a in scores)


def rank_batch(queries, batch: np.ndarray, entity: np.ndarray, logits: np.ndarray,
               filter_index: FilterIndex | None, n: int) -> list[RankResult]:
    """Ranks for a batch of queries from flat ``(batch, entity, logit)`` rows.

    Only reached entities are scanned; the unreached block is counted.
    """
    out = []
    order = np.argsort(batch, kind="stable")
    batch, entity, logits = batch[order], entity[order], logits[order]
    bounds = np.searchsorted(batch, np.arange(len(queries) + 1))
    for b, q in enumerate(np.asarray(queries)):
        e_q, r_q, e_a = (int(x) for x in q[:3])
        if not 0 <= e_a < n:
            raise ContractError(f"answer entity {e_a} outside [0, {n})")
        ent = entity[bounds[b]:bounds[b + 1]]
        sc = logits[bounds[b]:bounds[b + 1]]
        filt = filter_index.get(e_q, r_q) if filter_index is not None else np.empty(0, np.int64)
        filt = filt[filt != e_a]
        keep = ~np.isin(ent, filt) & (ent != e_a)
        hit = np.flatnonzero(ent == e_a)
        reached = len(hit) > 0
        comp = sc[keep]
        if reached:
            t = sc[hit[0]]
            rank = 1.0 + np.count_nonzero(comp > t) + 0.5 * np.count_nonzero(comp == t)
        else:
            # answer ties with every unreached, unfiltered competitor
            n_unreached = n - 1 - len(filt) - len(comp)
            rank = 1.0 + len(comp) + 0.5 * n_unreached
        out.append(RankResult((e_q, r_q, e_a), float(rank), reached))
    return out


def aggregate(ranks) -> MetricsReport:
    ranks = list(ranks)
    if not ranks:
        raise ContractError("cannot aggregate an empty list of ranks")
    r = np.array([x.filtered_rank if isinstance(x, RankResult) else float(x) for x in ranks])
    reached = np.array([x.reached if isinstance(x, RankResult) else True for x in ranks])
    return MetricsReport(float(np.mean(1.0 / r)), float(np.mean(r <= 1)), float(np.mean(r <= 10)),
                         len(r), float(np.mean(reached)))


def write_report(path, reports: dict) -> None:
    """Tab-separated table, one row per split, then a ``key=value`` block."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("split\t" + TSV_HEADER + "\n")
        for split, rep in reports.items():
            f.write(f"{split}\t{rep.to_tsv_row()}\n")
        f.write("\n")
        for split, rep in reports.items():
            f.write(rep.to_kv(prefix=f"{split}."))
