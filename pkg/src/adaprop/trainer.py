"""Joint training of the propagation network and its sampler.

Every train triple yields a forward and a reverse query. Batches are
scored on the fact graph with the batch's own triples masked out, the
binary cross-entropy over ``V^L`` is averaged over queries, and one Adam
step updates message-passing and sampler parameters together.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .baselines import EmaBaseline, SchemeConfig, reinforce_surrogate, run_scheme
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, NumericError
from .evaluator import aggregate, rank_batch
from .kg_store import DatasetBundle, KnowledgeGraph
from .propagation import ForwardResult, ModelConfig, ModelParams

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PROB_CLIP = 1e-7
LOG_HEADER = "epoch\tloss\tval_mrr\tval_h1\tval_h10\tmiss_rate\tseconds"

# stream tags keep training, evaluation and analysis noise independent
TAG_TRAIN, TAG_EVAL, TAG_ANALYZE = 1, 2, 3
SPLIT_TAGS = {"valid": 0, "test": 1, "ind_test": 2, "train": 3}


class DivergenceError(NumericError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    L: int = 5
    K: int = 100
    tau: float = 1.0
    d: int = 64
    attn_dim: int = 0
    mess_op: str = "add"
    agg: str = "sum"
    act: str = "relu"
    h0: str = "auto"
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 20
    micro_batch: int = 0
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    estimator: str = "st"
    scheme: str = "incremental"
    learned: bool = True
    num_walks: int = 20
    walk_len: int = 5
    greedy_eval: bool = True
    mode: str = "transductive"
    eval_batch_size: int = 50
    train_limit: int = 0
    eval_limit: int = 0
    workers: int = 1

    def __post_init__(self):
        positive = ("L", "K", "d", "batch_size", "max_epochs", "patience", "eval_batch_size",
                    "workers", "num_walks")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("micro_batch", "train_limit", "eval_limit", "weight_decay", "walk_len"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.tau <= 0 or self.lr <= 0:
            raise ConfigError("tau and lr must be positive")
        if self.mode not in ("transductive", "inductive"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        try:
            self.scheme_config()
            self.model_config(1)
        except (ContractError, DimensionError) as exc:
            raise ConfigError(str(exc)) from None

    def scheme_config(self) -> SchemeConfig:
        return SchemeConfig(self.scheme, self.learned, self.K, self.tau, self.num_walks,
                            self.walk_len, self.estimator)

    def model_config(self, n_rel: int) -> ModelConfig:
        return ModelConfig(n_rel, self.d, self.L, self.mess_op, self.agg, self.act,
                           self.attn_dim, self.h0)

    @property
    def selection_metric(self) -> str:
        return "hit10" if self.mode == "inductive" else "mrr"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    state: dict
    config: dict
    relation_names: list
    epoch: int
    metric: float
    seed: int

    def params(self) -> ModelParams:
        cfg = TrainConfig.from_dict(self.config)
        params = ModelParams(cfg.model_config(len(self.relation_names)), seed=cfg.seed)
        params.load_state_dict(self.state)
        return params


# ---------------------------------------------------------------- losses

def query_loss(phi, entities, e_a: int) -> ad.Value:
    """Binary cross-entropy over ``V^L`` for one query; ``y = 1`` only at ``e_a``."""
    phi = ad.clamp(ad.constant(phi), PROB_CLIP, 1.0 - PROB_CLIP)
    y = (np.asarray(entities) == e_a).astype(np.float64)
    pos = ad.mul(ad.log(phi), ad.Value(y))
    neg = ad.mul(ad.log(ad.sub(ad.Value(1.0), phi)), ad.Value(1.0 - y))
    return ad.scale(ad.sum_all(ad.add(pos, neg)), -1.0)


def batch_loss(res: ForwardResult):
    """Mean query loss, the per-query losses and which answers were missed."""
    B = len(res.queries)
    phi = ad.clamp(ad.sigmoid(res.logits), PROB_CLIP, 1.0 - PROB_CLIP)
    y = (res.entity == res.queries[res.batch, 2]).astype(np.float64)
    terms = ad.add(ad.mul(ad.log(phi), ad.Value(y)),
                   ad.mul(ad.log(ad.sub(ad.Value(1.0), phi)), ad.Value(1.0 - y)))
    per_query = ad.scale(ad.segment_reduce(terms, res.batch, B, "sum"), -1.0)
    hit = np.bincount(res.batch, weights=y, minlength=B) > 0
    return ad.scale(ad.sum_all(per_query), 1.0 / B), per_query.data.copy(), ~hit


def leakage_guard(batch_queries, kg: KnowledgeGraph) -> np.ndarray:
    """Boolean mask over ``kg`` edges hiding each query triple and its inverse."""
    q = np.asarray(batch_queries, dtype=np.int64).reshape(-1, 3)
    R = kg.n_rel
    rev = q[:, 1] >= R
    h = np.where(rev, q[:, 2], q[:, 0])
    t = np.where(rev, q[:, 0], q[:, 2])
    r = np.where(rev, q[:, 1] - R, q[:, 1])
    eids = np.concatenate([kg.find_edges(h, r, t), kg.find_edges(t, r + R, h)])
    blocked = np.zeros(kg.edge_count, dtype=bool)
    blocked[eids[eids >= 0]] = True
    return blocked


# ---------------------------------------------------------------- forward

def streams_for(seed: int, tag: int, epoch: int, query_ids) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, tag, epoch, int(i)]) for i in query_ids]


def forward(cfg: TrainConfig, queries, query_ids, kg: KnowledgeGraph, params: ModelParams,
            train: bool, tag: int, epoch: int = 0, blocked=None) -> ForwardResult:
    """One batch through the configured scheme.

    Noise depends only on ``(seed, tag, epoch, query id)``. Learned
    samplers take the deterministic top-K at evaluation when
    ``greedy_eval`` is set; unlearned samplers always stay random.
    """
    scheme = cfg.scheme_config()
    greedy = not train and cfg.greedy_eval and scheme.learned
    streams = None if greedy else streams_for(cfg.seed, tag, epoch, query_ids)
    return run_scheme(scheme, queries, kg, params, streams=streams, blocked=blocked)


def evaluate_model(params: ModelParams, bundle: DatasetBundle, split: str, cfg: TrainConfig,
                   keep_paths: bool = False, limit: int | None = None):
    """Filtered metrics on ``split``; returns ``(report, ranks, paths or None)``."""
    kg, queries, filt = bundle.split_for_eval(split)
    limit = cfg.eval_limit if limit is None else limit
    if limit:
        queries = queries[:limit]
    if len(queries) == 0:
        raise ContractError(f"split {split!r} has no queries")
    tag_epoch = SPLIT_TAGS.get(split, 9)
    starts = list(range(0, len(queries), cfg.eval_batch_size))

    def run(s):
        ids = np.arange(s, min(s + cfg.eval_batch_size, len(queries)))
        res = forward(cfg, queries[ids], ids, kg, params, train=False, tag=TAG_EVAL,
                      epoch=tag_epoch)
        ranks = rank_batch(queries[ids], res.batch, res.entity, res.logits.data, filt, kg.n)
        return ranks, (res.paths() if keep_paths else None)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(s) for s in starts]
    ranks = [r for rs, _ in results for r in rs]
    paths = [p for _, ps in results for p in ps] if keep_paths else None
    return aggregate(ranks), ranks, paths


# ---------------------------------------------------------------- training

def _step_batch(cfg, params, bundle, queries, ids, epoch, baseline):
    """Forward/backward one batch, accumulating gradients; returns stats."""
    kg = bundle.fact_graph
    blocked = leakage_guard(queries, kg)
    size = cfg.micro_batch or len(queries)
    loss_sum, misses, rewards = 0.0, 0, []
    for s in range(0, len(queries), size):
        mq, mid = queries[s:s + size], ids[s:s + size]
        with ad.Tape() as tape:
            res = forward(cfg, mq, mid, kg, params, train=True, tag=TAG_TRAIN, epoch=epoch,
                          blocked=blocked)
            loss, per_query, missed = batch_loss(res)
            total = loss
            if res.logp is not None:
                total = ad.add(loss, reinforce_surrogate(res.logp, -per_query, baseline.get()))
            total = ad.scale(total, len(mq) / len(queries))
        tape.backward(total)
        loss_sum += float(loss.data) * len(mq)
        misses += int(missed.sum())
        rewards.extend((-per_query).tolist())
    if cfg.estimator == "reinforce" and cfg.learned:
        baseline.update(float(np.mean(rewards)))
    return loss_sum, misses


def train(bundle: DatasetBundle, cfg: TrainConfig, log_path=None, checkpoint_path=None,
          on_epoch=None):
    """Fit a model; returns ``(best checkpoint, log lines)``.

    The log holds a header and one tab-separated line per epoch. Model
    selection uses validation MRR (transductive) or Hit@10 (inductive).
    """
    queries = bundle.queries("train")
    if len(queries) == 0:
        raise ConfigError("training set is empty")
    if len(bundle.valid) == 0:
        raise ConfigError("validation set is empty")
    if cfg.train_limit:
        queries = queries[:cfg.train_limit]
    params = ModelParams(cfg.model_config(bundle.n_rel), seed=cfg.seed)
    opt = ad.Adam(params.values(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    baseline = EmaBaseline(0.9)
    lines = [LOG_HEADER]
    log_file = open(log_path, "w", encoding="utf-8", newline="\n") if log_path else None
    if log_file:
        log_file.write(LOG_HEADER + "\n")
    best, best_metric, stale = None, -np.inf, 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng([cfg.seed, TAG_TRAIN, epoch]).permutation(len(queries))
            loss_sum, misses = 0.0, 0
            for s in range(0, len(order), cfg.batch_size):
                ids = order[s:s + cfg.batch_size]
                opt.zero_grad()
                try:
                    ls, ms = _step_batch(cfg, params, bundle, queries[ids], ids, epoch, baseline)
                    opt.step()
                except NumericError as exc:
                    raise DivergenceError(
                        f"training diverged at epoch {epoch}, batch {s // cfg.batch_size}: {exc}"
                    ) from exc
                loss_sum += ls
                misses += ms
            mean_loss = loss_sum / len(queries)
            if not np.isfinite(mean_loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            report, _, _ = evaluate_model(params, bundle, "valid", cfg)
            seconds = time.perf_counter() - t0
            line = (f"{epoch}\t{mean_loss:.6f}\t{report.mrr:.6f}\t{report.hit1:.6f}\t"
                    f"{report.hit10:.6f}\t{misses / len(queries):.6f}\t{seconds:.2f}")
            lines.append(line)
            if log_file:
                log_file.write(line + "\n")
                log_file.flush()
            logger.info(line)
            metric = getattr(report, cfg.selection_metric)
            if metric > best_metric:
                best_metric, stale = metric, 0
                best = Checkpoint(params.state_dict(), cfg.to_dict(),
                                  list(bundle.vocab.relation_names), epoch, float(metric), cfg.seed)
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, best)
            else:
                stale += 1
            if on_epoch:
                on_epoch(epoch, report, params)
            if stale >= cfg.patience:
                break
    finally:
        if log_file:
            log_file.close()
    return best, lines


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a failed save never leaves a partial file behind."""
    meta = {"version": CHECKPOINT_VERSION, "config": ckpt.config,
            "relation_names": ckpt.relation_names, "epoch": ckpt.epoch,
            "metric": ckpt.metric, "seed": ckpt.seed}
    arrays = {f"param/{k}": v for k, v in ckpt.state.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez(f, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            state = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    ckpt = Checkpoint(state, meta["config"], meta["relation_names"], meta["epoch"],
                      meta["metric"], meta["seed"])
    try:
        ckpt.params()
    except Exception as exc:
        raise CheckpointError(f"{path}: inconsistent parameters: {exc}") from None
    return ckpt

