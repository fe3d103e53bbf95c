"""Command-line entry point.

    python -m adaprop train data=fb237_v1 mode=inductive L=5 K=300 tau=0.5 batch_size=50
    python -m adaprop eval data=fb237_v1 mode=inductive checkpoint=runs/x/checkpoint.npz
    python -m adaprop analyze data=WN18RR scheme=progressive L=8
    python -m adaprop export-path data=WN18RR checkpoint=... query=3 format=dot

Arguments are ``key=value`` pairs; ``config=FILE`` reads the same pairs
from a file (one per line, ``#`` comments) and later pairs override
earlier ones. Unknown keys fail before anything runs. Every command
writes ``config.resolved`` to ``out`` capturing the effective settings.

Exit codes: 0 success, 2 configuration or data error, 3 numeric divergence.
"""

from __future__ import annotations

import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .diagnostics import curves, export_path, overlap_pairs, per_hop_report, summarize
from .errors import AdaPropError, ConfigError, NumericError
from .evaluator import write_report
from .kg_store import load_dataset
from .propagation import ModelParams
from .trainer import (TAG_ANALYZE, Checkpoint, TrainConfig, evaluate_model, forward,
                      load_checkpoint, train)

COMMANDS = ("train", "eval", "analyze", "export-path")
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
DATA_ENV = "ADAPROP_DATA"

logger = logging.getLogger("adaprop")


@dataclass
class RunOptions:
    """Keys that are not training hyper-parameters."""

    data: str = ""
    out: str = "runs/latest"
    checkpoint: str = ""
    split: str = "test"
    pairs: int = 0
    query: int = 0
    format: str = "json"
    export_paths: int = 0
    log_level: str = "warning"


_TYPES = {}
for _cls in (TrainConfig, RunOptions):
    for _f in fields(_cls):
        _TYPES[_f.name] = type(_f.default)


def parse_value(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r} (expected {kind.__name__})") from None


def read_config_file(path) -> list[str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return [ln.strip() for ln in f if ln.strip() and not ln.lstrip().startswith("#")]


def parse_args(argv) -> tuple[str, dict]:
    """Split ``argv`` into the command and a flat ``{key: typed value}`` dict."""
    if not argv or argv[0] not in COMMANDS:
        raise ConfigError(f"usage: adaprop {{{','.join(COMMANDS)}}} key=value ...")
    command, pairs = argv[0], []
    for arg in argv[1:]:
        if "=" not in arg:
            raise ConfigError(f"expected key=value, got {arg!r}")
        key, raw = arg.split("=", 1)
        if key == "config":
            pairs.extend(read_config_file(raw))
        else:
            pairs.append(arg)
    values = {}
    for item in pairs:
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, raw.strip())
    return command, values


def split_config(values: dict) -> tuple[TrainConfig, RunOptions]:
    train_keys = {f.name for f in fields(TrainConfig)}
    tc = TrainConfig(**{k: v for k, v in values.items() if k in train_keys})
    ro = RunOptions(**{k: v for k, v in values.items() if k not in train_keys})
    return tc, ro


def resolve_data(path: str) -> Path:
    if not path:
        raise ConfigError("no dataset given (data=PATH)")
    p = Path(path)
    root = os.environ.get(DATA_ENV)
    if not p.is_absolute() and not p.exists() and root:
        p = Path(root) / p
    if not p.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {p}")
    return p


def write_resolved(out: Path, command: str, tc: TrainConfig, ro: RunOptions) -> None:
    lines = [f"# command: {command}"]
    for obj in (tc, ro):
        for f in fields(obj):
            v = getattr(obj, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
    (out / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _eval_splits(tc: TrainConfig, bundle) -> list[str]:
    splits = ["valid"]
    if tc.mode == "inductive":
        splits.append("ind_test")
    elif len(bundle.test):
        splits.append("test")
    return splits


def _check_relations(ckpt: Checkpoint, bundle) -> None:
    known = set(ckpt.relation_names)
    for name in bundle.vocab.relation_names:
        if name not in known:
            raise ConfigError(f"relation {name!r} is not in the checkpoint's vocabulary")
    if list(bundle.vocab.relation_names) != list(ckpt.relation_names):
        raise ConfigError("relation vocabulary order differs from the checkpoint's")


def _load_model(ro: RunOptions, bundle, required: bool, tc: TrainConfig):
    if not ro.checkpoint:
        if required:
            raise ConfigError("this command needs checkpoint=PATH")
        return ModelParams(tc.model_config(bundle.n_rel), seed=tc.seed)
    ckpt = load_checkpoint(ro.checkpoint)
    _check_relations(ckpt, bundle)
    return ckpt.params()


def _model_config(ro: RunOptions, tc: TrainConfig, explicit: dict) -> TrainConfig:
    """Architecture comes from the checkpoint; explicit keys still override."""
    if not ro.checkpoint:
        return tc
    base = load_checkpoint(ro.checkpoint).config
    arch = ("d", "attn_dim", "mess_op", "agg", "act", "h0")
    merged = dict(base)
    merged.update({k: v for k, v in explicit.items() if k in base})
    for k in arch:
        merged[k] = base[k]
    merged["L"] = explicit.get("L", base["L"])
    return TrainConfig.from_dict(merged)


def cmd_train(tc: TrainConfig, ro: RunOptions, out: Path) -> int:
    bundle = load_dataset(resolve_data(ro.data), tc.mode, tc.seed)
    ckpt_path = out / "checkpoint.npz"
    best, _ = train(bundle, tc, log_path=out / "train.log", checkpoint_path=ckpt_path)
    params = best.params()
    reports = {s: evaluate_model(params, bundle, s, tc)[0] for s in _eval_splits(tc, bundle)}
    write_report(out / "metrics.tsv", reports)
    return EXIT_OK


def cmd_eval(tc: TrainConfig, ro: RunOptions, out: Path) -> int:
    bundle = load_dataset(resolve_data(ro.data), tc.mode, tc.seed)
    params = _load_model(ro, bundle, required=True, tc=tc)
    reports = {s: evaluate_model(params, bundle, s, tc)[0] for s in _eval_splits(tc, bundle)}
    write_report(out / "metrics.tsv", reports)
    return EXIT_OK


def cmd_analyze(tc: TrainConfig, ro: RunOptions, out: Path) -> int:
    bundle = load_dataset(resolve_data(ro.data), tc.mode, tc.seed)
    learned = tc.scheme_config().learned
    params = _load_model(ro, bundle, required=learned, tc=tc)
    kg, queries, _ = bundle.split_for_eval(ro.split)
    _, ranks, paths = evaluate_model(params, bundle, ro.split, tc, keep_paths=True)
    queries = queries[:len(paths)]
    pairs = overlap_pairs(queries, ro.pairs or None)
    s = summarize(paths, queries, kg.n, pairs)
    with open(out / "analysis.tsv", "w", encoding="utf-8", newline="\n") as f:
        f.write("scheme\tL\tK\tIE\tToC\treach\toverlap\tpairs\n")
        f.write(f"{tc.scheme}\t{tc.L}\t{tc.K}\t{s['IE']:.6e}\t{s['ToC']:.6e}\t"
                f"{s['reach']:.6f}\t{s['overlap']:.6f}\t{s['pairs']}\n")
    with open(out / "curves.tsv", "w", encoding="utf-8", newline="\n") as f:
        f.write("step\tIE\tToC\n")
        for l, ie, toc in curves(paths, queries, kg.n):
            f.write(f"{l}\t{ie:.6e}\t{toc:.6e}\n")
    with open(out / "per_hop.tsv", "w", encoding="utf-8", newline="\n") as f:
        f.write("hop\tcount\tmrr\n")
        for hop, count, mrr in per_hop_report(ranks, kg):
            f.write(f"{hop:g}\t{count}\t{mrr:.6f}\n")
    if ro.export_paths:
        pdir = out / "paths"
        pdir.mkdir(exist_ok=True)
        for i in range(min(ro.export_paths, len(paths))):
            export_path(paths[i], queries[i], ro.format, pdir / f"path_{i}.{ro.format}")
    return EXIT_OK


def cmd_export_path(tc: TrainConfig, ro: RunOptions, out: Path) -> int:
    bundle = load_dataset(resolve_data(ro.data), tc.mode, tc.seed)
    params = _load_model(ro, bundle, required=tc.scheme_config().learned, tc=tc)
    kg, queries, _ = bundle.split_for_eval(ro.split)
    if not 0 <= ro.query < len(queries):
        raise ConfigError(f"query index {ro.query} outside [0, {len(queries)})")
    res = forward(tc, queries[ro.query:ro.query + 1], [ro.query], kg, params, train=False,
                  tag=TAG_ANALYZE)
    names = bundle.inductive_test.vocab.entity_names if ro.split == "ind_test" \
        else bundle.vocab.entity_names
    export_path(res.paths()[0], queries[ro.query], ro.format,
                out / f"path_{ro.query}.{ro.format}", names if ro.format == "dot" else None)
    return EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "export-path": cmd_export_path}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, values = parse_args(argv)
        tc, ro = split_config(values)
        tc = _model_config(ro, tc, values)
        logging.basicConfig(level=ro.log_level.upper(), format="%(levelname)s %(message)s")
        out = Path(ro.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(out, command, tc, ro)
        return HANDLERS[command](tc, ro, out)
    except NumericError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (AdaPropError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
