"""Command-line interface.

Every field of the training config can come from a YAML/JSON file
(``--config``) and be overridden by a flag named after its dotted path, e.g.
``--epochs 5 --model.encoder.d 32 --model.limits.max-rows 4``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from .batch import score_query_tables, score_table_pairs
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import rank_by_score
from .tables import (Corpus, Limits, Table, Vocabulary, build_vocab, context_fields, corpus_texts,
                     linearize_column, linearize_row, parse_corpus, parse_tables, write_qrels,
                     write_queries, write_tables)
from .train import TrainConfig, cross_validate, evaluate_fold, make_vocab, train_full

LOG = logging.getLogger("strubert")

SYNTHETIC_KINDS = ("similarity", "keyword", "content", "wikitables", "pmc")


# ---------------------------------------------------------------------------
# config handling


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set_dotted(d: dict, key: str, value) -> None:
    *path, leaf = key.split(".")
    for p in path:
        d = d.setdefault(p, {})
    d[leaf] = value


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _flag_type(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML or JSON training config")
    group = parser.add_argument_group("config overrides")
    for key, default in _flatten(TrainConfig().to_dict()).items():
        group.add_argument("--" + key.replace("_", "-"), dest=f"cfg:{key}", type=_flag_type(default),
                           default=None, metavar=type(default).__name__.upper())


def load_config_file(path) -> dict:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig().to_dict()
    if getattr(args, "config", None):
        cfg = _deep_merge(cfg, load_config_file(args.config))
    for dest, value in vars(args).items():
        if dest.startswith("cfg:") and value is not None:
            _set_dotted(cfg, dest[4:], value)
    return TrainConfig.from_dict(cfg)


# ---------------------------------------------------------------------------
# helpers


def _emit_json(obj: dict, out: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out is None:
        print(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")


def _load_corpus(args) -> Corpus:
    return parse_corpus(args.tables, args.queries, args.qrels, binary=args.binary)


def _add_corpus_flags(p: argparse.ArgumentParser, qrels: bool = True) -> None:
    p.add_argument("--tables", type=Path, required=True, help="tables JSONL")
    p.add_argument("--queries", type=Path, help="queries JSONL")
    if qrels:
        p.add_argument("--qrels", type=Path, help="qrels TSV")
        p.add_argument("--binary", action="store_true", help="qrels grades are 0/1 labels")


def _checkpoint_stamp(meta: dict) -> tuple:
    train = meta.get("train", {})
    return train.get("seed"), meta.get("config_hash")


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_vocab(args) -> int:
    cfg = resolve_config(args)
    corpus = parse_corpus(args.tables, args.queries)
    vocab = build_vocab(corpus_texts(corpus), cfg.min_freq)
    vocab.save(args.out)
    _emit_json({"vocab": str(args.out), "size": len(vocab), "min_freq": cfg.min_freq,
                "seed": cfg.seed, "config_hash": cfg.config_hash()}, None)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    corpus = _load_corpus(args)
    vocab = Vocabulary.load(args.vocab) if args.vocab else make_vocab(corpus, cfg)
    out_dir = args.out_dir
    if args.full:
        model, report = train_full(cfg, corpus, vocab)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out_dir / "model.strb", model,
                            {"task": cfg.task, "fold": None, "train": cfg.to_dict(),
                             "config_hash": cfg.config_hash()})
    else:
        folds = args.fold if args.fold else None
        _, report = cross_validate(cfg, corpus, vocab, out_dir, folds)
    if out_dir is not None:
        _emit_json(report, out_dir / "report.json")
        if not args.no_figures:
            from .plotting import report_figures

            report["figures"] = [str(p) for p in report_figures(report, out_dir / "figures")]
    _emit_json(report, args.out)
    return 0


def cmd_evaluate(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    if "train" not in meta:
        raise ValueError(f"{args.checkpoint}: no training config recorded")
    cfg = TrainConfig.from_dict(meta["train"])
    corpus = _load_corpus(args)
    fold = args.fold if args.fold is not None else meta.get("fold")
    if fold is None:
        raise ValueError("checkpoint was trained on all data; pass --fold to pick a test split")
    metrics = evaluate_fold(model, corpus, cfg, fold)
    _emit_json({"task": cfg.task, "fold": fold, "seed": cfg.seed, "config_hash": meta.get("config_hash"),
                "checkpoint": str(args.checkpoint), "metrics": metrics}, args.out)
    return 0


def cmd_search(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    tables = parse_tables(args.tables)
    if args.by_table:
        if args.by_table not in tables:
            raise KeyError(f"unknown table {args.by_table!r}")
        ids = [tid for tid in tables if tid != args.by_table]
        values = score_table_pairs(model, tables[args.by_table], [tables[t] for t in ids])
    else:
        if not args.query.strip():
            raise ValueError("query text is empty")
        ids = list(tables)
        values = score_query_tables(model, args.query, [tables[t] for t in ids])
    scores = dict(zip(ids, values.tolist()))
    seed, chash = _checkpoint_stamp(meta)
    lines = [f"# seed={seed} config_hash={chash}", "rank\ttable_id\tscore"]
    for rank, tid in enumerate(rank_by_score(scores)[: args.top_k], 1):
        lines.append(f"{rank}\t{tid}\t{scores[tid]:.6f}")
    print("\n".join(lines))
    return 0


def cmd_linearize(args) -> int:
    if args.fixture:
        from .synthetic import figure2_table

        table = figure2_table()
    else:
        if not args.tables or not args.table_id:
            raise ValueError("pass --fixture or both --tables and --table-id")
        table = parse_tables(args.tables)[args.table_id]
    limits = Limits()
    stamp = hashlib.sha256(json.dumps(asdict(limits), sort_keys=True).encode()).hexdigest()[:16]
    print(f"# table={table.id} seed=- config_hash={stamp}")
    for i in range(table.n_cols):
        print(f"column {i}\t{linearize_column(table, i).text}")
    for k in range(table.n_rows):
        print(f"row {k}\t{linearize_row(table, k).text}")
    fields = context_fields(table, args.query, limits)
    for n, f in enumerate(fields):
        print(f"field {n}\t{' '.join(f)}")
    return 0


def cmd_dump_attention(args) -> int:
    model, meta = load_checkpoint(args.checkpoint) if args.checkpoint else (None, {})
    if model is None:
        model = _fixture_model(args)
    tables = parse_tables(args.tables) if args.tables else _appendix_fixture()
    left = tables[args.left]
    right = args.query if args.query else tables[args.right]
    dump = model.dump_attention(left, right, rep=args.rep)
    seed, chash = _checkpoint_stamp(meta) if meta else (model.config.seed, "untrained")
    dump.update({"seed": seed, "config_hash": chash, "rep": args.rep})
    if args.figure:
        from .plotting import attention_heads

        dump["figure"] = str(attention_heads(dump, args.figure))
    _emit_json(dump, args.out)
    return 0


def _appendix_fixture() -> dict[str, Table]:
    from .synthetic import appendix_tables

    return {t.id: t for t in appendix_tables()}


def _fixture_model(args):
    """Untrained model over the fixture vocabulary, for inspecting shapes."""
    from .matcher import StruBERT

    cfg = resolve_config(args)
    tables = parse_tables(args.tables) if args.tables else _appendix_fixture()
    vocab = build_vocab(corpus_texts(Corpus(tables)), 1)
    return StruBERT(cfg.model, vocab)


def cmd_gen_synthetic(args) -> int:
    from . import synthetic

    if args.kind == "similarity":
        corpus = synthetic.similarity_corpus(args.n, seed=args.seed)
    elif args.kind == "keyword":
        corpus = synthetic.keyword_corpus(args.n, seed=args.seed)
    elif args.kind == "content":
        corpus = synthetic.content_corpus(seed=args.seed)
    elif args.kind == "wikitables":
        corpus = synthetic.wikitables_shaped_corpus(seed=args.seed)
    else:
        corpus = synthetic.pmc_shaped_corpus(seed=args.seed)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_tables(out / "tables.jsonl", corpus.tables.values())
    write_qrels(out / "qrels.tsv", corpus.judgments)
    files = {"tables": str(out / "tables.jsonl"), "qrels": str(out / "qrels.tsv")}
    if corpus.queries:
        write_queries(out / "queries.jsonl", corpus.queries.values())
        files["queries"] = str(out / "queries.jsonl")
    manifest = {"kind": args.kind, "seed": args.seed, "n": args.n, "files": files,
                "counts": {"tables": len(corpus.tables), "queries": len(corpus.queries),
                           "judgments": len(corpus.judgments)}}
    manifest["config_hash"] = hashlib.sha256(
        json.dumps({k: manifest[k] for k in ("kind", "seed", "n")}, sort_keys=True).encode()).hexdigest()[:16]
    _emit_json(manifest, out / "manifest.json")
    _emit_json(manifest, None)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strubert", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a table corpus")
    _add_corpus_flags(p, qrels=False)
    p.add_argument("--out", type=Path, required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="k-fold cross-validation (or --full) training")
    _add_corpus_flags(p)
    p.add_argument("--vocab", type=Path, help="vocabulary file (default: built from the corpus)")
    p.add_argument("--out-dir", type=Path, help="directory for checkpoints, report.json and figures")
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")
    p.add_argument("--fold", type=int, action="append", help="train only these folds (repeatable)")
    p.add_argument("--full", action="store_true", help="train one model on all examples")
    p.add_argument("--no-figures", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="recompute a checkpoint's test-fold metrics")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_corpus_flags(p)
    p.add_argument("--fold", type=int)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("search", help="rank tables for a keyword query or a query table")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--tables", type=Path, required=True)
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--query", help="keyword query text")
    what.add_argument("--by-table", metavar="TABLE_ID", help="use this table as the query")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("linearize", help="print the column/row sequences of a table")
    p.add_argument("--tables", type=Path)
    p.add_argument("--table-id")
    p.add_argument("--fixture", action="store_true", help="use the built-in football table")
    p.add_argument("--query", help="keyword query prepended to the context fields")
    p.set_defaults(func=cmd_linearize)

    p = sub.add_parser("dump-attention", help="per-head miniBERT attention for a table pair")
    p.add_argument("--checkpoint", type=Path, help="trained model (default: untrained fixture model)")
    p.add_argument("--tables", type=Path, help="tables JSONL (default: built-in club/team tables)")
    p.add_argument("--left", default="clubs")
    what = p.add_mutually_exclusive_group()
    what.add_argument("--right", default="teams")
    what.add_argument("--query")
    p.add_argument("--rep", choices=("c", "r"), default="c")
    p.add_argument("--out", type=Path)
    p.add_argument("--figure", type=Path, help="also render per-head heatmaps to this image")
    add_config_flags(p)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("gen-synthetic", help="write a synthetic corpus in the on-disk formats")
    p.add_argument("--kind", choices=SYNTHETIC_KINDS, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=None, help="pairs (similarity) or tables (keyword)")
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "n", "unset") is None:
        args.n = {"similarity": 400, "keyword": 200}.get(args.kind)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, LookupError) as exc:
        print(f"strubert {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
