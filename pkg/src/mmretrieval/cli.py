"""Command-line entry point: ``mmretrieval <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import EngineConfig, load_config
from .errors import RetrievalError
from .metrics import JudgeProtocol, evaluate_retrieval
from .pipeline import Engine, build_index, build_judge_backend, ingest
from .service import QueryServer, parse_bind
from .synthetic import make_catalog
from .trainer import TrainConfig, fit, save_heads, two_view_clusters

log = logging.getLogger("mmretrieval")


def _config(args: argparse.Namespace, **overrides) -> EngineConfig:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        try:
            overrides[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key.strip()] = value
    return load_config(args.config, overrides)


def _print(obj: object) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def cmd_synth(args: argparse.Namespace) -> int:
    seed = 0 if args.seed is None else args.seed
    cat = make_catalog(args.out, args.items, args.duplicates, seed)
    out = Path(args.out)
    (out / "planted_queries.json").write_text(json.dumps(cat.planted_queries, indent=2, sort_keys=True) + "\n")
    (out / "duplicates.json").write_text(json.dumps(cat.duplicates, indent=2, sort_keys=True) + "\n")
    _print({"catalog": str(cat.path), "items": len(cat.items), "duplicates": len(cat.duplicates)})
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    config = _config(args, catalog=args.catalog, store_dir=args.out)
    result = ingest(args.catalog, args.out, config)
    _print({
        "unique": len(result.items),
        "duplicates": len(result.report.duplicate_map),
        "quarantined": len(result.quarantine),
        "out": str(args.out),
    })
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    config = _config(args, store_dir=args.store, index_dir=args.index)
    result = build_index(config.store_dir, config, config.index_dir)
    _print({
        "new_embeddings": result.new_embeddings,
        "shards": {name: len(s) for name, s in sorted(result.shards.shards.items())},
        "quarantined": len(result.quarantine),
        "index": str(result.index_dir),
    })
    return 0


def _engine(config: EngineConfig) -> Engine:
    return Engine.open(config.store_dir, config.index_dir, config)


def cmd_query(args: argparse.Namespace) -> int:
    config = _config(args, store_dir=args.store, index_dir=args.index)
    engine = _engine(config)
    if args.text is not None:
        results = engine.query_text(args.text, args.k, args.type, args.refine)
    else:
        results = engine.query_similar(args.item, args.k)
    out: dict = {"results": [r.to_json() for r in results]}
    if args.refine and engine.last_trace is not None:
        out["trace"] = engine.last_trace.to_json()
    _print(out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args, store_dir=args.store, index_dir=args.index)
    engine = _engine(config)
    queries = json.loads(Path(args.queries).read_text(encoding="utf-8")) if args.queries else None
    truth = json.loads(Path(args.truth).read_text(encoding="utf-8")) if args.truth else None
    items = engine.indexed_ids()
    if args.limit:
        items = items[: args.limit]
    report = evaluate_retrieval(
        engine,
        items,
        JudgeProtocol(args.protocol),
        build_judge_backend(config.judge_backend),
        depth=config.top_k,
        queries=queries,
        ground_truth=truth,
        n_anchors=args.anchors,
        seed=config.seed,
        max_in_flight=config.judge_backend.max_in_flight,
    )
    Path(args.out).write_text(report.dumps(), encoding="utf-8")
    sys.stdout.write(report.table())
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    if args.pairs == "synthetic":
        data = two_view_clusters(seed=config.seed)
        arrays = (data.train_images, data.train_texts, data.val_images, data.val_texts)
    else:
        with np.load(args.pairs) as npz:
            arrays = tuple(npz[k] for k in ("train_images", "train_texts", "val_images", "val_texts"))
    train_cfg = TrainConfig(
        tau=args.tau, epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
        patience=args.patience, seed=config.seed,
    )
    img_head, txt_head, history = fit(*arrays, train_cfg)
    save_heads(args.out, img_head, txt_head)
    sys.stdout.write(history.to_csv())
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    config = _config(args, store_dir=args.store, index_dir=args.index, bind=args.bind)
    host, port = parse_bind(config.bind)
    server = QueryServer(_engine(config), host, port)
    log.info("serving on %s", server.url)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value or .json config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mmretrieval", description="Multimodal product retrieval engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic catalog with planted duplicates")
    p.add_argument("--out", required=True)
    p.add_argument("--items", type=int, default=1000)
    p.add_argument("--duplicates", type=int, default=50)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="parse, validate and dedup a catalog")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True, help="store directory")
    p.set_defaults(func=cmd_ingest)

    def store_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--store", help="store directory written by ingest")
        p.add_argument("--index", help="index directory")

    p = sub.add_parser("index", parents=[common], help="embed items and build per-type shards")
    store_args(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", parents=[common], help="text or similar-item query")
    store_args(p)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--text")
    target.add_argument("--item")
    p.add_argument("--k", type=int)
    p.add_argument("--type", help="restrict a text query to one product type")
    p.add_argument("--refine", action="store_true", help="rewrite the text with the agent loop first")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", parents=[common], help="judge-based Precision@k evaluation")
    store_args(p)
    p.add_argument("--protocol", choices=[x.value for x in JudgeProtocol], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--queries", help="JSON object: item id -> query text")
    p.add_argument("--truth", help="JSON object: query/anchor id -> expected item id")
    p.add_argument("--anchors", type=int, default=100)
    p.add_argument("--limit", type=int, help="evaluate only the first N indexed items")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", parents=[common], help="fit projection heads with the contrastive loss")
    p.add_argument("--pairs", required=True, help="'synthetic' or an .npz with train/val image/text arrays")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=TrainConfig.tau)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--patience", type=int, default=TrainConfig.patience)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP query service")
    store_args(p)
    p.add_argument("--bind", help="HOST:PORT")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (RetrievalError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
