"""Command-line driver: ingest, train-kge, train, evaluate, ablate, recommend, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .baselines import toppop_recommend
from .ckg import (BuildOptions, CollabKG, DataError, NodeKind, SplitSpec, build_ckg,
                  generate_synthetic, load_interactions, load_triples, split_cold_start,
                  write_interactions, write_triples)
from .features import (assemble_initial_features, load_kge_features,
                       load_text_features, train_complex_on_graph, write_feature_file)
from .metrics import MetricReport, evaluate_lists, indcg_sampled
from .model import VARIANTS, ModelConfig, coerce, parse_config_text
from .ranker import embed_cold_users, rank_scores, recommend_all
from .trainer import TrainingDiverged, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("simplerec")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
SPLIT_FILE = "split.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- shared loading ------------------------------------------------------------


def _load_graph(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a graph directory")
    ckg = CollabKG.load(directory)
    path = directory / SPLIT_FILE
    if not path.exists():
        raise DataError(f"{path}: missing split (run ingest)")
    try:
        split = SplitSpec.from_json(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: unreadable split ({exc})") from None
    return ckg, split


def _load_features(graph, text_path, kge_path):
    text = load_text_features(text_path, graph)
    kge = load_kge_features(kge_path, graph) if kge_path else None
    return assemble_initial_features(graph, text, kge)


def _resolve_config(args):
    values = {}
    if args.config:
        try:
            values = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"{args.config}: {exc.strerror}") from None
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    for f in dataclasses.fields(ModelConfig):
        flag = getattr(args, f"cfg_{f.name}", None)
        if flag is not None:
            values[f.name] = coerce(f.name, flag)
    try:
        return ModelConfig(**values)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config: {exc}") from None


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _train(args):
    ckg, split = _load_graph(args.graph)
    graph = split.training_graph(ckg)
    features = _load_features(graph, args.features, args.kge)
    config = _resolve_config(args)
    log_path = Path(str(args.out) + ".log.tsv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(f"epoch\tbpr\tae\tl2\ttotal\tval_ndcg@{config.eval_k}\n")

        def on_epoch(e):
            fh.write(f"{e.epoch}\t{e.bpr:.8g}\t{e.ae:.8g}\t{e.l2:.8g}\t{e.total:.8g}\t{e.val_ndcg:.6f}\n")

        result = fit(ckg, split, features, config, on_epoch)
    meta = {
        "graph": str(Path(args.graph).resolve()),
        "features": str(Path(args.features).resolve()),
        "kge": str(Path(args.kge).resolve()) if args.kge else None,
        "best_epoch": result.best_epoch,
        "best_val_ndcg": result.best_metric,
        "epochs_run": len(result.history),
    }
    save_checkpoint(args.out, result.model, result.optimizer, meta)
    return result


def _evaluate(model, ckg, split, features, mode, k, n_negatives, seed):
    recs = recommend_all(model, ckg, split, features, k, mode)
    lists = {u: r.items for u, r in recs.lists.items()}
    report = evaluate_lists(lists, split.test, k, ckg.n_items, f"catalog-minus-{'revealed' if mode == 'cold' else 'seen'}")
    report.n_skipped += len(recs.errors)
    if n_negatives:
        if mode == "cold":
            emb = embed_cold_users(model, split.training_graph(ckg), features,
                                   {u: split.revealed[u] for u in split.cold_users})
            rated = {u: split.revealed[u] for u in split.cold_users}
        else:
            emb = model.full_embeddings(split.training_graph(ckg), features)
            rated = {u: split.train.get(u, set()) | split.validation.get(u, set()) for u in split.warm_users}
        users = [u for u in sorted(rated) if split.test.get(u)]
        scores = {u: (emb[u] @ emb[: ckg.n_items].T).numpy() for u in users}
        sampled = indcg_sampled(scores, {u: split.test[u] for u in users}, rated, n_negatives, seed)
        report.indcg, report.indcg_negatives = sampled.value, n_negatives
    return report


def _toppop_report(ckg, split, mode, k):
    lists = {u: r.items for u, r in toppop_recommend(split, ckg.n_items, k, mode).items()}
    return evaluate_lists(lists, split.test, k, ckg.n_items, "toppop")


def _load_report(path):
    path = Path(path)
    candidates = [path] if path.suffix == ".json" else [Path(str(path) + ".json"), path]
    for p in candidates:
        if p.exists():
            try:
                return MetricReport.from_json(json.loads(p.read_text(encoding="utf-8"))["report"])
            except (ValueError, KeyError) as exc:
                raise DataError(f"{p}: unreadable report ({exc})") from None
    raise DataError(f"{path}: no such report")


def _emit_report(out, report, echo):
    out = Path(out)
    out.write_text(report.to_tsv(), encoding="utf-8")
    _write_json(str(out) + ".json", {"config": echo, "report": report.to_json()})


# --- subcommands ---------------------------------------------------------------


def cmd_ingest(args):
    records = load_interactions(args.ratings, args.threshold)
    triples = load_triples(args.triples) if args.triples else []
    ckg = build_ckg(records, triples, BuildOptions(dangling=args.dangling))
    split = split_cold_start(ckg, args.cold_fraction, args.reveal_fraction, args.min_interactions, args.seed)
    out = Path(args.out)
    ckg.save(out)
    _write_json(out / SPLIT_FILE, split.to_json())
    print(f"{ckg.n_users} users, {ckg.n_items} items, {ckg.n_entities} entities, "
          f"{ckg.n_edges // 2} edges; {len(split.warm_users)} warm / {len(split.cold_users)} cold")


def cmd_train_kge(args):
    ckg, split = _load_graph(args.graph)
    params = train_complex_on_graph(split.training_graph(ckg), dim=args.dim, epochs=args.epochs, seed=args.seed)
    table = params.to_table()
    write_feature_file(args.out, {ckg.node_key(int(v)): vec for v, vec in zip(table.node_ids, table.vectors)})
    print(f"wrote {len(table.node_ids)} entity vectors of dimension {table.dim}")


def cmd_train(args):
    result = _train(args)
    print(f"best epoch {result.best_epoch}, validation NDCG@{result.model.config.eval_k} {result.best_metric:.6f}")


def cmd_evaluate(args):
    ckg, split = _load_graph(args.graph)
    echo = {"split": args.split, "k": args.k, "indcg_negatives": args.indcg_negatives, "seed": args.seed}
    if args.baseline == "toppop":
        report = _toppop_report(ckg, split, args.split, args.k)
        echo["model"] = "toppop"
    else:
        if not args.ckpt:
            raise UsageError("--ckpt is required unless --baseline is given")
        model, _, meta = load_checkpoint(args.ckpt)
        features = _load_features(split.training_graph(ckg), meta["features"], meta.get("kge"))
        report = _evaluate(model, ckg, split, features, args.split, args.k, args.indcg_negatives, args.seed)
        echo.update(model="simplerec", ckpt_meta=meta, model_config=model.config.to_dict())
    if args.compare:
        report.compare(_load_report(args.compare))
        echo["compare"] = str(args.compare)
    _emit_report(args.out, report, echo)
    sys.stdout.write(report.to_tsv())


def cmd_ablate(args):
    args.cfg_variant = args.variant
    args.cfg_ae_lambda = args.ae_lambda
    ckpt = Path(args.out).with_suffix(".ckpt.npz")
    train_args = argparse.Namespace(**{**vars(args), "out": ckpt})
    result = _train(train_args)
    ckg, split = _load_graph(args.graph)
    features = _load_features(split.training_graph(ckg), args.features, args.kge)
    report = _evaluate(result.model, ckg, split, features, args.split, args.k, args.indcg_negatives,
                       result.model.config.seed)
    _emit_report(args.out, report, {"split": args.split, "k": args.k, "model": "simplerec",
                                    "model_config": result.model.config.to_dict(),
                                    "best_epoch": result.best_epoch})
    sys.stdout.write(report.to_tsv())


def _read_user_ratings(path, threshold):
    """``item<TAB>rating`` lines for one user, or ``user<TAB>item<TAB>rating`` lines."""
    by_user = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) == 2:
                fields = ["new_user"] + fields
            if len(fields) < 3 or not fields[0] or not fields[1]:
                raise DataError(f"{path}:{lineno}: expected [user<TAB>]item<TAB>rating")
            try:
                rating = float(fields[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad rating {fields[2]!r}") from None
            if threshold is None or rating >= threshold:
                by_user.setdefault(fields[0], []).append(fields[1])
    if not by_user:
        raise DataError(f"{path}: no positive ratings")
    return by_user


def cmd_recommend(args):
    model, _, meta = load_checkpoint(args.ckpt)
    ckg, split = _load_graph(args.graph or meta["graph"])
    graph = split.training_graph(ckg)
    features = _load_features(graph, meta["features"], meta.get("kge"))
    wanted = _read_user_ratings(args.user_ratings, args.threshold)
    items = ckg.key_index(NodeKind.ITEM)
    users = ckg.key_index(NodeKind.USER)
    trained = graph.user_items()
    for key, keys in wanted.items():
        unknown = [k for k in keys if k not in items]
        if unknown:
            raise DataError(f"user {key!r}: unknown item {unknown[0]!r}")
        if key in users and users[key] in trained:
            raise DataError(f"user {key!r} already has training interactions")
    new = sorted(k for k in wanted if k not in users)
    if new:
        graph = graph.add_users(new)
        features = features.extend_users(graph.n_nodes)
        users = graph.key_index(NodeKind.USER)
    revealed = {users[k]: {items[i] for i in v} for k, v in wanted.items()}
    emb = embed_cold_users(model, graph, features, revealed)
    scores = (emb[: graph.n_items] @ emb[sorted(revealed)].T).numpy().T
    lines = []
    for row, u in enumerate(sorted(revealed)):
        ranked = rank_scores(scores[row], revealed[u], args.k, u, "catalog-minus-revealed")
        lines.extend(ranked.lines(graph.node_key(u), graph.item_keys))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_synth(args):
    inter, triples, feats = generate_synthetic(args.users, args.items, args.entities, args.blocks, args.seed,
                                               links_per_item=args.links, decoy_links_per_item=args.decoys,
                                               feature_noise=args.noise,
                                               entity_text_fraction=args.entity_text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(out / "ratings.tsv", inter)
    write_triples(out / "triples.tsv", triples)
    write_feature_file(out / "text.tsv", feats)
    print(f"wrote {len(inter)} ratings, {len(triples)} triples, {len(feats)} feature rows to {out}")


# --- parser ----------------------------------------------------------------------


def _add_config_flags(p, skip=()):
    p.add_argument("--config", help="key=value model configuration file (flags override it)")
    for f in dataclasses.fields(ModelConfig):
        if f.name in skip:
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", default=None,
                       metavar=f.name.upper(), help=argparse.SUPPRESS)


def build_parser():
    parser = _Parser(prog="simplerec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("ingest", help="build the graph and the warm/cold split")
    p.add_argument("--ratings", required=True)
    p.add_argument("--triples")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--dangling", choices=("drop", "error"), default="drop")
    p.add_argument("--cold-fraction", type=float, default=0.1)
    p.add_argument("--reveal-fraction", type=float, default=0.5)
    p.add_argument("--min-interactions", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-kge", help="ComplEx entity features")
    p.add_argument("--graph", required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_kge)

    p = sub.add_parser("train", help="train a model checkpoint")
    p.add_argument("--graph", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--kge")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metric report for warm or cold users")
    p.add_argument("--ckpt")
    p.add_argument("--graph", required=True)
    p.add_argument("--split", choices=("warm", "cold"), default="cold")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--indcg-negatives", type=int, default=0)
    p.add_argument("--seed", type=int, default=0, help="seed for I-NDCG negative sampling")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", choices=("toppop",))
    p.add_argument("--compare")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    p.add_argument("--graph", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--kge")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--ae-lambda", default=None)
    p.add_argument("--split", choices=("warm", "cold"), default="cold")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--indcg-negatives", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_config_flags(p, skip=("variant", "ae_lambda"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("recommend", help="top-k lists for new users without retraining")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--user-ratings", required=True)
    p.add_argument("--graph")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("synth", help="write a synthetic block fixture")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--blocks", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--links", type=int, default=2)
    p.add_argument("--decoys", type=int, default=6)
    p.add_argument("--noise", type=float, default=3.0)
    p.add_argument("--entity-text", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required")
        torch.set_num_threads(1)
        args.func(args)
    except UsageError as exc:
        print(f"simplerec: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"simplerec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"simplerec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"simplerec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
