"""Command-line front end.

    clickgcn synth     --out-dir DIR
    clickgcn build     --catalog C --clicks K --out graph.sgcg
    clickgcn train     --catalog C --clicks K --graph G --out model.sgcn [--metrics log.tsv]
    clickgcn eval      --catalog C --clicks K --graph G --checkpoint M [--baseline B] [--out report.txt]
    clickgcn search    --catalog C --clicks K --graph G --checkpoint M [--index I] [--query TEXT]
    clickgcn gradcheck --layers 2 --variant attention

Every subcommand also reads ``--config FILE`` (``key=value`` lines, keys
named like the long flags); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .evaluation import Embeddings, evaluate, format_report
from .graph import (FormatError, build_graph, graph_from_bytes, prune_neighbors,
                    save_graph)
from .ingest import (ParseError, build_vocab, generate_synthetic, parse_catalog, parse_clicks,
                     read_catalog_titles, read_click_queries, split_train_eval, write_catalog,
                     write_clicks)
from .model import VARIANTS, GraphModel
from .retrieval import UnembeddableQuery, build_index, fingerprint, save_index, search
from .training import (TrainConfig, TrainingError, grad_check, node_texts, train,
                       well_conditioned_instance)

logger = logging.getLogger("clickgcn")

GRADCHECK_TOL = {"mean": 1e-6, "attention": 1e-4, "mask": 1e-4}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=None, help="embedding dimension")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--fanout", type=int, default=10, help="neighbors per node in a tree (k)")
    p.add_argument("--max-neighbors", type=int, default=50)
    p.add_argument("--variant", choices=VARIANTS, default="mask")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--pool", type=int, default=100)
    p.add_argument("--eval-fraction", type=float, default=0.1)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded reproducible mode (the only mode implemented)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clickgcn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic catalog and click log")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-clusters", type=int, default=20)
    p.add_argument("--n-queries", type=int, default=2000)
    p.add_argument("--n-items", type=int, default=1000)
    p.add_argument("--n-clicks", type=int, default=100_000)
    p.add_argument("--zipf", type=float, default=1.1)
    p.add_argument("--noise", type=float, default=0.1)
    _common(p)

    p = sub.add_parser("build", help="build the pruned click graph of the training split")
    _data_args(p)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _data_args(p, graph=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="per-step metrics log (epoch, step, loss, sec/step)")
    _common(p)

    p = sub.add_parser("eval", help="offline metrics on the held-out split")
    _data_args(p, graph=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="baseline checkpoint for the error-reduction table")
    p.add_argument("--metrics", help="training metrics log of the checkpoint (for Sec./Step)")
    p.add_argument("--baseline-metrics")
    p.add_argument("--out", help="report file (default: stdout)")
    _common(p)

    p = sub.add_parser("search", help="build an item index and/or query it")
    _data_args(p, graph=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", help="write the item index here")
    p.add_argument("--query", action="append", default=[])
    p.add_argument("--topk", type=int, default=10)
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    _common(p)
    return parser


def _data_args(p, graph: bool = False) -> None:
    p.add_argument("--catalog", required=True)
    p.add_argument("--clicks", required=True)
    if graph:
        p.add_argument("--graph", required=True)


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config(args.config)
        except OSError as exc:
            parser.error(f"cannot read config file: {exc}")
        except UsageError as exc:
            parser.error(str(exc))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        explicit = _explicit_dests(sub, argv[1:])
        for key, raw in values.items():
            action = known.get(key)
            if action is None or key in ("config", "help"):
                parser.error(f"unknown config key {key!r}")
            if key in explicit:
                continue
            if action.nargs == 0:
                val = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    val = action.type(raw) if action.type else raw
                except ValueError:
                    parser.error(f"bad value for {key}: {raw!r}")
                if action.choices and val not in action.choices:
                    parser.error(f"invalid {key} {val!r} (choose from {', '.join(action.choices)})")
            setattr(args, key, val)
    return args


def _explicit_dests(sub: argparse.ArgumentParser, argv) -> set[str]:
    flags = {}
    for a in sub._actions:
        for opt in a.option_strings:
            flags[opt] = a.dest
    return {flags[tok.split("=", 1)[0]] for tok in argv if tok.split("=", 1)[0] in flags}


def _require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def load_data(args, vocab=None):
    """Catalog, full log, vocab, train split and held-out pairs."""
    catalog_path, clicks_path = _require(args.catalog), _require(args.clicks)
    if vocab is None:
        vocab = build_vocab(read_catalog_titles(catalog_path) + read_click_queries(clicks_path),
                            args.min_count)
    catalog = parse_catalog(catalog_path)
    log = parse_clicks(clicks_path, catalog)
    train_log, eval_pairs = split_train_eval(log, args.eval_fraction, args.seed)
    return catalog, log, vocab, train_log, eval_pairs


def _graph_for(args, log):
    data = _require(args.graph).read_bytes()
    graph = graph_from_bytes(data)
    if graph.n_queries != log.n_queries or graph.n_items != log.n_items:
        raise ValueError(f"{args.graph} was built for {graph.n_queries} queries / "
                         f"{graph.n_items} items, data has {log.n_queries} / {log.n_items}")
    return graph, data


def _model(ckpt: Checkpoint, graph, log, catalog, fanout) -> GraphModel:
    return GraphModel(ckpt.params, graph, node_texts(log, catalog, ckpt.vocab), fanout)


def _mean_sec_per_step(path) -> float | None:
    if not path:
        return None
    times = [float(line.split("\t")[3]) for line in _require(path).read_text().splitlines() if line]
    return float(np.mean(times)) if times else None


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    catalog, log = generate_synthetic(args.n_clusters, args.n_queries, args.n_items, args.n_clicks,
                                      args.zipf, args.noise, args.seed)
    write_catalog(catalog, out / "catalog.tsv")
    write_clicks(log, catalog, out / "clicks.tsv")
    print(f"wrote {len(catalog)} items and {len(log)} click records to {out}")
    return 0


def cmd_build(args) -> int:
    _, _, _, train_log, _ = load_data(args)
    graph = prune_neighbors(build_graph(train_log), args.max_neighbors)
    save_graph(graph, args.out)
    print(f"wrote graph: {graph.n_queries} queries, {graph.n_items} items, "
          f"{len(graph.query_items.neighbors)} query->item edges to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch, epochs=args.epochs, lr=args.lr,
                       dim=args.d or 32, layers=args.layers, fanout=args.fanout,
                       max_neighbors=args.max_neighbors, variant=args.variant, seed=args.seed)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    catalog, log, vocab, train_log, _ = load_data(args)
    graph, _ = _graph_for(args, log)
    if args.metrics:
        with open(args.metrics, "w", encoding="utf-8", newline="\n") as fh:
            params, history = train(cfg, graph, train_log, catalog, vocab, metrics=fh)
    else:
        params, history = train(cfg, graph, train_log, catalog, vocab)
    echo = {k: str(v) for k, v in cfg.as_dict().items()}
    echo.update(eval_fraction=str(args.eval_fraction), min_count=str(args.min_count))
    save_checkpoint(Checkpoint(params, vocab, cfg.seed, echo), args.out)
    for h in history:
        print(f"epoch {h.epoch}: loss {h.mean_loss:.4f} ({h.steps} steps, {h.sec_per_step:.4f} s/step)")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint))
    catalog, log, _, train_log, eval_pairs = load_data(args, ckpt.vocab)
    graph, _ = _graph_for(args, log)
    model = Embeddings.from_model(_model(ckpt, graph, log, catalog, args.fanout),
                                  f"{ckpt.params.variant}-L{ckpt.params.n_layers}")
    baseline = None
    if args.baseline:
        bckpt = load_checkpoint(_require(args.baseline))
        if bckpt.vocab.tokens != ckpt.vocab.tokens:
            raise ValueError("baseline checkpoint uses a different vocabulary")
        baseline = Embeddings.from_model(_model(bckpt, graph, log, catalog, args.fanout),
                                         f"baseline-L{bckpt.params.n_layers}")
    report = evaluate(model, eval_pairs, train_log, baseline, pool_size=args.pool,
                      negatives_per_pos=args.pool, seed=args.seed,
                      sec_per_step=_mean_sec_per_step(args.metrics),
                      baseline_sec_per_step=_mean_sec_per_step(args.baseline_metrics))
    text = format_report(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_search(args) -> int:
    ckpt_path = _require(args.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    catalog, log, _, _, _ = load_data(args, ckpt.vocab)
    graph, graph_bytes = _graph_for(args, log)
    model = _model(ckpt, graph, log, catalog, args.fanout)
    index = build_index(model, catalog, fingerprint(ckpt_path.read_bytes(), graph_bytes))
    if args.index:
        save_index(index, args.index)
        print(f"wrote index of {len(index)} items to {args.index}")
    for q in args.query:
        hits = search(index, model, q, args.topk, log.query_index, ckpt.vocab)
        print(f"# {q}")
        for rank, (ext, s) in enumerate(hits, 1):
            print(f"{rank}\t{ext}\t{s:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    dim = args.d or 4
    if dim > 8 or args.layers > 2:
        raise UsageError("gradcheck runs on small instances: --d <= 8 and --layers <= 2")
    inst = well_conditioned_instance(args.seed, args.variant, args.layers, dim)
    err = grad_check(inst.params, inst.pairs, inst.graph, inst.texts, inst.fanout, inst.seed)
    tol = GRADCHECK_TOL[args.variant]
    print(f"variant={args.variant} layers={args.layers} d={dim} instance_seed={inst.seed} "
          f"max_rel_err={err:.3e} tol={tol:.0e}")
    return 0 if err < tol else 1


COMMANDS = {"synth": cmd_synth, "build": cmd_build, "train": cmd_train, "eval": cmd_eval,
            "search": cmd_search, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ParseError, FormatError, TrainingError, UnembeddableQuery, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
