"""``mmlate`` command line: synthetic data, encoding, indexing, search, training and evaluation.

Every subcommand is deterministic given its inputs and ``--seed``.  Tables
go to stdout (or ``--out``) tab-separated; failures exit nonzero with a
message naming the stage that failed.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import fusion
from .evalkit import DEFAULT_METRICS, evaluate, parse_metric, write_report
from .index import build_index, load_index, save_index, search, search_prefiltered
from .synthgen import SynthConfig, generate, parse_config_text, read_dataset, write_dataset
from .tensors import (
    read_embeddings,
    read_qrels,
    read_queries,
    read_run,
    write_embeddings,
    write_qrels,
    write_queries,
    write_run,
)
from .trainer import (
    TrainConfig,
    gradcheck,
    load_checkpoint,
    read_train_config,
    save_checkpoint,
)

logger = logging.getLogger("mmlate")

EXIT_FAILURE = 1


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, exc) from exc


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _metrics(text: str) -> list[str]:
    names = [m.strip() for m in text.split(",") if m.strip()]
    for m in names:
        parse_metric(m)
    return names


# -- synth ----------------------------------------------------------------------


def _synth_config(args) -> SynthConfig:
    cfg = SynthConfig()
    if args.config:
        cfg = parse_config_text(_require(args.config, "config file").read_text(encoding="utf-8"), SynthConfig, cfg)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "doc_count", None) is not None:
        overrides["doc_count"] = args.doc_count
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def cmd_synth(args) -> int:
    with stage("synth: config"):
        cfg = _synth_config(args)
    with stage("synth: generate"):
        ds = generate(cfg)
    with stage("synth: write"):
        write_dataset(args.out, ds)
    counts = {s: len(ds.docs_in(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(ds.documents)} documents ({counts['train']}/{counts['val']}/{counts['test']}), "
          f"{len(ds.queries)} queries to {args.out}")
    return 0


# -- train ----------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = read_train_config(_require(args.config, "config file"), cfg)
    overrides = {}
    for name in ("seed", "loss", "scorer", "epochs", "lr", "batch_size", "dim"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "contextualize", None) is not None:
        overrides["contextualize"] = args.contextualize
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    from .experiment import train_on

    with stage("train: config"):
        cfg = _train_config(args)
    with stage("train: load dataset"):
        ds = read_dataset(_require(args.dataset, "dataset directory"))
    with stage("train: fit"):
        params, hist = train_on(ds, cfg, validate=args.validate)
    with stage("train: write checkpoint"):
        save_checkpoint(args.out, params, cfg.contextualize)
        if args.log:
            with open(args.log, "w", encoding="utf-8") as fh:
                fh.write("step\tloss\n")
                for i, v in enumerate(hist.losses):
                    fh.write(f"{i}\t{v:.6f}\n")
    print(f"steps\t{len(hist.losses)}")
    if hist.losses:
        print(f"final_loss\t{np.mean(hist.losses[-50:]):.6f}")
    print(f"alpha\t{params.mixing_weight:.6f}")
    print(f"temperature\t{params.temperature:.6f}")
    for step_, r1 in hist.validation:
        print(f"val_R@1@{step_}\t{r1:.4f}")
    return 0


# -- encode -----------------------------------------------------------------------


def cmd_encode(args) -> int:
    from .experiment import encode_split, untrained_params

    with stage("encode: load dataset"):
        ds = read_dataset(_require(args.dataset, "dataset directory"))
    with stage("encode: load encoder"):
        if args.checkpoint:
            params, ctx = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        else:
            if args.seed is None:
                raise ValueError("an untrained encoder needs --seed")
            base = dataclasses.replace(TrainConfig(), seed=args.seed)
            params, ctx = untrained_params(ds, base), base.contextualize
        if args.contextualize is not None:
            ctx = args.contextualize
    with stage("encode: embed"):
        enc = encode_split(params, ds, args.split, ctx)
    with stage("encode: write"):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_embeddings(out / "docs.emb", enc.index.documents, enc.index.modalities)
        write_queries(out / "queries.emb", enc.queries)
        write_qrels(out / "qrels.tsv", enc.qrels)
        fusion.write_routing(out / "labels.tsv", fusion.oracle_routing(q for q in enc.queries if q.target_modality))
    print(f"encoded {len(enc.index)} documents and {len(enc.queries)} queries ({args.split}) to {out}")
    return 0


# -- index / search -------------------------------------------------------------------


def cmd_index(args) -> int:
    with stage("index: read embeddings"):
        docs = read_embeddings(_require(args.embeddings, "embeddings file"))
    with stage("index: build"):
        index = build_index(docs)
    with stage("index: write"):
        save_index(args.out, index)
    print(f"indexed {len(index)} documents, {index.arena.shape[0]} tokens, dim {index.dim}")
    return 0


def _routing(args, table, modalities):
    if args.route_modality:
        if args.route_modality not in modalities:
            raise ValueError(f"unknown modality {args.route_modality!r}")
        return fusion.fixed_routing(table, args.route_modality)
    if args.routing:
        return fusion.read_routing(_require(args.routing, "routing file"), modalities)
    raise ValueError("--fusion router needs --routing FILE or --route-modality NAME")


def cmd_search(args) -> int:
    with stage("search: load index"):
        index = load_index(_require(args.index, "index file"))
    with stage("search: read queries"):
        queries = read_queries(_require(args.queries, "queries file"))
    with stage("search: score"):
        if args.fusion == "none":
            if args.candidates:
                runs = [search_prefiltered(index, q, args.k, args.candidates, args.scorer) for q in queries]
            else:
                runs = [search(index, q, args.k, args.scorer) for q in queries]
        else:
            per_mod = "pooled" if args.scorer == "pooled" else "li"
            table = fusion.score_table(index, queries, per_mod)
            if args.fusion == "mean":
                fused = fusion.fuse_mean(table, args.k)
            elif args.fusion == "max":
                fused = fusion.fuse_max(table, args.k, index.modalities)
            elif args.fusion == "rrf":
                fused = fusion.fuse_rrf_table(table, args.k_rrf, args.k)
            else:
                fused = fusion.fuse_router(table, _routing(args, table, index.modalities), args.k,
                                           index.modalities)
            runs = [fused[q.query_id] for q in queries]
    with stage("search: write run"):
        if args.out:
            write_run(args.out, runs)
        else:
            for rl in runs:
                for rank, (d, s) in enumerate(rl.items, start=1):
                    print(f"{rl.query_id}\t{d}\t{rank}\t{float(np.float32(s))!r}")
    return 0


# -- eval ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    with stage("eval: read run"):
        runs = read_run(_require(args.run, "run file"))
    with stage("eval: read qrels"):
        qrels = read_qrels(_require(args.qrels, "qrels file"))
    with stage("eval: metrics"):
        metrics = _metrics(args.metrics)
        report = evaluate(runs, qrels, metrics, args.gain, args.recall_fraction)
    with stage("eval: write report"):
        if args.out:
            write_report(args.out, report, args.summary)
    print("metric\tvalue")
    for m in metrics:
        print(f"{m}\t{report.means[m]:.4f}")
    return 0


# -- gradcheck --------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    with stage("gradcheck"):
        rows = gradcheck(args.seed, args.configs)
    lines = ["config\tloss\tscorer\tcontextualize\tmax_rel_error\tstatus"]
    for r in rows:
        lines.append(f"{r.config}\t{r.loss}\t{r.scorer}\t{'on' if r.contextualize else 'off'}\t"
                     f"{r.max_rel_error:.3e}\t{'pass' if r.passed else 'FAIL'}")
    _emit("\n".join(lines) + "\n", args.out)
    failed = sum(not r.passed for r in rows)
    if failed:
        print(f"mmlate: gradcheck: {failed} of {len(rows)} checks above tolerance", file=sys.stderr)
        return EXIT_FAILURE
    return 0


# -- experiment ---------------------------------------------------------------------------


def cmd_experiment(args) -> int:
    from .experiment import run_grid

    with stage("experiment: dataset"):
        if args.dataset:
            ds = read_dataset(_require(args.dataset, "dataset directory"))
        else:
            ds = generate(_synth_config(args))
    with stage("experiment: config"):
        base = _train_config(args)
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    with stage("experiment: grid"):
        grid = run_grid(ds, base, args.split, args.k, variants, _metrics(args.metrics), args.resamples)
    _emit(grid.table(), args.out)
    print(f"baseline\t{grid.baseline}", file=sys.stderr)
    return 0


# -- bench ------------------------------------------------------------------------------


def cmd_bench(args) -> int:
    from threadpoolctl import threadpool_limits

    from .tensors import MultimodalDocument, normalize_rows

    with stage("bench: build corpus"):
        rng = np.random.default_rng(args.seed)
        mods = ("vision", "audio", "ocr", "metadata")
        docs = []
        per = args.tokens // len(mods)
        for i in range(args.docs):
            rows = normalize_rows(rng.standard_normal((per * len(mods), args.dim)).astype(np.float32))
            docs.append(MultimodalDocument(f"d{i:06d}", {m: rows[j * per:(j + 1) * per] for j, m in enumerate(mods)}))
        index = build_index(docs, mods)
        query = normalize_rows(rng.standard_normal((args.query_tokens, args.dim)).astype(np.float32))
    with stage("bench: search"), threadpool_limits(limits=1):
        search(index, query, 10, args.scorer)  # warm-up (block plan)
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            search(index, query, 10, args.scorer)
            times.append(time.perf_counter() - t0)
    best = min(times)
    tokens = index.arena.shape[0]
    print("docs\ttokens\tdim\tquery_tokens\tseconds\ttokens_per_second")
    print(f"{len(index)}\t{tokens}\t{args.dim}\t{args.query_tokens}\t{best:.3f}\t{tokens / best:.0f}")
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmlate", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp, required=True):
        sp.add_argument("--seed", type=int, required=required)
        return sp

    s = seeded(sub.add_parser("synth", help="generate a synthetic multimodal corpus"))
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--doc-count", type=int)
    s.set_defaults(func=cmd_synth)

    def training_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--loss", choices=("infonce", "modpos", "modneg"))
        sp.add_argument("--scorer", choices=("li_mw", "li_context", "pooled"))
        sp.add_argument("--contextualize", type=_on_off)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--dim", type=int)

    t = seeded(sub.add_parser("train", help="train the toy encoder"))
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="per-step loss table")
    t.add_argument("--validate", action="store_true", help="report validation R@1 each epoch")
    training_flags(t)
    t.set_defaults(func=cmd_train)

    e = seeded(sub.add_parser("encode", help="embed one split of a dataset"), required=False)
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", help="trained encoder; untrained (needs --seed) when omitted")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--contextualize", type=_on_off)
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_encode)

    i = sub.add_parser("index", help="build an index from document embeddings")
    i.add_argument("--embeddings", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_index)

    q = sub.add_parser("search", help="rank documents for each query")
    q.add_argument("--index", required=True)
    q.add_argument("--queries", required=True)
    q.add_argument("--scorer", default="li_mw", choices=("li_mw", "li_context", "pooled"))
    q.add_argument("--fusion", default="none", choices=("none", "mean", "max", "rrf", "router"))
    q.add_argument("--k", type=int, default=10)
    q.add_argument("--k-rrf", type=float, default=fusion.DEFAULT_RRF_K)
    q.add_argument("--candidates", type=int, help="two-stage search: pooled shortlist size")
    q.add_argument("--routing", help="query_id<TAB>modality decisions for --fusion router")
    q.add_argument("--route-modality", help="route every query to this modality")
    q.add_argument("--out")
    q.set_defaults(func=cmd_search)

    v = sub.add_parser("eval", help="score a run file against qrels")
    v.add_argument("--run", required=True)
    v.add_argument("--qrels", required=True)
    v.add_argument("--metrics", default=",".join(DEFAULT_METRICS))
    v.add_argument("--gain", default="exp", choices=("exp", "linear"))
    v.add_argument("--recall-fraction", action="store_true")
    v.add_argument("--out", help="per-query table")
    v.add_argument("--summary", help="JSON summary (with --out)")
    v.set_defaults(func=cmd_eval)

    g = seeded(sub.add_parser("gradcheck", help="finite-difference check of all loss gradients"))
    g.add_argument("--configs", type=int, default=20)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    x = seeded(sub.add_parser("experiment", help="train variants and print the results grid"))
    x.add_argument("--dataset", help="dataset directory; generated from --seed when omitted")
    x.add_argument("--doc-count", type=int)
    x.add_argument("--split", default="test", choices=("val", "test"))
    x.add_argument("--variants", default="A,B,C,modpos,modneg")
    x.add_argument("--metrics", default=",".join(DEFAULT_METRICS))
    x.add_argument("--k", type=int, default=10)
    x.add_argument("--resamples", type=int, default=10000)
    x.add_argument("--out")
    training_flags(x)
    x.set_defaults(func=cmd_experiment)

    b = seeded(sub.add_parser("bench", help="time one exhaustive search"))
    b.add_argument("--docs", type=int, default=10000)
    b.add_argument("--tokens", type=int, default=300)
    b.add_argument("--dim", type=int, default=128)
    b.add_argument("--query-tokens", type=int, default=69)
    b.add_argument("--scorer", default="li_mw", choices=("li_mw", "li_context"))
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"mmlate: {exc.stage}: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
