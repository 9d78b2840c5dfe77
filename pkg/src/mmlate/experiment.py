"""Glue between the generator, encoder, index and metrics.

``run_grid`` reproduces the shape of a retrieval results table at desk
scale: one row per scorer/fusion/training configuration, R@1/5/10 and
nDCG@10 columns, and a paired bootstrap p-value against the strongest
baseline row.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence


from . import fusion
from .evalkit import DEFAULT_METRICS, MetricReport, evaluate, modality_accuracy, paired_bootstrap
from .index import CorpusIndex, RankedList, build_index, search
from .scoring import li_mw
from .synthgen import SynthDataset
from .tensors import EncodedQuery, Qrels
from .trainer import EncoderParams, TrainConfig, TrainExample, TrainHistory, encode_document, encode_query, fit

logger = logging.getLogger(__name__)


def train_examples(dataset: SynthDataset, split: str = "train") -> tuple[list[TrainExample], dict]:
    docs = {d.doc_id: d.modalities for d in dataset.docs_in(split)}
    ex = [TrainExample(q.features, q.doc_id, q.target_modality) for q in dataset.queries_in(split)]
    return ex, docs


@dataclass
class EncodedSplit:
    index: CorpusIndex
    queries: list[EncodedQuery]
    qrels: Qrels
    positives: dict[str, str]


def encode_split(params: EncoderParams, dataset: SynthDataset, split: str, contextualize: bool) -> EncodedSplit:
    docs = [encode_document(d, params, contextualize) for d in dataset.docs_in(split)]
    index = build_index(docs, dataset.config.modalities)
    queries = [encode_query(q.features, params, q.query_id, q.target_modality) for q in dataset.queries_in(split)]
    positives = {q.query_id: q.doc_id for q in dataset.queries_in(split)}
    return EncodedSplit(index, queries, dataset.qrels_in(split), positives)


def run_queries(index: CorpusIndex, queries: Iterable[EncodedQuery], scorer: str = "li_mw",
                k: int = 10) -> dict[str, RankedList]:
    return {q.query_id: search(index, q, k, scorer) for q in queries}


def split_accuracy(enc: EncodedSplit):
    pairs = []
    for q in enc.queries:
        if q.target_modality is not None:
            doc = enc.index.document(enc.positives[q.query_id])
            pairs.append((q.target_modality, li_mw(q.embeddings, doc, enc.index.modalities).chosen_modality))
    return modality_accuracy(pairs, enc.index.modalities)


def validation_recall(dataset: SynthDataset, split: str, scorer: str, contextualize: bool):
    def _validate(params: EncoderParams) -> float:
        enc = encode_split(params, dataset, split, contextualize)
        return evaluate(run_queries(enc.index, enc.queries, scorer, 1), enc.qrels, ["R@1"]).means["R@1"]

    return _validate


def train_on(dataset: SynthDataset, config: TrainConfig, validate: bool = False) -> tuple[EncoderParams, TrainHistory]:
    ex, docs = train_examples(dataset, "train")
    init = EncoderParams.init(dataset.config.feature_dim, config.dim, config.pad_count,
                              config.alpha if config.contextualize else 0.0, config.seed)
    val = validation_recall(dataset, "val", config.scorer, config.contextualize) if validate else None
    return fit(ex, docs, init, config, dataset.config.modalities, val)


def untrained_params(dataset: SynthDataset, config: TrainConfig) -> EncoderParams:
    return EncoderParams.init(dataset.config.feature_dim, config.dim, config.pad_count,
                              config.alpha if config.contextualize else 0.0, config.seed)


# -- results grid ----------------------------------------------------------------


@dataclass
class GridRow:
    name: str
    report: MetricReport
    p_value: float | None = None
    notes: str = ""


@dataclass
class GridResult:
    rows: list[GridRow] = field(default_factory=list)
    baseline: str | None = None
    metrics: tuple[str, ...] = DEFAULT_METRICS

    def row(self, name: str) -> GridRow:
        return next(r for r in self.rows if r.name == name)

    def table(self) -> str:
        head = ["system", *self.metrics, "p_vs_baseline"]
        lines = ["\t".join(head)]
        for r in self.rows:
            p = "-" if r.p_value is None else f"{r.p_value:.4f}"
            vals = [f"{100 * r.report.means[m]:.2f}" for m in self.metrics]
            lines.append("\t".join([r.name, *vals, p]))
        return "\n".join(lines) + "\n"


def fusion_runs(enc: EncodedSplit, k: int = 10) -> dict[str, dict[str, RankedList]]:
    """Fusion baselines over per-modality scores of one encoder.

    Pooled columns give each modality alone plus mean, max and RRF; LI
    columns give mean and RRF (max over LI columns is LI_mw itself).  The
    oracle router is added when every query carries a modality label.
    """
    out = {}
    table = fusion.score_table(enc.index, enc.queries, "pooled")
    for m in enc.index.modalities:
        out[f"pooled-{m}"] = fusion.fuse_router(table, fusion.fixed_routing(table, m), k)
    out["pooled-mean"] = fusion.fuse_mean(table, k)
    out["pooled-max"] = fusion.fuse_max(table, k, enc.index.modalities)
    out["pooled-rrf"] = fusion.fuse_rrf_table(table, k=k)
    labeled = [q for q in enc.queries if q.target_modality is not None]
    if len(labeled) == len(enc.queries):
        out["pooled-router(oracle)"] = fusion.fuse_router(table, fusion.oracle_routing(labeled), k)
    li = fusion.score_table(enc.index, enc.queries, "li")
    out["li-mean"] = fusion.fuse_mean(li, k)
    out["li-rrf"] = fusion.fuse_rrf_table(li, k=k)
    return out


def labeled_subset(enc: EncodedSplit) -> EncodedSplit:
    """Only the modality-targeted queries, with their judgments."""
    queries = [q for q in enc.queries if q.target_modality is not None]
    keep = {q.query_id for q in queries}
    qrels = Qrels({key: g for key, g in enc.qrels.entries.items() if key[0] in keep})
    return EncodedSplit(enc.index, queries, qrels, {q: enc.positives[q] for q in keep})


def run_grid(dataset: SynthDataset, base: TrainConfig, split: str = "test", k: int = 10,
             variants: Sequence[str] = ("A", "B", "C", "modpos", "modneg"),
             metrics: Sequence[str] = DEFAULT_METRICS, resamples: int = 10000) -> GridResult:
    """Train each variant on the train split and evaluate it on ``split``."""
    variant_cfg = {
        "A": dict(),
        "B": dict(contextualize=False),
        "C": dict(scorer="li_context"),
        "modpos": dict(loss="modpos"),
        "modneg": dict(loss="modneg"),
        "pooled-trained": dict(scorer="pooled"),
    }
    result = GridResult(metrics=tuple(metrics))
    trained: dict[str, tuple[EncoderParams, TrainConfig]] = {}
    for v in variants:
        cfg = dataclasses.replace(base, **variant_cfg[v])
        params, _ = train_on(dataset, cfg)
        trained[v] = (params, cfg)

    # baselines use the main (A) encoder when available; only fusion rows
    # compete for "strongest baseline"
    main_params, main_cfg = trained.get("A") or next(iter(trained.values()))
    enc = encode_split(main_params, dataset, split, main_cfg.contextualize)
    for name, runs in fusion_runs(enc, k).items():
        result.rows.append(GridRow(name, evaluate(runs, enc.qrels, metrics)))
    for scorer in ("pooled", "li_context"):
        result.rows.append(GridRow(f"A-eval-{scorer}", evaluate(run_queries(enc.index, enc.queries, scorer, k),
                                                               enc.qrels, metrics)))
    untrained = untrained_params(dataset, main_cfg)
    enc_u = encode_split(untrained, dataset, split, main_cfg.contextualize)
    result.rows.append(GridRow("untrained-li_mw", evaluate(run_queries(enc_u.index, enc_u.queries, "li_mw", k),
                                                          enc_u.qrels, metrics)))
    baseline_names = [r.name for r in result.rows if r.name.startswith(("pooled-", "li-"))]
    for v, (params, cfg) in trained.items():
        e = enc if v == "A" else encode_split(params, dataset, split, cfg.contextualize)
        scorer = cfg.scorer
        row = GridRow(f"{v}:{cfg.loss}/{scorer}/ctx-{'on' if cfg.contextualize else 'off'}",
                      evaluate(run_queries(e.index, e.queries, scorer, k), e.qrels, metrics))
        result.rows.append(row)

    # strongest baseline by nDCG@10
    key = "nDCG@10" if "nDCG@10" in metrics else metrics[-1]
    best = max((r for r in result.rows if r.name in baseline_names), key=lambda r: r.report.means[key])
    result.baseline = best.name
    qids = sorted(best.report.per_query[key])
    for r in result.rows:
        if r.name == best.name:
            continue
        r.p_value = paired_bootstrap(r.report.values(key, qids), best.report.values(key, qids), resamples, base.seed)
    return result
