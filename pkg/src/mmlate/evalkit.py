"""Retrieval metrics, modality-selection accuracy and significance testing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensors import Qrels

logger = logging.getLogger(__name__)


def _doc_ids(ranked) -> list[str]:
    if hasattr(ranked, "items") and not isinstance(ranked, Mapping):
        ranked = ranked.items
    return [x[0] if isinstance(x, tuple) else x for x in ranked]


def recall_at_k(ranked, grades: Mapping[str, int], k: int, fraction: bool = False) -> float:
    """Hit rate: 1.0 if any doc with grade >= 1 is in the top k.

    With ``fraction=True`` returns the share of relevant docs found instead.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = {d for d, g in grades.items() if g >= 1}
    if not relevant:
        raise ValueError("query has no relevant documents")
    top = _doc_ids(ranked)[:k]
    found = sum(1 for d in top if d in relevant)
    if fraction:
        return found / len(relevant)
    return 1.0 if found else 0.0


def ndcg_at_k(ranked, grades: Mapping[str, int], k: int = 10, gain: str = "exp") -> float:
    """nDCG with ``2**g - 1`` gains (``gain="linear"`` uses ``g``)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    g = (lambda x: 2.0**x - 1.0) if gain == "exp" else (lambda x: float(x))
    ideal = sorted((v for v in grades.values() if v > 0), reverse=True)[:k]
    if not ideal:
        raise ValueError("query has no positive grades")
    idcg = sum(g(v) / math.log2(r + 2) for r, v in enumerate(ideal))
    dcg = sum(g(grades.get(d, 0)) / math.log2(r + 2) for r, d in enumerate(_doc_ids(ranked)[:k]))
    return dcg / idcg


@dataclass
class MetricReport:
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def values(self, metric: str, query_ids: Sequence[str] | None = None) -> np.ndarray:
        ids = query_ids if query_ids is not None else sorted(self.per_query[metric])
        return np.array([self.per_query[metric][q] for q in ids])


def parse_metric(name: str) -> tuple[str, int]:
    """``"R@5"`` -> ``("recall", 5)``, ``"nDCG@10"`` -> ``("ndcg", 10)``."""
    kind, _, k = name.partition("@")
    kind = kind.lower()
    if kind in ("r", "recall"):
        return "recall", int(k)
    if kind == "ndcg":
        return "ndcg", int(k or 10)
    raise ValueError(f"unknown metric {name!r}")


DEFAULT_METRICS = ("R@1", "R@5", "R@10", "nDCG@10")


def evaluate(runs: Mapping[str, object], qrels: Qrels, metrics: Iterable[str] = DEFAULT_METRICS,
             gain: str = "exp", recall_fraction: bool = False) -> MetricReport:
    """Per-query metrics over ranked lists (``query_id -> ranking``).

    Queries missing from the qrels or without positive grades are skipped
    with a warning; queries with judgments but no run score 0.
    """
    metrics = list(metrics)
    judged = qrels.by_query()
    report = MetricReport(metadata={"gain": gain, "recall_fraction": recall_fraction, "metrics": metrics})
    for name in metrics:
        report.per_query[name] = {}
    skipped = 0
    for qid in sorted(set(runs) | set(judged)):
        grades = judged.get(qid)
        if not grades or not any(g > 0 for g in grades.values()):
            skipped += 1
            continue
        ranked = runs.get(qid, [])
        for name in metrics:
            kind, k = parse_metric(name)
            if kind == "recall":
                v = recall_at_k(ranked, grades, k, recall_fraction)
            else:
                v = ndcg_at_k(ranked, grades, k, gain)
            report.per_query[name][qid] = v
    if skipped:
        logger.warning("evaluate: %d quer(ies) without positive judgments excluded", skipped)
    for name in metrics:
        vals = list(report.per_query[name].values())
        report.means[name] = float(np.mean(vals)) if vals else float("nan")
    return report


def write_report(path, report: MetricReport, summary_path=None) -> None:
    """Tab-separated per-query table; optional JSON summary of the means."""
    metrics = list(report.per_query)
    qids = sorted({q for m in metrics for q in report.per_query[m]})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("query_id\t" + "\t".join(metrics) + "\n")
        for q in qids:
            fh.write(q + "\t" + "\t".join(f"{report.per_query[m].get(q, float('nan')):.6f}" for m in metrics) + "\n")
        fh.write("mean\t" + "\t".join(f"{report.means[m]:.6f}" for m in metrics) + "\n")
    if summary_path is not None:
        with open(summary_path, "w", encoding="utf-8") as fh:
            json.dump({"means": report.means, "queries": len(qids), **report.metadata}, fh, indent=2, sort_keys=True)


# -- modality selection --------------------------------------------------------


@dataclass
class ModalityAccuracy:
    per_modality: dict[str, float]
    counts: dict[str, int]
    macro: float
    micro: float

    @property
    def average(self) -> float:
        return self.macro


def modality_accuracy(labeled: Iterable[tuple[str, str]], modalities: Sequence[str]) -> ModalityAccuracy:
    """Accuracy from ``(target_modality, chosen_modality)`` pairs.

    ``macro`` averages per-class accuracies over the classes that occur;
    ``micro`` pools all queries.
    """
    hits: dict[str, int] = {}
    counts: dict[str, int] = {}
    for target, chosen in labeled:
        if target not in modalities:
            raise ValueError(f"label {target!r} outside declared modalities {list(modalities)}")
        counts[target] = counts.get(target, 0) + 1
        hits[target] = hits.get(target, 0) + int(chosen == target)
    if not counts:
        raise ValueError("no labeled queries")
    per = {m: hits[m] / counts[m] for m in modalities if m in counts}
    total = sum(counts.values())
    return ModalityAccuracy(per, counts, float(np.mean(list(per.values()))), sum(hits.values()) / total)


def index_modality_accuracy(queries, index, positives: Mapping[str, str]) -> ModalityAccuracy:
    """Score each labeled query against its positive document with LI_mw."""
    from .scoring import li_mw

    pairs = []
    for q in queries:
        if q.target_modality is None:
            continue
        doc = index.document(positives[q.query_id])
        pairs.append((q.target_modality, li_mw(q.embeddings, doc, index.modalities).chosen_modality))
    return modality_accuracy(pairs, index.modalities)


# -- significance -------------------------------------------------------------


def paired_bootstrap(a, b, resamples: int = 10000, seed: int = 0) -> float:
    """One-sided p-value: share of resamples where mean(a) <= mean(b).

    ``a`` and ``b`` are per-query values in the same order, or mappings
    keyed by query id (which must then cover the same queries).
    """
    if isinstance(a, Mapping) or isinstance(b, Mapping):
        if not (isinstance(a, Mapping) and isinstance(b, Mapping)) or set(a) != set(b):
            raise ValueError("paired bootstrap needs identical query sets")
        keys = sorted(a)
        a = [a[k] for k in keys]
        b = [b[k] for k in keys]
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("paired bootstrap needs two equal-length non-empty vectors")
    delta = a - b
    rng = np.random.default_rng(seed)
    n = delta.size
    worse = 0
    chunk = max(1, min(resamples, 2_000_000 // n))
    done = 0
    while done < resamples:
        m = min(chunk, resamples - done)
        idx = rng.integers(0, n, size=(m, n))
        means = delta[idx].mean(axis=1)
        worse += int(np.count_nonzero(means <= 0.0))
        done += m
    return worse / resamples
