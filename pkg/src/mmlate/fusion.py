"""Per-modality score aggregation baselines.

A score table maps ``query_id -> modality -> doc_id -> score``.  Missing
entries are skipped by the mean and count as ``-inf`` for the max.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .index import CorpusIndex, RankedList, rank_items
from .scoring import pool_rows
from .tensors import EncodedQuery, FormatError

logger = logging.getLogger(__name__)

ScoreTable = dict[str, dict[str, dict[str, float]]]

DEFAULT_RRF_K = 60.0


def _doc_entries(columns: Mapping[str, Mapping[str, float]]) -> dict[str, list[tuple[str, float]]]:
    per_doc: dict[str, list[tuple[str, float]]] = {}
    for modality, col in columns.items():
        for doc_id, s in col.items():
            if s is None or (isinstance(s, float) and math.isinf(s) and s < 0):
                continue
            per_doc.setdefault(doc_id, []).append((modality, s))
    return per_doc


def _all_docs(columns) -> set[str]:
    return {d for col in columns.values() for d in col}


def fuse_mean(table: ScoreTable, k: int | None = None) -> dict[str, RankedList]:
    """Average each document's scores over the modalities it has."""
    if not table:
        raise ValueError("empty score table")
    out = {}
    for qid, columns in table.items():
        per_doc = _doc_entries(columns)
        missing = _all_docs(columns) - set(per_doc)
        if missing:
            raise ValueError(f"query {qid!r}: documents with no modality scores: {sorted(missing)[:5]}")
        scores = {d: float(np.mean([s for _, s in e])) for d, e in per_doc.items()}
        out[qid] = RankedList(qid, rank_items(scores, k))
    return out


def fuse_max(table: ScoreTable, k: int | None = None, order: Sequence[str] | None = None) -> dict[str, RankedList]:
    """Keep each document's best modality score; the argmax is recorded in ``chosen``."""
    if not table:
        raise ValueError("empty score table")
    out = {}
    for qid, columns in table.items():
        per_doc = _doc_entries(columns)
        missing = _all_docs(columns) - set(per_doc)
        if missing:
            raise ValueError(f"query {qid!r}: documents with no modality scores: {sorted(missing)[:5]}")
        rank_of = {m: i for i, m in enumerate(order or list(columns))}
        scores, chosen = {}, {}
        for d, entries in per_doc.items():
            entries = sorted(entries, key=lambda e: rank_of.get(e[0], len(rank_of)))
            best_m, best = entries[0]
            for m, s in entries[1:]:
                if s > best:
                    best_m, best = m, s
            scores[d], chosen[d] = best, best_m
        items = rank_items(scores, k)
        out[qid] = RankedList(qid, items, {d: chosen[d] for d, _ in items})
    return out


def fuse_rrf(lists: Iterable[RankedList], k_rrf: float = DEFAULT_RRF_K, k: int | None = None,
             query_id: str | None = None) -> RankedList:
    """Reciprocal-rank fusion: sum of ``1 / (k_rrf + rank)`` with rank from 1."""
    if k_rrf <= 0:
        raise ValueError("k_rrf must be > 0")
    scores: dict[str, float] = {}
    qid = query_id
    for rl in lists:
        qid = qid if qid is not None else rl.query_id
        for rank, doc_id in enumerate(rl.doc_ids, start=1):
            scores[doc_id] = scores.get(doc_id, 0.0) + 1.0 / (k_rrf + rank)
    return RankedList(qid if qid is not None else "q", rank_items(scores, k))


def fuse_rrf_table(table: ScoreTable, k_rrf: float = DEFAULT_RRF_K, k: int | None = None) -> dict[str, RankedList]:
    """RRF over the per-modality rankings induced by a score table."""
    out = {}
    for qid, columns in table.items():
        lists = []
        for m, col in columns.items():
            finite = {d: s for d, s in col.items() if not (math.isinf(s) and s < 0)}
            lists.append(RankedList(qid, rank_items(finite)))
        out[qid] = fuse_rrf(lists, k_rrf, k, qid)
    return out


def fuse_router(table: ScoreTable, decisions: Mapping[str, str] | Callable[[str], str],
                k: int | None = None, modalities: Sequence[str] | None = None) -> dict[str, RankedList]:
    """Rank each query by the single modality it is routed to."""
    out = {}
    for qid, columns in table.items():
        m = decisions(qid) if callable(decisions) else decisions.get(qid)
        if m is None:
            raise ValueError(f"no routing decision for query {qid!r}")
        declared = modalities if modalities is not None else list(columns)
        if m not in declared:
            raise ValueError(f"query {qid!r} routed to unknown modality {m!r}")
        col = columns.get(m, {})
        finite = {d: s for d, s in col.items() if not (math.isinf(s) and s < 0)}
        out[qid] = RankedList(qid, rank_items(finite, k))
    return out


# -- routing sources ---------------------------------------------------------


def oracle_routing(queries: Iterable[EncodedQuery]) -> dict[str, str]:
    """Route every labeled query to its target modality."""
    out = {}
    for q in queries:
        if q.target_modality is None:
            raise ValueError(f"query {q.query_id!r} has no target modality label")
        out[q.query_id] = q.target_modality
    return out


def fixed_routing(query_ids: Iterable[str], modality: str) -> dict[str, str]:
    return {q: modality for q in query_ids}


def random_routing(query_ids: Iterable[str], modalities: Sequence[str], seed: int) -> dict[str, str]:
    rng = np.random.default_rng(seed)
    ids = list(query_ids)
    picks = rng.integers(0, len(modalities), size=len(ids))
    return {q: modalities[i] for q, i in zip(ids, picks)}


def read_routing(path, modalities: Sequence[str]) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError("malformed_line", f"line {lineno}: expected query_id<TAB>modality")
            qid, m = parts
            if m not in modalities:
                raise FormatError("malformed_line", f"line {lineno}: unknown modality {m!r}")
            out[qid] = m
    return out


def write_routing(path, decisions: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, m in decisions.items():
            fh.write(f"{qid}\t{m}\n")


# -- score tables from an index ----------------------------------------------


def score_table(index: CorpusIndex, queries: Iterable[EncodedQuery], per_modality: str = "pooled",
                pooling: str = "mean") -> ScoreTable:
    """Per-modality similarities for every (query, document) pair.

    ``per_modality="pooled"`` gives a single-vector cosine per modality (the
    usual setting for fusion baselines); ``"li"`` uses per-modality LI.
    """
    table: ScoreTable = {}
    if per_modality == "pooled":
        vecs = {m: {} for m in index.modalities}
        for d in index.documents:
            for m, mat in d.modalities.items():
                if mat.shape[0]:
                    vecs[m][d.doc_id] = pool_rows(mat, pooling)
        mats = {
            m: (list(v), np.stack(list(v.values())) if v else np.zeros((0, index.dim)))
            for m, v in vecs.items()
        }
        for q in queries:
            u = pool_rows(q.embeddings, pooling)
            cols = {}
            for m, (ids, mat) in mats.items():
                sims = (mat @ u).astype(np.float32)
                cols[m] = {d: float(s) for d, s in zip(ids, sims)}
            table[q.query_id] = cols
    elif per_modality == "li":
        for q in queries:
            scores = index.modality_scores(q.embeddings)
            cols = {}
            for mi, m in enumerate(index.modalities):
                cols[m] = {d: float(scores[i, mi]) for i, d in enumerate(index.doc_ids) if np.isfinite(scores[i, mi])}
            table[q.query_id] = cols
    else:
        raise ValueError(f"unknown per-modality scorer {per_modality!r}")
    return table


FUSIONS = ("none", "mean", "max", "rrf", "router")
