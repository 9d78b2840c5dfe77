"""Late-interaction similarity kernels.

All kernels take unit-normalized float32 rows, accumulate in float64 and
return scores rounded to float32 (as Python floats).  Absent or empty
modalities score ``-inf`` so that the modality-wise max never selects them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensors import DEFAULT_MODALITIES, MultimodalDocument

DEFAULT_BLOCK = 1024
NEG_INF = float("-inf")


@dataclass(frozen=True)
class ScoreBreakdown:
    total: float
    per_modality: dict[str, float] = field(default_factory=dict)
    chosen_modality: str | None = None


def store(x: float) -> float:
    """Round a float64 accumulator to the float32 result precision."""
    return float(np.float32(x))


def _as_rows(x) -> np.ndarray:
    rows = getattr(x, "embeddings", x)
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ValueError(f"expected a (tokens, dim) matrix, got shape {rows.shape}")
    return rows


def _check_dims(query: np.ndarray, other: np.ndarray) -> None:
    if query.shape[1] != other.shape[1]:
        raise ValueError(f"dimension mismatch: query dim {query.shape[1]}, document dim {other.shape[1]}")


def maxsim_blocked(query, tokens, block_size: int = DEFAULT_BLOCK, out: np.ndarray | None = None) -> np.ndarray:
    """Per-query-token maximum similarity over ``tokens``.

    Document tokens are consumed ``block_size`` rows at a time; each block
    is promoted to float64, multiplied against the query and folded into the
    running maxima.  Passing ``out`` continues an earlier reduction.
    """
    q = _as_rows(query)
    t = _as_rows(tokens)
    _check_dims(q, t)
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    q64 = q.astype(np.float64, copy=False)
    if out is None:
        out = np.full(q.shape[0], -np.inf)
    for start in range(0, t.shape[0], block_size):
        block = t[start : start + block_size].astype(np.float64)
        np.maximum(out, (q64 @ block.T).max(axis=1), out=out)
    return out


def li_modality(query, modality_matrix) -> float:
    """Sum over query tokens of the best match inside one modality."""
    q = _as_rows(query)
    m = _as_rows(modality_matrix)
    _check_dims(q, m)
    if m.shape[0] == 0:
        return NEG_INF
    return store(np.sum(maxsim_blocked(q, m)))


def _ordered(doc: MultimodalDocument, order: Sequence[str] | None) -> list[str]:
    order = list(order) if order is not None else list(DEFAULT_MODALITIES)
    extra = [m for m in doc.modalities if m not in order]
    return [m for m in order if m in doc.modalities] + extra


def _token_maxima(q: np.ndarray, doc: MultimodalDocument, order) -> dict[str, np.ndarray]:
    maxima = {}
    for m in _ordered(doc, order):
        mat = _as_rows(doc.modalities[m])
        _check_dims(q, mat)
        if mat.shape[0]:
            maxima[m] = maxsim_blocked(q, mat)
    if not maxima:
        raise ValueError(f"document {doc.doc_id!r} has no non-empty modality")
    return maxima


def li_context(query, doc: MultimodalDocument, order: Sequence[str] | None = None) -> float:
    """LI over all document tokens from every modality together.

    Computed as the elementwise max of the per-modality token maxima, which
    is exactly the max over the concatenated matrix.
    """
    q = _as_rows(query)
    maxima = list(_token_maxima(q, doc, order).values())
    best = maxima[0].copy()
    for m in maxima[1:]:
        np.maximum(best, m, out=best)
    return store(np.sum(best))


def li_mw(query, doc: MultimodalDocument, order: Sequence[str] | None = None) -> ScoreBreakdown:
    """Modality-wise LI: score each modality separately and keep the best.

    Ties go to the modality that comes first in the declared order.
    """
    q = _as_rows(query)
    per = {m: store(np.sum(v)) for m, v in _token_maxima(q, doc, order).items()}
    for m in _ordered(doc, order):
        per.setdefault(m, NEG_INF)
    chosen = None
    total = NEG_INF
    for m in _ordered(doc, order):
        if per[m] > total:
            total, chosen = per[m], m
    return ScoreBreakdown(total, {m: per[m] for m in _ordered(doc, order)}, chosen)


def li_mw_upper_bound_check(query, doc: MultimodalDocument, order=None) -> tuple[float, float]:
    """Return ``(li_mw, li_context)`` after asserting the first never exceeds the second."""
    mw = li_mw(query, doc, order).total
    ctx = li_context(query, doc, order)
    if mw > ctx:
        raise AssertionError(f"li_mw {mw} exceeds li_context {ctx} for {doc.doc_id!r}")
    return mw, ctx


def pool_rows(rows: np.ndarray, pooling: str = "mean") -> np.ndarray:
    """Pool rows to one unit vector (float64); a zero pool stays zero."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        raise ValueError("cannot pool an empty matrix")
    if pooling == "mean":
        v = rows.mean(axis=0)
    elif pooling == "last":
        v = rows[-1].copy()
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    n = np.sqrt(v @ v)
    return v / n if n > 0 else v


def pooled_document_vector(doc: MultimodalDocument, pooling: str = "mean", order=None) -> np.ndarray:
    parts = [doc.modalities[m] for m in _ordered(doc, order) if doc.modalities[m].shape[0]]
    if not parts:
        raise ValueError(f"document {doc.doc_id!r} has no non-empty modality")
    return pool_rows(np.concatenate(parts, axis=0), pooling)


def pooled_similarity(query, doc: MultimodalDocument, pooling: str = "mean", order=None) -> float:
    """Cosine between the pooled query and the pooled concatenated document."""
    q = _as_rows(query)
    _check_dims(q, next(iter(doc.modalities.values())))
    return store(pool_rows(q, pooling) @ pooled_document_vector(doc, pooling, order))


def score(query, doc: MultimodalDocument, scorer: str = "li_mw", order=None, pooling: str = "mean") -> float:
    if scorer == "li_mw":
        return li_mw(query, doc, order).total
    if scorer == "li_context":
        return li_context(query, doc, order)
    if scorer == "pooled":
        return pooled_similarity(query, doc, pooling, order)
    raise ValueError(f"unknown scorer {scorer!r}")


SCORERS = ("li_mw", "li_context", "pooled")
