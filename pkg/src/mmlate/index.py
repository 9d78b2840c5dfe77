"""Immutable corpus index with exhaustive and two-stage search."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scoring import DEFAULT_BLOCK, SCORERS, _as_rows, pool_rows, pooled_document_vector
from .tensors import (
    DEFAULT_MODALITIES,
    FormatError,
    MultimodalDocument,
    decode_container,
    encode_container,
)

logger = logging.getLogger(__name__)

FOOTER_MAGIC = b"CLMI"


@dataclass
class RankedList:
    query_id: str
    items: list[tuple[str, float]] = field(default_factory=list)
    # doc_id -> modality that produced the score (modality-wise scorers only)
    chosen: dict[str, str] | None = None

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.items]


def rank_items(scores: dict[str, float], k: int | None = None) -> list[tuple[str, float]]:
    """Sort by descending score, ties by doc id ascending."""
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0].encode("utf-8")))
    return ordered if k is None else ordered[:k]


class CorpusIndex:
    """Documents laid out in one contiguous float32 token arena.

    Each (document, modality) pair with at least one token is a segment of
    the arena; segments are ordered by document, then by declared modality.
    """

    def __init__(self, documents: Sequence[MultimodalDocument], modalities: Sequence[str] | None = None):
        if not documents:
            raise ValueError("cannot build an index from an empty document list")
        if modalities is None:
            present = {m for d in documents for m in d.modalities}
            modalities = [m for m in DEFAULT_MODALITIES if m in present]
            modalities += sorted(present - set(modalities))
        self.modalities: tuple[str, ...] = tuple(modalities)
        self.dim = documents[0].dim
        seen: set[str] = set()
        for d in documents:
            if d.doc_id in seen:
                raise ValueError(f"duplicate doc_id {d.doc_id!r}")
            seen.add(d.doc_id)
            if d.dim != self.dim:
                raise ValueError(f"document {d.doc_id!r} has dim {d.dim}, index dim {self.dim}")
            unknown = set(d.modalities) - set(self.modalities)
            if unknown:
                raise ValueError(f"document {d.doc_id!r} has undeclared modalities {sorted(unknown)}")
            if not any(m.shape[0] for m in d.modalities.values()):
                raise ValueError(f"document {d.doc_id!r} has no tokens")

        self.documents = list(documents)
        self.doc_ids = [d.doc_id for d in documents]
        self._pos = {d: i for i, d in enumerate(self.doc_ids)}
        id_order = sorted(range(len(documents)), key=lambda i: self.doc_ids[i].encode("utf-8"))
        self._id_rank = np.empty(len(documents), dtype=np.int64)
        self._id_rank[id_order] = np.arange(len(documents))

        seg_doc, seg_mod, seg_start, seg_len = [], [], [], []
        parts = []
        offset = 0
        doc_first_seg = np.zeros(len(documents) + 1, dtype=np.int64)
        for i, d in enumerate(documents):
            doc_first_seg[i] = len(seg_doc)
            for mi, m in enumerate(self.modalities):
                mat = d.modalities.get(m)
                if mat is None or mat.shape[0] == 0:
                    continue
                seg_doc.append(i)
                seg_mod.append(mi)
                seg_start.append(offset)
                seg_len.append(mat.shape[0])
                parts.append(np.asarray(mat, dtype=np.float32))
                offset += mat.shape[0]
        doc_first_seg[-1] = len(seg_doc)
        self.arena = np.ascontiguousarray(np.concatenate(parts, axis=0))
        self.seg_doc = np.asarray(seg_doc, dtype=np.int64)
        self.seg_mod = np.asarray(seg_mod, dtype=np.int64)
        self.seg_start = np.asarray(seg_start, dtype=np.int64)
        self.seg_len = np.asarray(seg_len, dtype=np.int64)
        self.doc_first_seg = doc_first_seg
        self._pooled: dict[str, np.ndarray] = {}
        self._plans: dict = {}
        self._all_layout = None

    def __len__(self) -> int:
        return len(self.documents)

    def document(self, doc_id: str) -> MultimodalDocument:
        return self.documents[self._pos[doc_id]]

    def pooled_matrix(self, pooling: str = "mean") -> np.ndarray:
        if pooling not in self._pooled:
            self._pooled[pooling] = np.stack(
                [pooled_document_vector(d, pooling, self.modalities) for d in self.documents]
            )
        return self._pooled[pooling]

    # -- scoring ------------------------------------------------------------

    def _segments(self, doc_indices: np.ndarray | None) -> np.ndarray:
        if doc_indices is None:
            return np.arange(len(self.seg_doc))
        return np.concatenate([np.arange(self.doc_first_seg[i], self.doc_first_seg[i + 1]) for i in doc_indices])

    def _plan(self, segs: np.ndarray, block_tokens: int) -> list[tuple]:
        """Group consecutive segments into blocks of at most ``block_tokens`` rows.

        Each entry is ``(col_start, col_end, arena_rows, local_starts)``;
        ``arena_rows`` is a slice for contiguous runs, else an index array.
        A single segment longer than the block gets ``local_starts=None`` and
        is reduced in pieces.
        """
        plan = []
        lens = self.seg_len[segs]
        starts = self.seg_start[segs]
        col = 0
        n = len(segs)
        while col < n:
            end, total = col + 1, int(lens[col])
            while end < n and total + lens[end] <= block_tokens:
                total += int(lens[end])
                end += 1
            st, ln = starts[col:end], lens[col:end]
            if end - col == 1 and total > block_tokens:
                plan.append((col, end, slice(int(st[0]), int(st[0]) + total), None))
            else:
                if np.all(st[1:] == st[:-1] + ln[:-1]):
                    rows = slice(int(st[0]), int(st[0]) + total)
                else:
                    rows = np.concatenate([np.arange(a, a + k) for a, k in zip(st, ln)])
                plan.append((col, end, rows, np.concatenate(([0], np.cumsum(ln)[:-1]))))
            col = end
        return plan

    def token_maxima(self, query, doc_indices: np.ndarray | None = None,
                     block_tokens: int = DEFAULT_BLOCK) -> np.ndarray:
        """Per-query-token maxima for every segment of the given documents.

        Returns a ``(n_query_tokens, n_segments)`` float64 matrix whose
        columns follow the segments of ``doc_indices`` (all documents when
        ``None``) in order.
        """
        q = _as_rows(query)
        if q.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: query dim {q.shape[1]}, index dim {self.dim}")
        q64 = q.astype(np.float64)
        if doc_indices is None:
            key = ("all", block_tokens)
            if key not in self._plans:
                self._plans[key] = self._plan(self._segments(None), block_tokens)
            plan, nseg = self._plans[key], len(self.seg_doc)
        else:
            segs = self._segments(doc_indices)
            plan, nseg = self._plan(segs, block_tokens), len(segs)
        out = np.empty((q.shape[0], nseg))
        for col, end, rows, local in plan:
            block = self.arena[rows]
            if local is None:
                running = np.full(q.shape[0], -np.inf)
                for start in range(0, block.shape[0], block_tokens):
                    b = block[start : start + block_tokens].astype(np.float64)
                    np.maximum(running, (q64 @ b.T).max(axis=1), out=running)
                out[:, col] = running
            else:
                out[:, col:end] = np.maximum.reduceat(q64 @ block.astype(np.float64).T, local, axis=1)
        return out

    def _layout(self, doc_indices: np.ndarray | None):
        """(segment ids, segments per doc, doc position of each segment)."""
        if doc_indices is None:
            if self._all_layout is None:
                counts = np.diff(self.doc_first_seg)
                self._all_layout = (np.arange(len(self.seg_doc)), counts, self.seg_doc)
            return self._all_layout
        counts = self.doc_first_seg[doc_indices + 1] - self.doc_first_seg[doc_indices]
        return self._segments(doc_indices), counts, np.repeat(np.arange(len(doc_indices)), counts)

    def score_documents(self, query, doc_indices=None, scorer: str = "li_mw", pooling: str = "mean"):
        """Scores (float32-rounded) and chosen modality indices for documents.

        ``chosen`` is -1 for scorers without a modality choice.
        """
        if doc_indices is not None:
            doc_indices = np.asarray(doc_indices, dtype=np.int64)
        n = len(self) if doc_indices is None else len(doc_indices)
        chosen = np.full(n, -1, dtype=np.int64)
        if scorer == "pooled":
            u = pool_rows(_as_rows(query), pooling)
            mat = self.pooled_matrix(pooling)
            sims = (mat if doc_indices is None else mat[doc_indices]) @ u
            return sims.astype(np.float32).astype(np.float64), chosen
        if scorer not in SCORERS:
            raise ValueError(f"unknown scorer {scorer!r}")
        maxima = self.token_maxima(query, doc_indices)
        seg_ids, counts, doc_of_col = self._layout(doc_indices)
        first = np.concatenate(([0], np.cumsum(counts)[:-1]))
        if scorer == "li_context":
            per_doc = np.maximum.reduceat(maxima, first, axis=1)
            sums = np.ascontiguousarray(per_doc.T).sum(axis=1)
            return sums.astype(np.float32).astype(np.float64), chosen
        seg_scores = np.ascontiguousarray(maxima.T).sum(axis=1).astype(np.float32).astype(np.float64)
        scores = np.maximum.reduceat(seg_scores, first)
        # earliest segment attaining the max; segments are in declared order
        cols = np.flatnonzero(seg_scores == scores[doc_of_col])[::-1]
        firsts = np.empty(n, dtype=np.int64)
        firsts[doc_of_col[cols]] = cols
        return scores, self.seg_mod[seg_ids[firsts]]

    def modality_scores(self, query, doc_indices=None) -> np.ndarray:
        """Per-modality LI scores, shape ``(n_docs, n_modalities)``; absent = -inf."""
        if doc_indices is not None:
            doc_indices = np.asarray(doc_indices, dtype=np.int64)
        n = len(self) if doc_indices is None else len(doc_indices)
        maxima = self.token_maxima(query, doc_indices)
        seg_ids, _, doc_of_col = self._layout(doc_indices)
        out = np.full((n, len(self.modalities)), -np.inf)
        out[doc_of_col, self.seg_mod[seg_ids]] = np.ascontiguousarray(maxima.T).sum(axis=1).astype(np.float32)
        return out

    def order(self, scores: np.ndarray, doc_indices: np.ndarray) -> np.ndarray:
        """Positions into ``doc_indices`` sorted by score desc, then doc id."""
        return np.lexsort((self._id_rank[doc_indices], -scores))


def build_index(documents: Sequence[MultimodalDocument], modalities: Sequence[str] | None = None) -> CorpusIndex:
    return CorpusIndex(documents, modalities)


def _query_parts(query, query_id):
    qid = getattr(query, "query_id", None) if query_id is None else query_id
    return _as_rows(query), (qid if qid is not None else "q")


def _ranked(index: CorpusIndex, qid, doc_indices, scores, chosen, k) -> RankedList:
    order = index.order(scores, doc_indices)[:k]
    items = [(index.doc_ids[doc_indices[p]], float(scores[p])) for p in order]
    chosen_map = None
    if (chosen >= 0).any():
        chosen_map = {index.doc_ids[doc_indices[p]]: index.modalities[chosen[p]] for p in order}
    return RankedList(qid, items, chosen_map)


def search(index: CorpusIndex, query, k: int = 10, scorer: str = "li_mw", query_id: str | None = None,
           pooling: str = "mean") -> RankedList:
    """Exhaustive top-k search; ``k`` beyond the corpus size returns everything."""
    if len(index) == 0:
        raise ValueError("empty index")
    if k < 1:
        raise ValueError("k must be >= 1")
    rows, qid = _query_parts(query, query_id)
    scores, chosen = index.score_documents(rows, None, scorer, pooling)
    return _ranked(index, qid, np.arange(len(index)), scores, chosen, k)


def search_prefiltered(index: CorpusIndex, query, k: int, candidate_count: int, scorer: str = "li_mw",
                       query_id: str | None = None) -> RankedList:
    """Mean-pooled cosine shortlist of ``candidate_count`` docs, then exact rerank."""
    if candidate_count < k:
        raise ValueError(f"candidate_count {candidate_count} < k {k}")
    rows, qid = _query_parts(query, query_id)
    docs = np.arange(len(index))
    pooled, _ = index.score_documents(rows, None, "pooled", "mean")
    shortlist = np.sort(index.order(pooled, docs)[:candidate_count])
    if len(shortlist) == len(index):
        # every document survives: identical computation to exhaustive search
        scores, chosen = index.score_documents(rows, None, scorer)
    else:
        scores, chosen = index.score_documents(rows, shortlist, scorer)
    return _ranked(index, qid, shortlist, scores, chosen, k)


# -- persistence -------------------------------------------------------------


def save_index(path, index: CorpusIndex) -> None:
    body = encode_container(index.documents, index.modalities, index.dim)
    footer = bytearray(FOOTER_MAGIC)
    footer += struct.pack("<Q", len(index.doc_ids))
    for d in index.doc_ids:
        raw = d.encode("utf-8")
        footer += struct.pack("<I", len(raw)) + raw
    footer += struct.pack("<Q", len(body))
    Path(path).write_bytes(body + bytes(footer))


def load_index(path) -> CorpusIndex:
    buf = Path(path).read_bytes()
    c = decode_container(buf)
    if c.features:
        raise FormatError("bad_magic", "index file holds raw features, not embeddings")
    pos = c.end
    if buf[pos : pos + 4] != FOOTER_MAGIC:
        raise FormatError("bad_footer", "missing doc-id footer")
    pos += 4
    if len(buf) < pos + 8:
        raise FormatError("truncated", "footer truncated")
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    ids = []
    for _ in range(n):
        if len(buf) < pos + 4:
            raise FormatError("truncated", "footer truncated")
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + ln:
            raise FormatError("truncated", "footer truncated")
        ids.append(buf[pos : pos + ln].decode("utf-8"))
        pos += ln
    if len(buf) != pos + 8 or struct.unpack_from("<Q", buf, pos)[0] != c.end:
        raise FormatError("bad_footer", "footer offset does not match payload")
    if ids != [d.doc_id for d in c.documents]:
        raise FormatError("bad_footer", "footer doc-id table disagrees with payload")
    return CorpusIndex(c.documents, c.modalities)
