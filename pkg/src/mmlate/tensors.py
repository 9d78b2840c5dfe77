"""Core numeric types and file formats.

Embeddings are plain ``numpy`` float32 arrays of shape ``(tokens, dim)``.
A document maps modality names to such arrays; queries carry a single
matrix.  The binary container stores either unit-normalized embeddings
(magic ``CLMR``) or raw token features (magic ``CLMF``).
"""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_MODALITIES: tuple[str, ...] = ("vision", "audio", "ocr", "metadata")
MAX_QUERY_TOKENS = 64

MAGIC_EMBEDDINGS = b"CLMR"
MAGIC_FEATURES = b"CLMF"
FORMAT_VERSION = 1


class FormatError(Exception):
    """Raised when a file cannot be decoded.

    ``code`` is a short stable identifier: ``bad_magic``, ``bad_version``,
    ``truncated``, ``dim_mismatch``, ``trailing_bytes``, ``bad_footer``,
    ``malformed_line``, ``negative_grade``, ``duplicate_entry``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultimodalDocument:
    doc_id: str
    modalities: dict[str, np.ndarray]
    raw_features: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if not self.modalities:
            raise ValueError(f"document {self.doc_id!r} has no modalities")
        dims = {m.shape[1] for m in self.modalities.values()}
        if len(dims) != 1:
            raise ValueError(f"document {self.doc_id!r} mixes dims {sorted(dims)}")

    @property
    def dim(self) -> int:
        return next(iter(self.modalities.values())).shape[1]

    @property
    def token_count(self) -> int:
        return sum(m.shape[0] for m in self.modalities.values())

    def concatenated(self, order: Sequence[str] | None = None) -> np.ndarray:
        """All modality rows stacked in declared order (absent ones skipped)."""
        order = order or _present_order(self.modalities)
        parts = [self.modalities[m] for m in order if m in self.modalities]
        return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class EncodedQuery:
    query_id: str
    embeddings: np.ndarray
    target_modality: str | None = None
    raw_features: np.ndarray | None = None

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError(f"query {self.query_id!r} needs at least one row")


@dataclass
class Qrels:
    """Graded judgments; an absent pair has grade 0."""

    entries: dict[tuple[str, str], int] = field(default_factory=dict)

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.entries.get((query_id, doc_id), 0)

    def for_query(self, query_id: str) -> dict[str, int]:
        return {d: g for (q, d), g in self.entries.items() if q == query_id}

    def by_query(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (q, d), g in self.entries.items():
            out.setdefault(q, {})[d] = g
        return out

    def query_ids(self) -> list[str]:
        return sorted({q for q, _ in self.entries})

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, Qrels) and self.entries == other.entries


def _present_order(modalities: Mapping[str, np.ndarray]) -> list[str]:
    known = [m for m in DEFAULT_MODALITIES if m in modalities]
    extra = [m for m in modalities if m not in DEFAULT_MODALITIES]
    return known + extra


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def normalize_rows(matrix: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Divide each row by its L2 norm.

    Zero-norm rows stay zero (they then contribute 0 similarity instead of
    NaN); the number of such rows is logged as a warning.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("matrix contains non-finite values")
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = norms == 0.0
    if zero.any():
        logger.warning("normalize_rows: %d zero-norm row(s) left as zeros", int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    return (x / safe[:, None]).astype(dtype)


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                "truncated", f"needed {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def encode_container(
    documents: Sequence[MultimodalDocument],
    modalities: Sequence[str] | None = None,
    dim: int | None = None,
    features: bool = False,
) -> bytes:
    """Serialize documents to the little-endian container layout."""
    if modalities is None:
        seen: dict[str, None] = {}
        for d in documents:
            for m in _present_order(d.modalities):
                seen.setdefault(m, None)
        modalities = _present_order(dict.fromkeys(seen))
    modalities = list(modalities)
    if len(modalities) > 8:
        raise ValueError("the modality bitmap holds at most 8 modalities")
    if dim is None:
        dim = documents[0].dim if documents else 0

    out = io.BytesIO()
    out.write(MAGIC_FEATURES if features else MAGIC_EMBEDDINGS)
    out.write(struct.pack("<II", FORMAT_VERSION, dim))
    out.write(struct.pack("<B", len(modalities)))
    for m in modalities:
        raw = m.encode("utf-8")
        out.write(struct.pack("<B", len(raw)) + raw)
    out.write(struct.pack("<Q", len(documents)))
    for doc in documents:
        unknown = set(doc.modalities) - set(modalities)
        if unknown:
            raise ValueError(f"document {doc.doc_id!r} has undeclared modalities {sorted(unknown)}")
        if doc.dim != dim:
            raise FormatError("dim_mismatch", f"document {doc.doc_id!r} has dim {doc.dim}, file dim {dim}")
        out.write(_pack_str(doc.doc_id))
        bitmap = 0
        for i, m in enumerate(modalities):
            if m in doc.modalities:
                bitmap |= 1 << i
        out.write(struct.pack("<B", bitmap))
        for m in modalities:
            if m in doc.modalities:
                mat = np.ascontiguousarray(doc.modalities[m], dtype="<f4")
                out.write(struct.pack("<I", mat.shape[0]))
                out.write(mat.tobytes())
    return out.getvalue()


@dataclass
class Container:
    features: bool
    dim: int
    modalities: list[str]
    documents: list[MultimodalDocument]
    end: int


def decode_container(buf: bytes, expect_dim: int | None = None) -> Container:
    r = _Reader(buf)
    magic = r.take(4)
    if magic not in (MAGIC_EMBEDDINGS, MAGIC_FEATURES):
        raise FormatError("bad_magic", f"unknown magic {magic!r}")
    version, dim = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError("bad_version", f"format version {version}, expected {FORMAT_VERSION}")
    if expect_dim is not None and dim != expect_dim:
        raise FormatError("dim_mismatch", f"file dim {dim}, expected {expect_dim}")
    (n_mod,) = r.unpack("<B")
    modalities = []
    for _ in range(n_mod):
        (n,) = r.unpack("<B")
        modalities.append(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<Q")
    docs = []
    for _ in range(count):
        doc_id = r.string()
        (bitmap,) = r.unpack("<B")
        if bitmap >> n_mod:
            raise FormatError("bad_magic", f"document {doc_id!r} bitmap names undeclared modalities")
        mats = {}
        for i, m in enumerate(modalities):
            if bitmap & (1 << i):
                (rows,) = r.unpack("<I")
                data = r.take(rows * dim * 4)
                mats[m] = np.frombuffer(data, dtype="<f4").reshape(rows, dim).astype(np.float32)
        docs.append(MultimodalDocument(doc_id, mats))
    return Container(magic == MAGIC_FEATURES, dim, modalities, docs, r.pos)


def write_embeddings(
    path,
    documents: Sequence[MultimodalDocument],
    modalities: Sequence[str] | None = None,
    dim: int | None = None,
    features: bool = False,
) -> None:
    Path(path).write_bytes(encode_container(documents, modalities, dim, features))


def read_container(path, expect_dim: int | None = None) -> Container:
    buf = Path(path).read_bytes()
    c = decode_container(buf, expect_dim)
    if c.end != len(buf):
        raise FormatError("trailing_bytes", f"{len(buf) - c.end} unexpected bytes after payload")
    return c


def read_embeddings(path, expect_dim: int | None = None) -> list[MultimodalDocument]:
    c = read_container(path, expect_dim)
    if c.features:
        raise FormatError("not_embeddings", f"{path} holds raw features, not embeddings")
    return c.documents


# Queries travel in the same container: one "document" per query with a
# single modality named ``query``.
QUERY_MODALITY = "query"


def queries_to_documents(queries: Iterable[EncodedQuery], raw: bool = False) -> list[MultimodalDocument]:
    docs = []
    for q in queries:
        mat = q.raw_features if raw else q.embeddings
        docs.append(MultimodalDocument(q.query_id, {QUERY_MODALITY: mat}))
    return docs


def write_queries(path, queries: Sequence[EncodedQuery], raw: bool = False) -> None:
    docs = queries_to_documents(queries, raw)
    write_embeddings(path, docs, [QUERY_MODALITY], features=raw)


def read_queries(path, labels: Mapping[str, str | None] | None = None) -> list[EncodedQuery]:
    c = read_container(path)
    labels = labels or {}
    out = []
    for d in c.documents:
        mat = d.modalities[QUERY_MODALITY]
        if c.features:
            out.append(EncodedQuery(d.doc_id, mat, labels.get(d.doc_id), raw_features=mat))
        else:
            out.append(EncodedQuery(d.doc_id, mat, labels.get(d.doc_id)))
    return out


# ---------------------------------------------------------------------------
# Tab-separated formats
# ---------------------------------------------------------------------------


def parse_qrels(lines: Iterable[str]) -> Qrels:
    entries: dict[tuple[str, str], int] = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError("malformed_line", f"line {lineno}: expected 3 tab-separated fields")
        q, d, g = parts
        try:
            grade = int(g)
        except ValueError:
            raise FormatError("malformed_line", f"line {lineno}: grade {g!r} is not an integer") from None
        if grade < 0:
            raise FormatError("negative_grade", f"line {lineno}: negative grade {grade}")
        if (q, d) in entries:
            raise FormatError("duplicate_entry", f"line {lineno}: duplicate pair ({q}, {d})")
        entries[(q, d)] = grade
    return Qrels(entries)


def read_qrels(path) -> Qrels:
    with open(path, encoding="utf-8") as fh:
        return parse_qrels(fh)


def write_qrels(path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (q, d), g in sorted(qrels.entries.items()):
            fh.write(f"{q}\t{d}\t{g}\n")


def write_run(path, ranked_lists) -> None:
    """One ``query_id doc_id rank score`` line per item, rank from 1."""
    with open(path, "w", encoding="utf-8") as fh:
        for rl in ranked_lists:
            for rank, (doc_id, score) in enumerate(rl.items, start=1):
                fh.write(f"{rl.query_id}\t{doc_id}\t{rank}\t{format_score(score)}\n")


def format_score(score: float) -> str:
    if math.isinf(score):
        return "-inf" if score < 0 else "inf"
    # repr of a float32 value round-trips through float32
    return repr(float(np.float32(score)))


def read_run(path) -> dict[str, list[tuple[str, float]]]:
    runs: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError("malformed_line", f"line {lineno}: expected 4 tab-separated fields")
            q, d, rank, score = parts
            try:
                runs.setdefault(q, []).append((int(rank), d, float(score)))
            except ValueError:
                raise FormatError("malformed_line", f"line {lineno}: bad rank or score") from None
    return {q: [(d, s) for _, d, s in sorted(items)] for q, items in runs.items()}
