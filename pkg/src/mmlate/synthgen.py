"""Deterministic synthetic multimodal corpus with modality-targeted queries.

Every document gets one latent topic per modality.  Topics are unit vectors
in the first ``signal_dim`` feature coordinates; token features are the topic
plus Gaussian noise whose variance is ``query_noise**2`` on the signal
coordinates and ``(query_noise * nuisance_scale)**2`` on the remaining
"nuisance" coordinates.  Raw cosine similarity is therefore dominated by
nuisance noise, and a useful encoder has to learn to suppress it.

Per document there is one base query (tokens near the normalized mean of all
modality topics) and one query per modality (tokens near that modality's
topic).  With probability ``distractor_rate`` a modality topic is blended
with the same modality's topic of another document; the two documents then
judge each other grade 1 for that modality's queries and for base queries.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensors import (
    DEFAULT_MODALITIES,
    MultimodalDocument,
    Qrels,
    read_container,
    read_qrels,
    write_embeddings,
    write_qrels,
)

SPLITS = ("train", "val", "test")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stream derived from one seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


@dataclass(frozen=True)
class SynthConfig:
    doc_count: int = 2000
    tokens_min: int = 5
    tokens_max: int = 20
    feature_dim: int = 32
    signal_dim: int = 16
    nuisance_scale: float = 25.0
    query_noise: float = 0.1
    query_tokens_min: int = 4
    query_tokens_max: int = 12
    distractor_rate: float = 0.2
    distractor_mix: float = 0.5
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    modalities: tuple[str, ...] = DEFAULT_MODALITIES
    seed: int = 0

    def validate(self) -> None:
        if self.doc_count < 1:
            raise ValueError("doc_count must be >= 1")
        if not 1 <= self.tokens_min <= self.tokens_max:
            raise ValueError("need 1 <= tokens_min <= tokens_max")
        if not 1 <= self.query_tokens_min <= self.query_tokens_max:
            raise ValueError("need 1 <= query_tokens_min <= query_tokens_max")
        if not 1 <= self.signal_dim <= self.feature_dim:
            raise ValueError("need 1 <= signal_dim <= feature_dim")
        if self.query_noise < 0 or self.nuisance_scale < 0:
            raise ValueError("noise scales must be >= 0")
        if not 0 <= self.distractor_rate < 1:
            raise ValueError("distractor_rate must lie in [0, 1)")
        if not 0 <= self.distractor_mix < 1:
            raise ValueError("distractor_mix must lie in [0, 1)")
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValueError("fractions must be three non-negative numbers summing to 1")
        if not self.modalities or len(set(self.modalities)) != len(self.modalities):
            raise ValueError("modalities must be a non-empty list of distinct names")


@dataclass(frozen=True)
class SynthQuery:
    query_id: str
    doc_id: str
    features: np.ndarray
    target_modality: str | None


@dataclass
class SynthDataset:
    config: SynthConfig
    documents: list[MultimodalDocument]
    queries: list[SynthQuery]
    qrels: Qrels
    topics: dict[str, np.ndarray]
    shared: list[tuple[str, str, str]] = field(default_factory=list)
    splits: dict[str, str] = field(default_factory=dict)

    def docs_in(self, split: str) -> list[MultimodalDocument]:
        return [d for d in self.documents if self.splits.get(d.doc_id) == split]

    def queries_in(self, split: str) -> list[SynthQuery]:
        return [q for q in self.queries if self.splits.get(q.doc_id) == split]

    def qrels_in(self, split: str) -> Qrels:
        """Judgments restricted to one split's queries and documents."""
        keep_q = {q.query_id for q in self.queries_in(split)}
        keep_d = {d.doc_id for d in self.docs_in(split)}
        return Qrels({(q, d): g for (q, d), g in self.qrels.entries.items() if q in keep_q and d in keep_d})


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _noise(rng, shape, cfg: SynthConfig) -> np.ndarray:
    scale = np.full(cfg.feature_dim, cfg.query_noise)
    scale[cfg.signal_dim :] *= cfg.nuisance_scale
    return rng.standard_normal(shape) * scale


def _embed(topic_signal: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    out = np.zeros(topic_signal.shape[:-1] + (cfg.feature_dim,))
    out[..., : cfg.signal_dim] = topic_signal
    return out


def doc_id_for(i: int) -> str:
    return f"d{i:06d}"


def gen_corpus(config: SynthConfig) -> SynthDataset:
    """Documents with raw token features and their latent topics."""
    config.validate()
    n, mods = config.doc_count, config.modalities
    topic_rng = substream(config.seed, "topics")
    base = _unit(topic_rng.standard_normal((n, len(mods), config.signal_dim)))
    topics = base.copy()

    shared: list[tuple[str, str, str]] = []
    mix_rng = substream(config.seed, "distractors")
    if n > 1:
        for i in range(n):
            for mi, m in enumerate(mods):
                if mix_rng.random() < config.distractor_rate:
                    other = int(mix_rng.integers(0, n - 1))
                    other += other >= i
                    f = config.distractor_mix
                    topics[i, mi] = _unit((1 - f) * base[i, mi] + f * base[other, mi])
                    shared.append((doc_id_for(i), doc_id_for(other), m))

    tok_rng = substream(config.seed, "tokens")
    documents = []
    topic_map = {}
    for i in range(n):
        did = doc_id_for(i)
        feats = {}
        for mi, m in enumerate(mods):
            t = int(tok_rng.integers(config.tokens_min, config.tokens_max + 1))
            center = _embed(topics[i, mi], config)
            feats[m] = (center + _noise(tok_rng, (t, config.feature_dim), config)).astype(np.float32)
        documents.append(MultimodalDocument(did, feats))
        topic_map[did] = _embed(topics[i], config)
    return SynthDataset(config, documents, [], Qrels(), topic_map, shared)


def gen_queries(dataset: SynthDataset) -> SynthDataset:
    """Add one base query and one query per modality for every document."""
    cfg = dataset.config
    rng = substream(cfg.seed, "queries")
    queries = []
    entries: dict[tuple[str, str], int] = {}
    for doc in dataset.documents:
        topics = dataset.topics[doc.doc_id]
        base_center = _embed(_unit(topics[:, : cfg.signal_dim].mean(axis=0)), cfg)
        for target, center in [(None, base_center)] + [(m, topics[mi]) for mi, m in enumerate(cfg.modalities)]:
            n = int(rng.integers(cfg.query_tokens_min, cfg.query_tokens_max + 1))
            feats = (center + _noise(rng, (n, cfg.feature_dim), cfg)).astype(np.float32)
            qid = f"{doc.doc_id}-{target or 'base'}"
            queries.append(SynthQuery(qid, doc.doc_id, feats, target))
            entries[(qid, doc.doc_id)] = 2
    for a, b, m in dataset.shared:
        for src, other in ((a, b), (b, a)):
            for kind in (m, "base"):
                entries.setdefault((f"{src}-{kind}", other), 1)
    dataset.queries = queries
    dataset.qrels = Qrels(entries)
    return dataset


def split(doc_ids: Sequence[str], fractions: Sequence[float], seed: int) -> dict[str, str]:
    """Assign whole documents to train/val/test with a seeded shuffle."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(doc_ids)
    sizes = [int(round(f * n)) for f in fractions[:2]]
    sizes.append(n - sum(sizes))
    for name, f, s in zip(SPLITS, fractions, sizes):
        if f > 0 and s <= 0:
            raise ValueError(f"fraction {f} for {name} yields an empty split of {n} documents")
    if sizes[2] < 0:
        raise ValueError("fractions round to more documents than available")
    order = substream(seed, "split").permutation(n)
    out = {}
    pos = 0
    for name, s in zip(SPLITS, sizes):
        for i in order[pos : pos + s]:
            out[doc_ids[i]] = name
        pos += s
    return out


def generate(config: SynthConfig) -> SynthDataset:
    """Corpus, queries, qrels and split in one call."""
    ds = gen_queries(gen_corpus(config))
    ds.splits = split([d.doc_id for d in ds.documents], config.fractions, config.seed)
    return ds


def nearest_topic_ranking(dataset: SynthDataset, query: SynthQuery, doc_ids: Sequence[str] | None = None) -> list[str]:
    """Oracle ranking: cosine of the query's mean token to each document's
    best-matching topic (base queries use the normalized topic mean)."""
    cfg = dataset.config
    doc_ids = list(doc_ids) if doc_ids is not None else [d.doc_id for d in dataset.documents]
    q = query.features.astype(np.float64).mean(axis=0)[: cfg.signal_dim]
    scores = []
    for d in doc_ids:
        t = dataset.topics[d][:, : cfg.signal_dim]
        if query.target_modality is None:
            cand = _unit(t.mean(axis=0))[None]
        else:
            cand = t[[cfg.modalities.index(query.target_modality)]]
        scores.append(float(np.max(cand @ q)))
    order = sorted(range(len(doc_ids)), key=lambda i: (-scores[i], doc_ids[i]))
    return [doc_ids[i] for i in order]


# -- files -------------------------------------------------------------------


def write_dataset(directory, dataset: SynthDataset) -> None:
    """``docs.feat``, ``queries.feat``, ``queries.tsv``, ``qrels.tsv``, ``config.txt``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    write_embeddings(out / "docs.feat", dataset.documents, cfg.modalities, cfg.feature_dim, features=True)
    qdocs = [MultimodalDocument(q.query_id, {"query": q.features}) for q in dataset.queries]
    write_embeddings(out / "queries.feat", qdocs, ["query"], cfg.feature_dim, features=True)
    with open(out / "queries.tsv", "w", encoding="utf-8") as fh:
        for q in dataset.queries:
            fh.write(f"{q.query_id}\t{q.doc_id}\t{q.target_modality or '-'}\t{dataset.splits.get(q.doc_id, '-')}\n")
    write_qrels(out / "qrels.tsv", dataset.qrels)
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        for k, v in asdict(cfg).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            fh.write(f"{k} = {v}\n")


def read_query_manifest(path) -> list[tuple[str, str, str | None, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            qid, did, target, sp = parts
            rows.append((qid, did, None if target == "-" else target, sp))
    return rows


def parse_config_text(text: str, cls=SynthConfig, base=None):
    """Flat ``key = value`` text into a dataclass; ``#`` starts a comment."""
    import dataclasses

    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = base if base is not None else cls()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(val, getattr(defaults, key))
    return dataclasses.replace(defaults, **values)


def _coerce(text: str, like):
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        if like and isinstance(like[0], float):
            return tuple(float(s) for s in items)
        return tuple(items)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def read_dataset(directory) -> SynthDataset:
    d = Path(directory)
    cfg = parse_config_text((d / "config.txt").read_text(encoding="utf-8"))
    docs = read_container(d / "docs.feat").documents
    qfeat = {q.doc_id: q.modalities["query"] for q in read_container(d / "queries.feat").documents}
    manifest = read_query_manifest(d / "queries.tsv")
    queries = [SynthQuery(qid, did, qfeat[qid], target) for qid, did, target, _ in manifest]
    splits = {did: sp for _, did, _, sp in manifest}
    return SynthDataset(cfg, docs, queries, read_qrels(d / "qrels.tsv"), {}, [], splits)
