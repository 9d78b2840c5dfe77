"""A small trainable encoder and its contrastive objectives.

The encoder is a linear projection from raw token features (dim ``F``) to
the embedding space (dim ``D``), followed by row normalization.  Queries get
``pad_count`` learnable feature rows appended before projection.  Documents
may be contextualized: every token feature ``x`` is replaced by
``(1 - alpha) * x + alpha * c`` where ``c`` is the mean token feature of the
whole document across all modalities.

Everything here runs in float64.  Gradients are written out by hand;
``max`` and ``argmax`` pass gradient only to the selected branch, taking the
lowest index on ties.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensors import (
    DEFAULT_MODALITIES,
    MAX_QUERY_TOKENS,
    EncodedQuery,
    MultimodalDocument,
    normalize_rows,
    read_container,
    write_embeddings,
)

logger = logging.getLogger(__name__)

LOSSES = ("infonce", "modpos", "modneg")
TRAIN_SCORERS = ("li_mw", "li_context", "pooled")


class NonFiniteError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class EncoderParams:
    projection: np.ndarray  # (F, D)
    pad_features: np.ndarray  # (pad_count, F)
    mixing_weight: float = 0.0
    log_temperature: float = 0.0

    @property
    def temperature(self) -> float:
        return math.exp(self.log_temperature)

    @property
    def feature_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    @property
    def pad_count(self) -> int:
        return self.pad_features.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.projection.copy(), self.pad_features.copy(), self.mixing_weight, self.log_temperature)

    @classmethod
    def init(cls, feature_dim: int = 32, dim: int = 128, pad_count: int = 5, alpha: float = 0.0,
             seed: int = 0) -> "EncoderParams":
        rng = np.random.default_rng([seed, 0x5EED])
        w = rng.standard_normal((feature_dim, dim)) / math.sqrt(feature_dim)
        pad = rng.standard_normal((pad_count, feature_dim)) / math.sqrt(feature_dim)
        return cls(w, pad, float(alpha), 0.0)


@dataclass
class Gradients:
    projection: np.ndarray
    pad_features: np.ndarray
    mixing_weight: float = 0.0
    log_temperature: float = 0.0


# -- encoding ------------------------------------------------------------------


def _normalize(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.sqrt(np.einsum("ij,ij->i", y, y))
    safe = np.where(n == 0.0, 1.0, n)
    return y / safe[:, None] * (n != 0)[:, None], n


def _check_features(x: np.ndarray, params: EncoderParams, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.feature_dim:
        raise ValueError(f"{what}: feature dim {x.shape[-1]} does not match encoder dim {params.feature_dim}")
    return x


def _mix(features: Sequence[np.ndarray], alpha: float, contextualize: bool) -> list[np.ndarray]:
    if not contextualize:
        return list(features)
    nonempty = [x for x in features if x.shape[0]]
    c = np.concatenate(nonempty, axis=0).mean(axis=0)
    return [(1.0 - alpha) * x + alpha * c for x in features]


def encode_document_rows(raw: Mapping[str, np.ndarray], params: EncoderParams, contextualize: bool) -> dict[str, np.ndarray]:
    """float64 normalized embeddings per modality (modality order kept)."""
    names = list(raw)
    feats = [_check_features(raw[m], params, f"modality {m!r}") for m in names]
    if not any(x.shape[0] for x in feats):
        raise ValueError("cannot encode an empty document")
    mixed = _mix(feats, params.mixing_weight, contextualize)
    return {m: _normalize(x @ params.projection)[0] for m, x in zip(names, mixed)}


def encode_document(raw: MultimodalDocument | Mapping[str, np.ndarray], params: EncoderParams,
                    contextualize: bool = True, doc_id: str | None = None) -> MultimodalDocument:
    if isinstance(raw, MultimodalDocument):
        doc_id = raw.doc_id if doc_id is None else doc_id
        raw = raw.modalities
    rows = encode_document_rows(raw, params, contextualize)
    return MultimodalDocument(doc_id or "doc", {m: normalize_rows(r) for m, r in rows.items()})


def _query_features(raw: np.ndarray, params: EncoderParams) -> np.ndarray:
    x = _check_features(raw, params, "query")
    if x.shape[0] < 1:
        raise ValueError("query has no tokens")
    if x.shape[0] > MAX_QUERY_TOKENS:
        logger.warning("query of %d tokens truncated to %d", x.shape[0], MAX_QUERY_TOKENS)
        x = x[:MAX_QUERY_TOKENS]
    return np.concatenate([x, params.pad_features], axis=0)


def encode_query(raw: np.ndarray, params: EncoderParams, query_id: str = "q",
                 target_modality: str | None = None) -> EncodedQuery:
    """Append the pad rows, project, normalize."""
    z = _query_features(raw, params)
    return EncodedQuery(query_id, normalize_rows(z @ params.projection), target_modality, np.asarray(raw))


# -- batch forward/backward ----------------------------------------------------


@dataclass
class TrainBatch:
    queries: list[np.ndarray]
    documents: list[dict[str, np.ndarray]]
    targets: list[str | None]
    modalities: tuple[str, ...] = DEFAULT_MODALITIES

    def __post_init__(self):
        b = len(self.queries)
        if b < 2:
            raise ValueError("a contrastive batch needs at least 2 items")
        if len(self.documents) != b or len(self.targets) != b:
            raise ValueError("queries, documents and targets must align")

    @property
    def size(self) -> int:
        return len(self.queries)


@dataclass
class _Forward:
    # The embeddings of a row x are x W / |x W|.  Everything is kept in
    # feature space through G = W W^T: Xq/Xd hold the feature rows divided by
    # their embedding norms, so that embedding inner products are Xq G Xd^T.
    G: np.ndarray
    Zq: np.ndarray
    Xq: np.ndarray
    q_norm: np.ndarray
    q_starts: np.ndarray
    q_owner: np.ndarray
    q_lens: np.ndarray
    Xmix: np.ndarray
    Xraw: np.ndarray
    Cd: np.ndarray
    Xd: np.ndarray
    d_norm: np.ndarray
    S: np.ndarray  # (Rq, Rd) token similarities
    seg_doc: np.ndarray
    seg_mod: np.ndarray
    seg_start: np.ndarray
    doc_segs: list[np.ndarray]
    doc_rows: list[np.ndarray]
    M: np.ndarray  # (Rq, nseg) per-row segment maxima
    A: np.ndarray  # (Rq, nseg) column of S attaining each maximum
    Sm: np.ndarray  # (b, b, nmod) per-modality scores, -inf if absent
    s: np.ndarray  # (b, b) scorer output
    sel: np.ndarray | None  # li_mw: chosen modality per (k, j)
    ctx_seg: np.ndarray | None  # li_context: chosen segment per (row, doc)
    pooled: tuple | None


def segment_max(S: np.ndarray, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise max and first argmax (as a column of ``S``) per column segment.

    Segments are ``[starts[i], starts[i + 1])``, the last one running to the
    end; all must be non-empty.
    """
    M = np.maximum.reduceat(S, starts, axis=1)
    lens = np.diff(np.append(starts, S.shape[1]))
    owner = np.repeat(np.arange(len(starts)), lens)
    cand = np.where(S == M[:, owner], np.arange(S.shape[1]), S.shape[1])
    return M, np.minimum.reduceat(cand, starts, axis=1)


def _g_normalize(X: np.ndarray, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.sqrt(np.maximum(np.einsum("ij,ij->i", X @ G, X), 0.0))
    safe = np.where(n == 0.0, 1.0, n)
    return X / safe[:, None] * (n != 0)[:, None], n


def _forward(batch: TrainBatch, params: EncoderParams, scorer: str, contextualize: bool) -> _Forward:
    b = batch.size
    mods = batch.modalities
    W = params.projection
    G = W @ W.T

    zq = [_query_features(x, params) for x in batch.queries]
    q_lens = np.array([z.shape[0] for z in zq])
    q_starts = np.concatenate(([0], np.cumsum(q_lens)[:-1]))
    q_owner = np.repeat(np.arange(b), q_lens)
    Zq = np.concatenate(zq, axis=0)
    Xq, q_norm = _g_normalize(Zq, G)

    raw_parts, ctx_parts = [], []
    seg_doc, seg_mod, seg_start = [], [], []
    doc_segs, doc_rows = [], []
    offset = 0
    for j, doc in enumerate(batch.documents):
        present = [m for m in mods if m in doc and np.asarray(doc[m]).shape[0]]
        if not present:
            raise ValueError(f"batch document {j} has no tokens")
        feats = [_check_features(doc[m], params, f"modality {m!r}") for m in present]
        allx = np.concatenate(feats, axis=0)
        first_seg = len(seg_doc)
        row0 = offset
        for m, x in zip(present, feats):
            seg_doc.append(j)
            seg_mod.append(mods.index(m))
            seg_start.append(offset)
            offset += x.shape[0]
        doc_segs.append(np.arange(first_seg, len(seg_doc)))
        doc_rows.append(np.arange(row0, offset))
        raw_parts.append(allx)
        ctx_parts.append(np.broadcast_to(allx.mean(axis=0), allx.shape))
    Xraw = np.concatenate(raw_parts, axis=0)
    Cd = np.concatenate(ctx_parts, axis=0)
    if contextualize:
        a = params.mixing_weight
        Xmix = (1.0 - a) * Xraw + a * Cd
    else:
        Xmix = Xraw
    Xd, d_norm = _g_normalize(Xmix, G)

    seg_doc = np.array(seg_doc)
    seg_mod = np.array(seg_mod)
    seg_start = np.array(seg_start)
    S = (Xq @ G) @ Xd.T
    M, A = segment_max(S, seg_start)

    Sm = np.full((b, b, len(mods)), -np.inf)
    Sm[:, seg_doc, seg_mod] = np.add.reduceat(M, q_starts, axis=0)

    sel = ctx_seg = pooled = None
    if scorer == "li_mw":
        sel = Sm.argmax(axis=2)
        s = np.take_along_axis(Sm, sel[..., None], axis=2)[..., 0]
    elif scorer == "li_context":
        doc_first = np.array([segs[0] for segs in doc_segs])
        row_best, ctx_seg = segment_max(M, doc_first)
        s = np.add.reduceat(row_best, q_starts, axis=0)
    elif scorer == "pooled":
        qbar = np.add.reduceat(Xq, q_starts, axis=0) / q_lens[:, None]
        u, u_norm = _g_normalize(qbar, G)
        dbar = np.stack([Xd[r].mean(axis=0) for r in doc_rows])
        v, v_norm = _g_normalize(dbar, G)
        s = (u @ G) @ v.T
        pooled = (u, u_norm, v, v_norm)
    else:
        raise ValueError(f"unknown scorer {scorer!r}")
    if not np.all(np.isfinite(s)):
        raise NonFiniteError("non-finite similarity in batch")
    return _Forward(G, Zq, Xq, q_norm, q_starts, q_owner, q_lens, Xmix, Xraw, Cd, Xd, d_norm, S, seg_doc, seg_mod,
                    seg_start, doc_segs, doc_rows, M, A, Sm, s, sel, ctx_seg, pooled)


def _lse_weights(terms: np.ndarray) -> tuple[float, np.ndarray]:
    """Stable log-sum-exp and softmax weights; ``-inf`` terms get weight 0."""
    m = np.max(terms)
    e = np.exp(terms - m)
    tot = e.sum()
    return float(m + math.log(tot)), e / tot


def _target_indices(batch: TrainBatch, fw: _Forward) -> np.ndarray:
    out = np.empty(batch.size, dtype=np.int64)
    for k, t in enumerate(batch.targets):
        if t is None:
            raise ValueError(f"batch item {k} has no target modality")
        if t not in batch.modalities:
            raise ValueError(f"batch item {k}: target {t!r} outside declared modalities")
        mi = batch.modalities.index(t)
        if not np.isfinite(fw.Sm[k, k, mi]):
            raise ValueError(f"batch item {k}: target modality {t!r} absent from its document")
        out[k] = mi
    return out


def _loss_and_seeds(batch: TrainBatch, params: EncoderParams, fw: _Forward, loss: str):
    """Loss value plus gradients w.r.t. ``s`` (b, b), ``Sm`` and log-temperature."""
    b = batch.size
    tau = params.temperature
    L = fw.s / tau
    dL = np.zeros_like(L)  # d loss / d (s / tau)
    dSmT = np.zeros_like(fw.Sm)  # d loss / d (Sm / tau)
    total = 0.0
    if loss == "infonce":
        for k in range(b):
            lse, w = _lse_weights(L[k])
            total += lse - L[k, k]
            dL[k] += w
            dL[k, k] -= 1.0
    elif loss in ("modpos", "modneg"):
        tgt = _target_indices(batch, fw)
        SmT = fw.Sm / tau
        off = ~np.eye(b, dtype=bool)
        for k in range(b):
            pos = SmT[k, k, tgt[k]]
            negs = L[k][off[k]]
            if loss == "modpos":
                lse, w = _lse_weights(np.concatenate(([pos], negs)))
                dSmT[k, k, tgt[k]] += w[0]
                dL[k, off[k]] += w[1:]
            else:
                flat = SmT[k].ravel()
                lse, w = _lse_weights(np.concatenate((flat, negs)))
                dSmT[k] += w[: flat.size].reshape(SmT[k].shape)
                dL[k, off[k]] += w[flat.size :]
            total += lse - pos
            dSmT[k, k, tgt[k]] -= 1.0
    else:
        raise ValueError(f"unknown loss {loss!r}")
    total /= b
    dL /= b
    dSmT /= b
    finite = np.isfinite(fw.Sm)
    dlogtau = -float(np.sum(dL * L)) - float(np.sum(np.where(finite, dSmT * np.where(finite, fw.Sm, 0.0), 0.0)) / tau)
    return total, dL / tau, dSmT / tau, dlogtau


def _backward(batch: TrainBatch, params: EncoderParams, fw: _Forward, scorer: str, contextualize: bool,
              ds: np.ndarray, dSm: np.ndarray, dlogtau: float) -> Gradients:
    # Gradients w.r.t. embeddings are carried as feature-space rows H with
    # d(embedding) = H W.
    b = batch.size
    W, G = params.projection, fw.G
    dSm = dSm.copy()
    Rq = fw.Xq.shape[0]
    rows = np.arange(Rq)

    if scorer == "li_mw":
        kk, jj = np.meshgrid(np.arange(b), np.arange(b), indexing="ij")
        np.add.at(dSm, (kk, jj, fw.sel), ds)

    dM = dSm[fw.q_owner][:, fw.seg_doc, fw.seg_mod]  # (Rq, nseg)
    if scorer == "li_context":
        for j in range(b):
            np.add.at(dM, (rows, fw.ctx_seg[:, j]), ds[fw.q_owner, j])

    dS = np.zeros_like(fw.S)
    dS[rows[:, None], fw.A] = dM
    Hq = dS @ fw.Xd
    Hd = dS.T @ fw.Xq

    if scorer == "pooled":
        u, u_norm, v, v_norm = fw.pooled
        beta = ds @ v
        gamma = ds.T @ u
        cu = np.einsum("ij,ij->i", u @ G, beta)
        cv = np.einsum("ij,ij->i", v @ G, gamma)
        dqbar = (beta - u * cu[:, None]) / np.where(u_norm == 0, 1, u_norm)[:, None]
        ddbar = (gamma - v * cv[:, None]) / np.where(v_norm == 0, 1, v_norm)[:, None]
        Hq += (dqbar / fw.q_lens[:, None])[fw.q_owner]
        for j, r in enumerate(fw.doc_rows):
            Hd[r] += ddbar[j] / len(r)

    def norm_back(Xn, n, H):
        proj = np.einsum("ij,ij->i", Xn @ G, H)
        safe = np.where(n == 0, 1.0, n)[:, None]
        return (H - Xn * proj[:, None]) / safe * (n != 0)[:, None]

    Eq = norm_back(fw.Xq, fw.q_norm, Hq)
    Ed = norm_back(fw.Xd, fw.d_norm, Hd)
    dW = (fw.Zq.T @ Eq + fw.Xmix.T @ Ed) @ W

    pad = params.pad_count
    dpad = np.zeros_like(params.pad_features)
    if pad:
        ends = np.append(fw.q_starts[1:], fw.Zq.shape[0])
        idx = (ends[:, None] - pad + np.arange(pad)).ravel()
        dpad = (Eq[idx] @ G).reshape(len(ends), pad, -1).sum(axis=0)

    dalpha = 0.0
    if contextualize:
        dalpha = float(np.sum((Ed @ G) * (fw.Cd - fw.Xraw)))
    return Gradients(dW, dpad, dalpha, dlogtau)


def loss_value(batch: TrainBatch, params: EncoderParams, loss: str = "infonce", scorer: str = "li_mw",
               contextualize: bool = True) -> tuple[float, np.ndarray]:
    fw = _forward(batch, params, scorer, contextualize)
    total, *_ = _loss_and_seeds(batch, params, fw, loss)
    return total, fw.s


def loss_infonce(batch: TrainBatch, params: EncoderParams, scorer: str = "li_mw",
                 contextualize: bool = True) -> tuple[float, np.ndarray]:
    """In-batch softmax cross-entropy with the diagonal as positives."""
    return loss_value(batch, params, "infonce", scorer, contextualize)


def loss_modpos(batch: TrainBatch, params: EncoderParams, scorer: str = "li_mw",
                contextualize: bool = True) -> float:
    """Positive scored on the labeled modality only; negatives by ``scorer``."""
    return loss_value(batch, params, "modpos", scorer, contextualize)[0]


def loss_modneg(batch: TrainBatch, params: EncoderParams, scorer: str = "li_mw",
                contextualize: bool = True) -> float:
    """Like modpos, plus every modality of every batch document in the denominator."""
    return loss_value(batch, params, "modneg", scorer, contextualize)[0]


def gradients(batch: TrainBatch, params: EncoderParams, loss: str = "infonce", scorer: str = "li_mw",
              contextualize: bool = True) -> tuple[float, Gradients]:
    fw = _forward(batch, params, scorer, contextualize)
    total, ds, dSm, dlogtau = _loss_and_seeds(batch, params, fw, loss)
    g = _backward(batch, params, fw, scorer, contextualize, ds, dSm, dlogtau)
    for arr in (g.projection, g.pad_features):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite gradient")
    return total, g


def branch_margin(batch: TrainBatch, params: EncoderParams, scorer: str = "li_mw", contextualize: bool = True) -> float:
    """Smallest gap between the selected and runner-up branch of any max.

    Finite-difference checks are only meaningful when this is comfortably
    larger than the perturbation's effect on similarities.
    """
    fw = _forward(batch, params, scorer, contextualize)
    S = fw.S
    ends = np.append(fw.seg_start[1:], S.shape[1])
    gaps = []
    for s_ in range(len(fw.seg_doc)):
        block = np.sort(S[:, fw.seg_start[s_] : ends[s_]], axis=1)
        if block.shape[1] > 1:
            gaps.append(np.min(block[:, -1] - block[:, -2]))
    if scorer == "li_mw":
        srt = np.sort(np.where(np.isfinite(fw.Sm), fw.Sm, -1e300), axis=2)
        if srt.shape[2] > 1:
            gap = srt[..., -1] - srt[..., -2]
            gaps.append(np.min(gap[srt[..., -2] > -1e299]) if np.any(srt[..., -2] > -1e299) else np.inf)
    elif scorer == "li_context":
        for j in range(batch.size):
            segs = fw.doc_segs[j]
            if len(segs) > 1:
                srt = np.sort(fw.M[:, segs], axis=1)
                gaps.append(np.min(srt[:, -1] - srt[:, -2]))
    return float(min(gaps)) if gaps else float("inf")


# -- parameter vector helpers (finite differences, optimizers) ----------------


def flatten(params: EncoderParams) -> np.ndarray:
    return np.concatenate([params.projection.ravel(), params.pad_features.ravel(),
                           [params.mixing_weight, params.log_temperature]])


def unflatten(vec: np.ndarray, like: EncoderParams) -> EncoderParams:
    nw = like.projection.size
    npad = like.pad_features.size
    return EncoderParams(vec[:nw].reshape(like.projection.shape).copy(),
                         vec[nw : nw + npad].reshape(like.pad_features.shape).copy(),
                         float(vec[nw + npad]), float(vec[nw + npad + 1]))


def flatten_grads(g: Gradients) -> np.ndarray:
    return np.concatenate([g.projection.ravel(), g.pad_features.ravel(), [g.mixing_weight, g.log_temperature]])


def finite_difference(f: Callable[[EncoderParams], float], params: EncoderParams, h: float = 1e-4) -> np.ndarray:
    """Central differences of ``f`` for every parameter coordinate."""
    base = flatten(params)
    out = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        out[i] = (f(unflatten(plus, params)) - f(unflatten(minus, params))) / (2 * h)
    return out


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "infonce"
    scorer: str = "li_mw"
    batch_size: int = 16
    epochs: int = 5
    lr: float = 1e-3
    seed: int = 0
    alpha: float = 0.5
    pad_count: int = 5
    contextualize: bool = True
    dim: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0  # steps; 0 = once per epoch

    def validate(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.scorer not in TRAIN_SCORERS:
            raise ValueError(f"scorer must be one of {TRAIN_SCORERS}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0 or self.lr < 0:
            raise ValueError("epochs and lr must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def read_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    from .synthgen import parse_config_text

    return parse_config_text(Path(path).read_text(encoding="utf-8"), TrainConfig, base)


def write_train_config(path, cfg: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in dataclasses.asdict(cfg).items():
            fh.write(f"{k} = {'on' if v is True else 'off' if v is False else v}\n")


@dataclass
class TrainExample:
    query: np.ndarray
    doc_id: str
    target: str | None = None


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)  # (step, R@1)


class Adam:
    def __init__(self, size: int, lr: float, beta1: float, beta2: float, eps: float):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_batches(examples: Sequence[TrainExample], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle and cut into batches in which every document appears once.

    An example whose document is already in the current batch is deferred to
    the next one.  A trailing batch smaller than 2 is dropped.
    """
    order = list(rng.permutation(len(examples)))
    batches: list[list[int]] = []
    pending: list[int] = []
    while order or pending:
        batch, docs, deferred = [], set(), []
        queue = pending + order
        pending, order = [], []
        for pos, i in enumerate(queue):
            if len(batch) == batch_size:
                order = queue[pos:]
                break
            d = examples[i].doc_id
            if d in docs:
                deferred.append(i)
            else:
                batch.append(i)
                docs.add(d)
        pending = deferred
        if len(batch) >= 2:
            batches.append(batch)
        elif not order:
            break
    return batches


def fit(examples: Sequence[TrainExample], documents: Mapping[str, Mapping[str, np.ndarray]], params: EncoderParams,
        config: TrainConfig, modalities: Sequence[str] = DEFAULT_MODALITIES,
        validate: Callable[[EncoderParams], float] | None = None) -> tuple[EncoderParams, TrainHistory]:
    """Train with Adam; deterministic given ``config.seed``.

    ``validate`` maps parameters to a validation R@1 and is called every
    ``eval_every`` steps (once per epoch when 0).
    """
    config.validate()
    if config.loss != "infonce":
        examples = [e for e in examples if e.target is not None]
    params = params.copy()
    if not config.contextualize:
        params.mixing_weight = 0.0
    theta = flatten(params)
    opt = Adam(theta.size, config.lr, config.beta1, config.beta2, config.eps)
    hist = TrainHistory()
    alpha_idx = params.projection.size + params.pad_features.size
    step = 0
    mods = tuple(modalities)
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch, 0xBA7C])
        for idx in make_batches(examples, config.batch_size, rng):
            batch = TrainBatch([examples[i].query for i in idx], [documents[examples[i].doc_id] for i in idx],
                               [examples[i].target for i in idx], mods)
            try:
                loss, g = gradients(batch, params, config.loss, config.scorer, config.contextualize)
            except NonFiniteError:
                raise TrainingDiverged(step, float("nan")) from None
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            hist.losses.append(loss)
            if config.lr > 0:
                theta = opt.step(theta, flatten_grads(g))
                theta[alpha_idx] = min(1.0, max(0.0, theta[alpha_idx])) if config.contextualize else 0.0
                params = unflatten(theta, params)
            step += 1
            if validate is not None and config.eval_every and step % config.eval_every == 0:
                hist.validation.append((step, validate(params)))
        if validate is not None and not config.eval_every:
            hist.validation.append((step, validate(params)))
    return params, hist


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: EncoderParams, contextualize: bool = True) -> None:
    """Store the parameters in the feature container.

    Layout: one record ``encoder`` with modalities ``projection_t`` (D rows
    of F), ``pad`` (pad_count rows) and ``scalars`` (one row holding alpha,
    log-temperature and the contextualize flag).  Values are float32.
    """
    F = params.feature_dim
    scalars = np.zeros((1, F), dtype=np.float32)
    scalars[0, :3] = [params.mixing_weight, params.log_temperature, 1.0 if contextualize else 0.0]
    mats = {"projection_t": params.projection.T.astype(np.float32), "scalars": scalars}
    if params.pad_count:
        mats["pad"] = params.pad_features.astype(np.float32)
    write_embeddings(path, [MultimodalDocument("encoder", mats)], ["projection_t", "pad", "scalars"], F,
                     features=True)


def load_checkpoint(path) -> tuple[EncoderParams, bool]:
    c = read_container(path)
    if not c.features or not c.documents or c.documents[0].doc_id != "encoder":
        raise ValueError(f"{path} is not an encoder checkpoint")
    mats = c.documents[0].modalities
    F = c.dim
    pad = mats.get("pad", np.zeros((0, F), dtype=np.float32))
    s = mats["scalars"][0].astype(np.float64)
    params = EncoderParams(mats["projection_t"].T.astype(np.float64), pad.astype(np.float64), float(s[0]), float(s[1]))
    return params, bool(s[2])


# -- gradient check ------------------------------------------------------------


@dataclass
class GradcheckRow:
    config: int
    loss: str
    scorer: str
    contextualize: bool
    max_rel_error: float
    margin: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= GRADCHECK_TOL


GRADCHECK_TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero coordinates, where O(h**2) truncation error
    dominates, from inflating the ratio.
    """
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(seed: int = 0, configs: int = 20, losses: Sequence[str] = LOSSES, h: float = 1e-4,
              min_margin: float = 1e-3, feature_dim: int = 6, dim: int = 5) -> list[GradcheckRow]:
    """Compare analytic gradients with central differences on random small batches.

    Each configuration draws a batch, an encoder and a scorer/contextualize
    pair, then checks every loss in ``losses``.  Draws whose branch margin
    is below ``min_margin`` (an argmax nearly tied) are redrawn.
    """
    rng = np.random.default_rng([seed, 0x6C4E])
    mods = ("vision", "audio", "ocr")
    rows = []
    c = 0
    while c < configs:
        b = int(rng.integers(2, 4))
        queries = [rng.standard_normal((int(rng.integers(1, 4)), feature_dim)) for _ in range(b)]
        docs = []
        for _ in range(b):
            present = [m for m in mods if rng.random() < 0.8] or [mods[int(rng.integers(0, 3))]]
            docs.append({m: rng.standard_normal((int(rng.integers(1, 4)), feature_dim)) for m in present})
        targets = [str(rng.choice(list(d))) for d in docs]
        batch = TrainBatch(queries, docs, targets, mods)
        params = EncoderParams.init(feature_dim, dim, int(rng.integers(0, 3)), float(rng.uniform(0.1, 0.9)),
                                    int(rng.integers(0, 2**31)))
        params.log_temperature = float(rng.uniform(-1.0, 0.0))
        scorer = TRAIN_SCORERS[int(rng.integers(0, len(TRAIN_SCORERS)))]
        ctx = bool(rng.integers(0, 2))
        margin = branch_margin(batch, params, scorer, ctx)
        if margin < min_margin:
            continue
        for loss in losses:
            _, g = gradients(batch, params, loss, scorer, ctx)
            num = finite_difference(lambda p: loss_value(batch, p, loss, scorer, ctx)[0], params, h)
            err = relative_error(flatten_grads(g), num)
            rows.append(GradcheckRow(c, loss, scorer, ctx, float(err.max()), margin))
        c += 1
    return rows
