"""Per-handbook sparse + dense indexes and RRF-fused hybrid retrieval with reranking."""

from __future__ import annotations

import bisect
import io
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text, canonical_json, read_json, sha256_hex, write_json
from .chunking import Chunk, ChunkingConfig, chunk_handbook, chunk_handbook_id, tokenize
from .corpus import Handbook, Question, handbook_to_json

logger = logging.getLogger(__name__)


def bm25_tokens(text: str, stemmer: Callable[[str], str] | None = None) -> list[str]:
    """Lowercased chunking tokens; punctuation-only tokens are dropped."""
    toks = [t.lower() for t in tokenize(text) if any(ch.isalnum() for ch in t)]
    return [stemmer(t) for t in toks] if stemmer else toks


@dataclass(frozen=True)
class RetrievalConfig:
    k_rrf: int = 60
    candidates_per_retriever: int = 50
    top_k_final: int = 5
    rerank_depth: int | None = None  # default 2 * top_k_final
    k1: float = 1.2
    b: float = 0.75
    strict_rerank: bool = False

    def __post_init__(self) -> None:
        if min(self.k_rrf, self.candidates_per_retriever, self.top_k_final) < 1:
            raise ValueError("k_rrf, candidates_per_retriever, top_k_final must be positive")
        if self.top_k_final > self.candidates_per_retriever:
            raise ValueError("top_k_final must not exceed candidates_per_retriever")

    @property
    def effective_rerank_depth(self) -> int:
        return self.rerank_depth or 2 * self.top_k_final


@dataclass(frozen=True)
class RankedList:
    items: tuple[tuple[str, float], ...]
    retriever: str = ""

    def __post_init__(self) -> None:
        ids = [cid for cid, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("RankedList chunk ids must be distinct")
        scores = [s for _, s in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("RankedList scores must be non-increasing")

    @classmethod
    def from_ids(cls, ids: Sequence[str], retriever: str = "") -> "RankedList":
        """Rank-only list; scores count down so that order is preserved."""
        n = len(ids)
        return cls(tuple((cid, float(n - i)) for i, cid in enumerate(ids)), retriever)

    @property
    def ids(self) -> list[str]:
        return [cid for cid, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)


def _ranked(scored: Iterable[tuple[str, float]], retriever: str, k: int | None = None) -> RankedList:
    ordered = sorted(scored, key=lambda x: (-x[1], x[0]))
    return RankedList(tuple(ordered[:k] if k is not None else ordered), retriever)


# -- sparse ------------------------------------------------------------------

@dataclass
class SparseIndex:
    """Okapi BM25 inverted index.

    IDF uses the non-negative form ``ln(1 + (N - df + 0.5) / (df + 0.5))``.
    """

    postings: dict[str, list[tuple[str, int]]]
    lengths: dict[str, int]
    k1: float = 1.2
    b: float = 0.75

    @property
    def doc_count(self) -> int:
        return len(self.lengths)

    @property
    def avg_length(self) -> float:
        return sum(self.lengths.values()) / self.doc_count if self.doc_count else 0.0

    @classmethod
    def build(cls, docs: dict[str, list[str]], k1: float = 1.2, b: float = 0.75) -> "SparseIndex":
        postings: dict[str, list[tuple[str, int]]] = {}
        for cid in sorted(docs):
            for term, tf in sorted(Counter(docs[cid]).items()):
                postings.setdefault(term, []).append((cid, tf))
        return cls(postings=postings, lengths={cid: len(docs[cid]) for cid in sorted(docs)}, k1=k1, b=b)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = self.doc_count
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def tf(self, term: str, chunk_id: str) -> int:
        plist = self.postings.get(term)
        if not plist:
            return 0
        i = bisect.bisect_left(plist, (chunk_id, -1))
        return plist[i][1] if i < len(plist) and plist[i][0] == chunk_id else 0

    def _term_weight(self, term: str, tf: int, length: int) -> float:
        norm = self.k1 * (1.0 - self.b + self.b * length / self.avg_length) if self.avg_length else self.k1
        return self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm)

    def score(self, query_terms: Sequence[str], chunk_id: str) -> float:
        if chunk_id not in self.lengths:
            raise KeyError(f"chunk {chunk_id!r} is not indexed")
        length = self.lengths[chunk_id]
        total = 0.0
        for term in query_terms:
            tf = self.tf(term, chunk_id)
            if tf:
                total += self._term_weight(term, tf, length)
        return total

    def search(self, query_terms: Sequence[str], k: int) -> RankedList:
        """Chunks containing at least one query term, best first."""
        scores: dict[str, float] = {}
        for term in query_terms:
            for cid, tf in self.postings.get(term, ()):
                scores[cid] = scores.get(cid, 0.0) + self._term_weight(term, tf, self.lengths[cid])
        return _ranked(scores.items(), "sparse", k)

    def to_json(self) -> dict:
        return {"k1": self.k1, "b": self.b, "lengths": self.lengths,
                "postings": {t: [list(p) for p in pl] for t, pl in self.postings.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "SparseIndex":
        return cls(postings={t: [(c, int(f)) for c, f in pl] for t, pl in d["postings"].items()},
                   lengths={k: int(v) for k, v in d["lengths"].items()}, k1=d["k1"], b=d["b"])


def bm25_score(query_terms: Sequence[str], index: SparseIndex, chunk_id: str) -> float:
    return index.score(query_terms, chunk_id)


# -- dense -------------------------------------------------------------------

@dataclass
class DenseIndex:
    """Exact inner-product index over unit vectors (exhaustive scan)."""

    chunk_ids: list[str]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.chunk_ids):
            raise ValueError("matrix must be (n_chunks, dim)")
        if len(self.chunk_ids) and not np.allclose(np.linalg.norm(self.matrix, axis=1), 1.0, atol=1e-6):
            raise ValueError("stored vectors must have unit norm")

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @classmethod
    def build(cls, chunk_ids: Sequence[str], vectors: Sequence[np.ndarray], dim: int | None = None) -> "DenseIndex":
        if vectors:
            mat = np.vstack([np.asarray(v, dtype=np.float64) for v in vectors])
            mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
        else:
            mat = np.zeros((0, dim or 0))
        return cls(list(chunk_ids), mat)


def dense_search(query_vector: np.ndarray, index: DenseIndex, k: int) -> RankedList:
    q = np.asarray(query_vector, dtype=np.float64)
    if q.ndim != 1 or (len(index.chunk_ids) and q.shape[0] != index.dim):
        raise ValueError(f"query dimension {q.shape} does not match index dimension {index.dim}")
    if not index.chunk_ids:
        return RankedList((), "dense")
    sims = index.matrix @ q
    return _ranked(zip(index.chunk_ids, (float(s) for s in sims)), "dense", k)


# -- fusion / rerank -----------------------------------------------------------

def rrf_fuse(lists: Sequence[RankedList], k_rrf: int = 60) -> RankedList:
    """Reciprocal rank fusion: ``sum_lists 1 / (k_rrf + rank)`` with 1-based ranks.

    Ties are broken by ascending chunk id.
    """
    if not lists:
        raise ValueError("rrf_fuse needs at least one list")
    fused: dict[str, float] = {}
    for rl in lists:
        for rank, cid in enumerate(rl.ids, start=1):
            fused[cid] = fused.get(cid, 0.0) + 1.0 / (k_rrf + rank)
    return _ranked(fused.items(), "fused")


Scorer = Callable[[str, list[str]], list[float]]


def rerank(question: str, candidates: Sequence[Chunk], scorer: Scorer, *, strict: bool = False,
           warnings: list[str] | None = None) -> RankedList:
    """Reorder ``candidates`` by ``scorer(question, passages)``, highest first.

    Equal scores keep input order. If the scorer fails, the input order is
    kept (with a warning) unless ``strict`` is set.
    """
    ids = [c.chunk_id for c in candidates]
    if len(candidates) <= 1:
        return RankedList(tuple((cid, 0.0) for cid in ids), "reranked")
    try:
        scores = list(scorer(question, [c.text for c in candidates]))
        if len(scores) != len(candidates):
            raise ValueError(f"scorer returned {len(scores)} scores for {len(candidates)} passages")
    except Exception as exc:
        if strict:
            raise
        msg = f"rerank failed, keeping fused order: {exc}"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return RankedList.from_ids(ids, "fused")
    order = sorted(range(len(ids)), key=lambda i: -scores[i])
    return RankedList(tuple((ids[i], float(scores[i])) for i in order), "reranked")


# -- per-handbook index --------------------------------------------------------

Embedder = Callable[[list[str]], list[np.ndarray]]


@dataclass
class HandbookIndex:
    handbook_id: str
    chunks: list[Chunk]
    sparse: SparseIndex
    dense: DenseIndex
    _by_id: dict[str, Chunk] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._by_id = {c.chunk_id: c for c in self.chunks}
        if any(chunk_handbook_id(cid) != self.handbook_id for cid in self._by_id):
            raise ValueError("index contains chunks from another handbook")

    def chunk(self, chunk_id: str) -> Chunk:
        return self._by_id[chunk_id]


def build_handbook_index(h: Handbook, embed: Embedder, chunk_cfg: ChunkingConfig | None = None,
                         cfg: RetrievalConfig | None = None) -> HandbookIndex:
    cfg = cfg or RetrievalConfig()
    chunks = chunk_handbook(h, chunk_cfg or ChunkingConfig())
    sparse = SparseIndex.build({c.chunk_id: bm25_tokens(c.text) for c in chunks}, k1=cfg.k1, b=cfg.b)
    vectors = embed([c.text for c in chunks]) if chunks else []
    dense = DenseIndex.build([c.chunk_id for c in chunks], vectors)
    return HandbookIndex(h.id, chunks, sparse, dense)


def hybrid_search(question: Question | str, index: HandbookIndex, cfg: RetrievalConfig,
                  embed: Embedder, scorer: Scorer, warnings: list[str] | None = None) -> list[Chunk]:
    """Sparse and dense candidates, RRF fusion, rerank of the fused head, top-k cut."""
    text = question.text if isinstance(question, Question) else question
    if not index.chunks:
        return []
    sparse = index.sparse.search(bm25_tokens(text), cfg.candidates_per_retriever)
    dense = dense_search(embed([text])[0], index.dense, cfg.candidates_per_retriever)
    fused = rrf_fuse([sparse, dense], cfg.k_rrf)
    head = [index.chunk(cid) for cid in fused.ids[: cfg.effective_rerank_depth]]
    reranked = rerank(text, head, scorer, strict=cfg.strict_rerank, warnings=warnings)
    return [index.chunk(cid) for cid in reranked.ids[: cfg.top_k_final]]


# -- persistence ---------------------------------------------------------------

def index_fingerprint(h: Handbook, chunk_cfg: ChunkingConfig, cfg: RetrievalConfig, embed_model: str) -> str:
    return sha256_hex(canonical_json({
        "handbook": sha256_hex(canonical_json(handbook_to_json(h))),
        "chunking": asdict(chunk_cfg),
        "bm25": {"k1": cfg.k1, "b": cfg.b},
        "embed_model": embed_model,
    }))


def save_index(idx: HandbookIndex, directory: Path, fingerprint: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / "sparse.json", idx.sparse.to_json())
    chunks_text = "".join(json.dumps(c.to_json(), sort_keys=True, ensure_ascii=False) + "\n" for c in idx.chunks)
    atomic_write_text(directory / "chunks.jsonl", chunks_text)
    buf = io.BytesIO()
    np.save(buf, idx.dense.matrix, allow_pickle=False)
    atomic_write_bytes(directory / "dense.npy", buf.getvalue())
    # manifest last: its presence marks a complete index
    write_json(directory / "manifest.json", {
        "handbook_id": idx.handbook_id,
        "config_hash": fingerprint,
        "chunk_count": len(idx.chunks),
        "embedding_dim": idx.dense.dim,
    })


def load_index(directory: Path, fingerprint: str | None = None) -> HandbookIndex | None:
    """Load a persisted index, or ``None`` if it is missing or stale."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        return None
    manifest = read_json(manifest_path)
    if fingerprint is not None and manifest.get("config_hash") != fingerprint:
        return None
    with open(directory / "chunks.jsonl", encoding="utf-8") as fh:
        chunks = [Chunk.from_json(json.loads(line)) for line in fh if line.strip()]
    if len(chunks) != manifest["chunk_count"]:
        return None
    matrix = np.load(directory / "dense.npy", allow_pickle=False)
    if matrix.shape[0] and matrix.shape[1] != manifest["embedding_dim"]:
        return None
    return HandbookIndex(
        manifest["handbook_id"],
        chunks,
        SparseIndex.from_json(read_json(directory / "sparse.json")),
        DenseIndex([c.chunk_id for c in chunks], matrix),
    )


def ensure_index(h: Handbook, directory: Path, embed: Embedder, embed_model: str,
                 chunk_cfg: ChunkingConfig, cfg: RetrievalConfig) -> tuple[HandbookIndex, bool]:
    """Return ``(index, built)``; rebuilds only when the manifest is missing or stale."""
    fp = index_fingerprint(h, chunk_cfg, cfg, embed_model)
    idx = load_index(directory, fp)
    if idx is not None:
        return idx, False
    idx = build_handbook_index(h, embed, chunk_cfg, cfg)
    save_index(idx, directory, fp)
    return idx, True
