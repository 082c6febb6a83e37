"""Per-character BM25 retrieval over memory items.

Scoring is Okapi BM25 with the non-negative idf ``ln(1 + (N - df + .5) / (df + .5))``
and k1=1.2, b=0.75. Rankings break score ties by ascending item id.

A dense retriever plugs in through :class:`DenseIndex`; anything exposing
``item_ids``, ``mem_types``, ``by_type`` and ``score_all`` can be passed to
:func:`retrieve` and :func:`retrieve_per_type`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .store import MemoryItem, MemType, dump_items, items_by_character, load_items
from .text import TokenList, analyze

K1 = 1.2
B = 0.75
INDEX_FORMAT = "memq-index"
INDEX_VERSION = 1


class EmptyCorpus(ValueError):
    pass


@dataclass(frozen=True)
class RankedCandidate:
    item_id: str
    raw_score: float
    mem_type: MemType
    composite_score: float | None = None

    def with_composite(self, value: float) -> RankedCandidate:
        return replace(self, composite_score=value)

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "raw_score": self.raw_score,
            "mem_type": self.mem_type.value,
            "composite_score": self.composite_score,
        }


class Scorer(Protocol):
    item_ids: tuple[str, ...]
    mem_types: tuple[MemType, ...]
    by_type: dict[MemType, np.ndarray]

    def score_all(self, question: str | TokenList | Sequence[str]) -> np.ndarray: ...

    def id_order(self) -> np.ndarray: ...


class _Ranked:
    item_ids: tuple[str, ...]
    mem_types: tuple[MemType, ...]

    def _init_partition(self) -> None:
        types = np.array([t == MemType.SEMANTIC for t in self.mem_types], dtype=bool)
        self.by_type = {
            MemType.SEMANTIC: np.flatnonzero(types),
            MemType.EPISODIC: np.flatnonzero(~types),
        }
        # rank of each doc's id in ascending id order, for tie-breaking
        order = sorted(range(len(self.item_ids)), key=self.item_ids.__getitem__)
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        self._id_rank = rank
        self._pos = {iid: i for i, iid in enumerate(self.item_ids)}

    def id_order(self) -> np.ndarray:
        return self._id_rank

    def position(self, item_id: str) -> int:
        return self._pos[item_id]

    @property
    def doc_count(self) -> int:
        return len(self.item_ids)


class InvertedIndex(_Ranked):
    """BM25 index over one character's memory items. Immutable once built."""

    def __init__(
        self,
        character_id: str,
        item_ids: Sequence[str],
        mem_types: Sequence[MemType],
        token_lists: Sequence[Sequence[str]] | None = None,
        *,
        postings: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
        doc_lengths: Sequence[int] | None = None,
        k1: float = K1,
        b: float = B,
    ):
        if not item_ids:
            raise EmptyCorpus(f"no memory items for character {character_id!r}")
        self.character_id = character_id
        self.item_ids = tuple(item_ids)
        self.mem_types = tuple(MemType(t) for t in mem_types)
        self.k1 = k1
        self.b = b
        if token_lists is not None:
            postings, doc_lengths = self._invert(token_lists)
        assert postings is not None and doc_lengths is not None
        self.postings = postings
        self.doc_lengths = np.asarray(doc_lengths, dtype=np.int64)
        self.avg_doc_len = float(self.doc_lengths.mean())
        # per-document length normalisation term of the BM25 denominator
        if self.avg_doc_len > 0:
            self._norm = self.k1 * (1 - self.b + self.b * self.doc_lengths / self.avg_doc_len)
        else:
            self._norm = np.full(len(self.item_ids), self.k1 * (1 - self.b))
        self._init_partition()

    @staticmethod
    def _invert(token_lists: Sequence[Sequence[str]]):
        acc: dict[str, dict[int, int]] = {}
        lengths = []
        for doc, toks in enumerate(token_lists):
            lengths.append(len(toks))
            for t in toks:
                row = acc.setdefault(t, {})
                row[doc] = row.get(doc, 0) + 1
        postings = {
            t: (np.fromiter(row.keys(), np.int64, len(row)), np.fromiter(row.values(), np.float64, len(row)))
            for t, row in acc.items()
        }
        return postings, lengths

    def df(self, token: str) -> int:
        p = self.postings.get(token)
        return 0 if p is None else len(p[0])

    def idf(self, token: str) -> float:
        n, df = self.doc_count, self.df(token)
        return math.log(1 + (n - df + 0.5) / (df + 0.5))

    def score_all(self, question: str | TokenList | Sequence[str]) -> np.ndarray:
        query = analyze(question) if isinstance(question, str) else question
        scores = np.zeros(self.doc_count)
        for t in query:
            p = self.postings.get(t)
            if p is None:
                continue
            docs, tf = p
            idf = self.idf(t)
            scores[docs] += idf * tf * (self.k1 + 1) / (tf + self._norm[docs])
        return scores

    # -- persistence -------------------------------------------------------

    def to_json(self) -> str:
        obj = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "character_id": self.character_id,
            "k1": self.k1,
            "b": self.b,
            "items": [
                [iid, t.value, int(n)] for iid, t, n in zip(self.item_ids, self.mem_types, self.doc_lengths)
            ],
            "postings": {
                t: [[int(d), int(f)] for d, f in zip(*self.postings[t])] for t in sorted(self.postings)
            },
        }
        return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> InvertedIndex:
        obj = json.loads(text)
        if obj.get("format") != INDEX_FORMAT or obj.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported index file: {obj.get('format')} v{obj.get('version')}")
        postings = {
            t: (np.array([d for d, _ in rows], dtype=np.int64), np.array([f for _, f in rows], dtype=np.float64))
            for t, rows in obj["postings"].items()
        }
        ids, types, lengths = zip(*obj["items"])
        return cls(
            obj["character_id"], ids, [MemType(t) for t in types],
            postings=postings, doc_lengths=lengths, k1=obj["k1"], b=obj["b"],
        )


def build_index(items: Sequence[MemoryItem], k1: float = K1, b: float = B) -> InvertedIndex:
    if not items:
        raise EmptyCorpus("no memory items")
    cids = {it.character_id for it in items}
    if len(cids) != 1:
        raise ValueError(f"items span {len(cids)} characters; build one index per character")
    return InvertedIndex(
        items[0].character_id,
        [it.item_id for it in items],
        [it.mem_type for it in items],
        [analyze(it.text).tokens for it in items],
        k1=k1,
        b=b,
    )


def bm25_score(index: InvertedIndex, query: str | TokenList | Sequence[str], item_id: str) -> float:
    return float(index.score_all(query)[index.position(item_id)])


def _top(index: Scorer, scores: np.ndarray, docs: np.ndarray, k: int) -> list[RankedCandidate]:
    if len(docs) == 0:
        return []
    sub = scores[docs]
    order = np.lexsort((index.id_order()[docs], -sub))[:k]
    return [
        RankedCandidate(index.item_ids[d], float(scores[d]), index.mem_types[d])
        for d in docs[order]
    ]


def retrieve(index: Scorer, question: str | TokenList, k: int) -> list[RankedCandidate]:
    """Top-``k`` items by raw score."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not index.item_ids:
        raise EmptyCorpus("empty index")
    scores = index.score_all(question)
    return _top(index, scores, np.arange(len(index.item_ids)), k)


def retrieve_per_type(index: Scorer, question: str | TokenList, k: int) -> list[RankedCandidate]:
    """Candidate pool of top-``k`` semantic items followed by top-``k`` episodic items."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not index.item_ids:
        raise EmptyCorpus("empty index")
    scores = index.score_all(question)
    return _top(index, scores, index.by_type[MemType.SEMANTIC], k) + _top(
        index, scores, index.by_type[MemType.EPISODIC], k
    )


# --------------------------------------------------------------------------
# Dense retrieval slot


class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Signed feature hashing of tokenizer output, L2-normalised.

    Deterministic across processes (blake2b, not ``hash()``); meant for
    tests and as a shape-compatible stand-in for a trained encoder.
    """

    def __init__(self, dim: int = 512):
        self.dim = dim

    def _bucket(self, token: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
        return h % self.dim, 1.0 if (h >> 63) & 1 else -1.0

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for t in analyze(text):
                j, sign = self._bucket(t)
                out[i, j] += sign
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return out / norms


class DenseIndex(_Ranked):
    """Inner-product retrieval over embedded memory items."""

    def __init__(self, items: Sequence[MemoryItem], embedder: Embedder):
        if not items:
            raise EmptyCorpus("no memory items")
        self.character_id = items[0].character_id
        self.item_ids = tuple(it.item_id for it in items)
        self.mem_types = tuple(it.mem_type for it in items)
        self.embedder = embedder
        self.matrix = np.asarray(embedder.embed([it.text for it in items]), dtype=np.float64)
        self._init_partition()

    def score_all(self, question: str | TokenList | Sequence[str]) -> np.ndarray:
        text = question if isinstance(question, str) else " ".join(question)
        q = np.asarray(self.embedder.embed([text]), dtype=np.float64)[0]
        return self.matrix @ q


# --------------------------------------------------------------------------
# Index directory: manifest.json + items.jsonl + one JSON file per character


def _index_filename(character_id: str) -> str:
    return hashlib.sha256(character_id.encode("utf-8")).hexdigest()[:16] + ".json"


def write_index_dir(path: str | Path, items: Sequence[MemoryItem]) -> dict[str, InvertedIndex]:
    path = Path(path)
    (path / "characters").mkdir(parents=True, exist_ok=True)
    indexes = {}
    manifest = {}
    for cid, its in items_by_character(items).items():
        idx = build_index(its)
        name = _index_filename(cid)
        (path / "characters" / name).write_text(idx.to_json() + "\n", encoding="utf-8")
        manifest[cid] = f"characters/{name}"
        indexes[cid] = idx
    (path / "items.jsonl").write_text(dump_items(items), encoding="utf-8")
    (path / "manifest.json").write_text(
        json.dumps(
            {"format": INDEX_FORMAT, "version": INDEX_VERSION, "characters": manifest},
            ensure_ascii=False, sort_keys=True, indent=1,
        )
        + "\n",
        encoding="utf-8",
    )
    return indexes


@dataclass
class IndexStore:
    items: list[MemoryItem]
    indexes: dict[str, InvertedIndex]

    def __post_init__(self):
        self.by_id = {it.item_id: it for it in self.items}

    @classmethod
    def build(cls, items: Iterable[MemoryItem]) -> IndexStore:
        items = list(items)
        return cls(items, {cid: build_index(its) for cid, its in items_by_character(items).items()})

    @classmethod
    def load(cls, path: str | Path) -> IndexStore:
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        if manifest.get("format") != INDEX_FORMAT or manifest.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported index directory {path}")
        indexes = {
            cid: InvertedIndex.from_json((path / rel).read_text(encoding="utf-8"))
            for cid, rel in manifest["characters"].items()
        }
        return cls(load_items(path / "items.jsonl"), indexes)
