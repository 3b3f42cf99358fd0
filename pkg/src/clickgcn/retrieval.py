"""Brute-force inner-product item index."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .graph import FormatError, _Reader
from .ingest import Catalog, normalize, tokenize
from .model import GraphModel

INDEX_MAGIC = b"SGCI"
INDEX_VERSION = 1


class UnembeddableQuery(ValueError):
    pass


def fingerprint(checkpoint_bytes: bytes, graph_bytes: bytes) -> bytes:
    return hashlib.sha256(checkpoint_bytes + graph_bytes).digest()


@dataclass
class ItemIndex:
    embeddings: np.ndarray
    external_ids: list[str]
    fingerprint: bytes = bytes(32)
    _id_rank: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.external_ids):
            raise ValueError("one embedding row per external id required")
        if len(self.fingerprint) != 32:
            raise ValueError("fingerprint must be 32 bytes")
        rank = np.empty(len(self.external_ids), dtype=np.int64)
        rank[sorted(range(len(self.external_ids)), key=self.external_ids.__getitem__)] = \
            np.arange(len(self.external_ids))
        self._id_rank = rank

    def __len__(self) -> int:
        return len(self.external_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def scores(self, z_query: np.ndarray) -> np.ndarray:
        return self.embeddings @ np.asarray(z_query, dtype=np.float32)

    def top_k(self, scores: np.ndarray, k: int) -> np.ndarray:
        """Row ids of the ``k`` best scores, score desc then external id asc."""
        n = len(scores)
        k = min(k, n)
        if k < n:
            cut = np.partition(scores, n - k)[n - k]
            above = np.flatnonzero(scores > cut)
            tied = np.flatnonzero(scores == cut)
            tied = tied[np.argsort(self._id_rank[tied], kind="stable")][:k - len(above)]
            cand = np.concatenate([above, tied])
        else:
            cand = np.arange(n)
        order = np.lexsort((self._id_rank[cand], -scores[cand]))
        return cand[order]


def build_index(model: GraphModel, catalog: Catalog, fp: bytes = bytes(32)) -> ItemIndex:
    """Final item embeddings with top-weight neighborhoods, no mask."""
    if len(catalog) != model.graph.n_items:
        raise ValueError(f"catalog has {len(catalog)} items, graph has {model.graph.n_items}")
    return ItemIndex(model.embed_items().astype(np.float32), list(catalog.external_ids), fp)


def embed_query(model: GraphModel, query_text: str, query_index: dict[str, int], vocab) -> np.ndarray:
    """Known query -> its graph embedding; unseen text -> token-bag embedding."""
    q = query_index.get(normalize(query_text))
    if q is not None:
        return model.embed_queries([q])[0]
    tokens = tokenize(query_text, vocab)
    if not tokens:
        raise UnembeddableQuery(f"unembeddable query: {query_text!r}")
    return model.embed_tokens(tokens)


def search(index: ItemIndex, model: GraphModel, query_text: str, topk: int,
           query_index: dict[str, int], vocab) -> list[tuple[str, float]]:
    if topk < 1:
        raise ValueError("topk must be >= 1")
    z = embed_query(model, query_text, query_index, vocab)
    if z.shape[0] != index.dim:
        raise ValueError("query embedding dimension does not match the index")
    scores = index.scores(z)
    rows = index.top_k(scores, topk)
    return [(index.external_ids[r], float(scores[r])) for r in rows]


def index_to_bytes(index: ItemIndex) -> bytes:
    parts = [INDEX_MAGIC, struct.pack("<III", INDEX_VERSION, len(index), index.dim),
             index.embeddings.astype("<f4").tobytes()]
    for ext in index.external_ids:
        raw = ext.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(index.fingerprint)
    return b"".join(parts)


def index_from_bytes(data: bytes) -> ItemIndex:
    r = _Reader(data)
    r.magic(INDEX_MAGIC, INDEX_VERSION)
    n, d = r.unpack("<II")
    emb = r.array("<f4", n * d).reshape(n, d).astype(np.float32)
    ids = [r.string() for _ in range(n)]
    fp = bytes(r.take(32))
    r.done()
    return ItemIndex(emb, ids, fp)


def save_index(index: ItemIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(index_to_bytes(index))


def load_index(path) -> ItemIndex:
    with open(path, "rb") as fh:
        return index_from_bytes(fh.read())


__all__ = ["ItemIndex", "UnembeddableQuery", "FormatError", "build_index", "search",
           "embed_query", "fingerprint", "save_index", "load_index",
           "index_to_bytes", "index_from_bytes"]
