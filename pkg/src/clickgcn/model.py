"""Token-bag base embeddings, neighbor aggregation and layer combination.

A node's layer-0 vector is the mean of its token embeddings. Layer ``l`` is
a weighted sum of the children's layer ``l-1`` vectors in a sampled tree
(no self term, no transform, no nonlinearity); weights are uniform for the
mean variant and a softmax over ``leaky_relu(w_l . [h_parent || h_child])``
for the attention and mask variants. The final embedding sums layers 0..L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import PAD, BipartiteGraph, SampledTree, sample_tree

VARIANTS = ("mean", "attention", "mask")
DEFAULT_DIM = 32
DEFAULT_LAYERS = 2
DEFAULT_SLOPE = 0.2


@dataclass
class ModelParams:
    embeddings: np.ndarray
    attention: np.ndarray | None
    variant: str
    n_layers: int
    leaky_slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        d = self.dim
        if d < 1:
            raise ValueError("embedding dimension must be >= 1")
        if self.uses_attention:
            if self.attention is None or self.attention.shape != (self.n_layers, 2 * d):
                raise ValueError(f"attention must have shape ({self.n_layers}, {2 * d})")
        elif self.attention is not None:
            raise ValueError("the mean variant has no attention vectors")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dtype(self):
        return self.embeddings.dtype

    @property
    def uses_attention(self) -> bool:
        return self.variant != "mean"

    @classmethod
    def init(cls, vocab_size: int, dim: int = DEFAULT_DIM, n_layers: int = DEFAULT_LAYERS,
             variant: str = "mask", rng: np.random.Generator | None = None,
             dtype=np.float32, leaky_slope: float = DEFAULT_SLOPE, scale: float | None = None):
        """Uniform init in ``[-scale, scale)``; default scale ``0.5 / dim``."""
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = 0.5 / dim if scale is None else scale
        emb = rng.uniform(-scale, scale, size=(vocab_size, dim)).astype(dtype)
        att = None
        if variant != "mean":
            att = rng.uniform(-scale, scale, size=(n_layers, 2 * dim)).astype(dtype)
        return cls(emb, att, variant, n_layers, leaky_slope)

    def copy(self) -> "ModelParams":
        return ModelParams(self.embeddings.copy(),
                           None if self.attention is None else self.attention.copy(),
                           self.variant, self.n_layers, self.leaky_slope)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.embeddings.astype(dtype),
                           None if self.attention is None else self.attention.astype(dtype),
                           self.variant, self.n_layers, self.leaky_slope)

    def with_variant(self, variant: str, attention: np.ndarray | None = None) -> "ModelParams":
        if variant != "mean" and attention is None:
            attention = np.zeros((self.n_layers, 2 * self.dim), dtype=self.dtype)
        return ModelParams(self.embeddings, None if variant == "mean" else attention,
                           variant, self.n_layers, self.leaky_slope)


@dataclass
class NodeTexts:
    """Token ids per global node, padded: ``tokens[n, :lengths[n]]``."""

    tokens: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_lists(cls, token_lists) -> "NodeTexts":
        width = max((len(t) for t in token_lists), default=0)
        tokens = np.full((len(token_lists), max(width, 1)), PAD, dtype=np.int64)
        for n, toks in enumerate(token_lists):
            tokens[n, :len(toks)] = toks
        return cls(tokens, np.array([len(t) for t in token_lists], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.lengths)

    @property
    def max_token(self) -> int:
        return int(self.tokens.max()) if self.tokens.size else -1


def mean_rows(emb: np.ndarray, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Mean of ``emb`` rows over each padded token row; empty rows give zeros."""
    rows = np.where(tokens[..., None] >= 0, emb[np.maximum(tokens, 0)], 0)
    total = rows.sum(axis=-2)
    return total / np.maximum(lengths, 1)[..., None].astype(emb.dtype)


def base_embedding(tokens, params: ModelParams) -> np.ndarray:
    """Layer-0 vector of one text: mean of its token rows."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    return mean_rows(params.embeddings, tokens, np.array([tokens.shape[1]]))[0]


def leaky_relu(x, slope: float = DEFAULT_SLOPE):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope: float = DEFAULT_SLOPE):
    # at exactly 0 use the mean of both one-sided slopes, which is what a
    # central difference measures there (all logits are 0 when w = 0)
    return np.where(x > 0, 1.0, np.where(x < 0, slope, 0.5 * (1.0 + slope))).astype(x.dtype)


def masked_softmax(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``valid``; all-invalid rows give zeros."""
    shifted = np.where(valid, logits, -np.inf)
    top = shifted.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0)
    ex = np.where(valid, np.exp(shifted - top), 0)
    denom = ex.sum(axis=-1, keepdims=True)
    return ex / np.where(denom > 0, denom, 1)


def attention_logits(h_v: np.ndarray, neighbors: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pre-activation ``w . [h_v || h_u]`` per neighbor (broadcasts over leading axes)."""
    d = h_v.shape[-1]
    return (h_v @ w[:d])[..., None] + neighbors @ w[d:]


def attention_weights(h_v, neighbors, w, leaky_slope: float = DEFAULT_SLOPE) -> np.ndarray:
    h_v, neighbors, w = np.asarray(h_v), np.asarray(neighbors), np.asarray(w)
    if neighbors.shape[0] < 1:
        raise ValueError("attention needs at least one neighbor")
    s = leaky_relu(attention_logits(h_v, neighbors, w), leaky_slope)
    return masked_softmax(s, np.ones(s.shape, dtype=bool))


def mean_weights(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.full(n, 1.0 / n)


def aggregate(h_v, neighbors, alpha) -> np.ndarray:
    """Weighted sum of neighbor vectors; ``h_v`` only matters through ``alpha``."""
    h_v, neighbors = np.asarray(h_v), np.asarray(neighbors)
    if len(neighbors) == 0:
        return np.zeros_like(h_v)
    return np.asarray(alpha) @ neighbors


def score(z_q, z_i) -> float:
    z_q, z_i = np.asarray(z_q), np.asarray(z_i)
    if z_q.shape != z_i.shape:
        raise ValueError("score needs equal-length vectors")
    return float(z_q @ z_i)


@dataclass
class ForwardTrace:
    """Intermediates of a batched forward pass.

    ``h[t][m]`` is the layer-``m`` vector of every depth-``t`` slot, shape
    ``(n, k**t, d)``. ``alpha[m]`` / ``logits[m]`` list, for each depth
    ``t`` in ``0..L-m``, the weights and pre-activation logits that produced
    ``h[t][m]`` from the children, shape ``(n, k**t, k)``.
    """

    tree: SampledTree
    unique_nodes: np.ndarray
    inverse: np.ndarray
    h: list[list[np.ndarray]]
    alpha: dict[int, list[np.ndarray]] = field(default_factory=dict)
    logits: dict[int, list[np.ndarray]] = field(default_factory=dict)
    z: np.ndarray | None = None


def forward(tree: SampledTree, params: ModelParams, texts: NodeTexts):
    """Final embeddings ``z`` (one row per tree target) and the trace."""
    L = params.n_layers
    if tree.depth != L:
        raise ValueError(f"tree depth {tree.depth} does not match model layers {L}")
    n, k, d = len(tree), tree.fanout, params.dim
    flat = np.concatenate([lvl.reshape(-1) for lvl in tree.levels])
    uniq, inverse = np.unique(flat, return_inverse=True)
    live = uniq >= 0
    h0u = np.zeros((len(uniq), d), dtype=params.dtype)
    nodes = uniq[live]
    h0u[live] = mean_rows(params.embeddings, texts.tokens[nodes], texts.lengths[nodes])
    h0 = h0u[inverse]

    h, start = [], 0
    for t in range(L + 1):
        width = k ** t
        h.append([h0[start:start + n * width].reshape(n, width, d)])
        start += n * width
    trace = ForwardTrace(tree, uniq, inverse, h)

    for m in range(1, L + 1):
        trace.alpha[m], trace.logits[m] = [], []
        for t in range(L - m + 1):
            parent = h[t][m - 1]
            width = parent.shape[1]
            child = h[t + 1][m - 1].reshape(n, width, k, d)
            valid = tree.levels[t + 1].reshape(n, width, k) >= 0
            if params.uses_attention:
                e = attention_logits(parent, child, params.attention[m - 1])
                alpha = masked_softmax(leaky_relu(e, params.leaky_slope), valid)
            else:
                e = None
                count = valid.sum(axis=-1, keepdims=True)
                alpha = (valid / np.maximum(count, 1)).astype(params.dtype)
            trace.alpha[m].append(alpha)
            trace.logits[m].append(e)
            h[t].append(np.einsum("npk,npkd->npd", alpha, child))

    z = h[0][0][:, 0, :].copy()
    for m in range(1, L + 1):
        z += h[0][m][:, 0, :]
    trace.z = z
    return z, trace


def backward(trace: ForwardTrace, dz: np.ndarray, params: ModelParams):
    """Gradients of a scalar loss w.r.t. (embeddings, attention) given ``dL/dz``."""
    L, tree = params.n_layers, trace.tree
    n, k, d = len(tree), tree.fanout, params.dim
    h = trace.h
    dh = [[np.zeros_like(h[t][m]) for m in range(L - t + 1)] for t in range(L + 1)]
    for m in range(L + 1):
        dh[0][m][:, 0, :] += dz
    d_att = None if params.attention is None else np.zeros_like(params.attention)

    for m in range(L, 0, -1):
        for t in range(L - m + 1):
            g = dh[t][m]
            parent = h[t][m - 1]
            width = parent.shape[1]
            child = h[t + 1][m - 1].reshape(n, width, k, d)
            alpha = trace.alpha[m][t]
            dchild = alpha[..., None] * g[:, :, None, :]
            if params.uses_attention:
                w = params.attention[m - 1]
                dalpha = np.einsum("npkd,npd->npk", child, g)
                ds = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))
                de = ds * leaky_relu_grad(trace.logits[m][t], params.leaky_slope)
                d_att[m - 1, :d] += np.einsum("npk,npd->d", de, parent)
                d_att[m - 1, d:] += np.einsum("npk,npkd->d", de, child)
                dh[t][m - 1] += de.sum(axis=-1)[..., None] * w[:d]
                dchild += de[..., None] * w[d:]
            dh[t + 1][m - 1] += dchild.reshape(n, width * k, d)

    dh0 = np.concatenate([dh[t][0].reshape(-1, d) for t in range(L + 1)])
    dnode = np.zeros((len(trace.unique_nodes), d), dtype=dh0.dtype)
    np.add.at(dnode, trace.inverse, dh0)
    return dnode, d_att


def scatter_token_grads(unique_nodes: np.ndarray, dnode: np.ndarray, texts: NodeTexts,
                        vocab_size: int) -> np.ndarray:
    """Push per-node layer-0 gradients onto token rows (mean -> 1/len share)."""
    live = unique_nodes >= 0
    nodes, g = unique_nodes[live], dnode[live]
    toks = texts.tokens[nodes]
    share = g / np.maximum(texts.lengths[nodes], 1)[:, None].astype(g.dtype)
    rows = np.broadcast_to(share[:, None, :], toks.shape + (g.shape[1],))
    keep = toks >= 0
    d_emb = np.zeros((vocab_size, g.shape[1]), dtype=g.dtype)
    np.add.at(d_emb, toks[keep], rows[keep])
    return d_emb


@dataclass
class GraphModel:
    """Parameters bound to the graph and node texts they are evaluated on."""

    params: ModelParams
    graph: BipartiteGraph
    texts: NodeTexts
    fanout: int = 10

    def __post_init__(self):
        if len(self.texts) != self.graph.n_nodes:
            raise ValueError(f"node texts cover {len(self.texts)} nodes, graph has {self.graph.n_nodes}")
        if self.texts.max_token >= self.params.vocab_size:
            raise ValueError("node texts reference tokens outside the checkpoint vocabulary")

    def embed_nodes(self, nodes, batch_size: int = 512) -> np.ndarray:
        """Final embeddings using top-weight neighborhoods and no mask."""
        nodes = np.asarray(nodes, dtype=np.int64)
        out = np.zeros((len(nodes), self.params.dim), dtype=self.params.dtype)
        for lo in range(0, len(nodes), batch_size):
            tree = sample_tree(self.graph, nodes[lo:lo + batch_size], self.params.n_layers, self.fanout)
            out[lo:lo + batch_size] = forward(tree, self.params, self.texts)[0]
        return out

    def embed_queries(self, queries=None) -> np.ndarray:
        queries = np.arange(self.graph.n_queries) if queries is None else np.asarray(queries)
        return self.embed_nodes(queries)

    def embed_items(self, items=None) -> np.ndarray:
        items = np.arange(self.graph.n_items) if items is None else np.asarray(items)
        return self.embed_nodes(items + self.graph.n_queries)

    def embed_tokens(self, tokens) -> np.ndarray:
        return base_embedding(tokens, self.params)
