"""Reusable neural sublayers.

Positional embedding lookup, multi-head causal self-attention (plain or
with a learned locality mask on the logits), and the pointwise
feed-forward block.  All forward functions accept a single sequence
(n, d) or a batch (b, n, d).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

INIT_STD = 0.02


def init_param(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def dropout(t: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate == 0.0:
        return t
    keep = (rng.random(t.shape) >= rate) / (1.0 - rate)
    return ad.mul(t, Tensor(keep))


class EmbeddingTable:
    """vocab_size x width lookup table; row ``pad_index`` is the pad token."""

    def __init__(self, vocab_size: int, width: int,
                 rng: np.random.Generator, pad_index: int = 0):
        self.table = init_param(rng, (vocab_size, width))
        self.pad_index = pad_index

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def width(self) -> int:
        return self.table.shape[1]

    def lookup(self, ids: np.ndarray) -> Tensor:
        return ad.gather_rows(self.table, np.asarray(ids))


class PositionTable:
    """Learnable embedding per sequence position, max_len x width."""

    def __init__(self, max_len: int, width: int, rng: np.random.Generator):
        self.table = init_param(rng, (max_len, width))

    @property
    def max_len(self) -> int:
        return self.table.shape[0]


class DistanceTable:
    """Relative-distance embeddings, 2*max_len x head_width.

    Pair (i, j) with 0-based positions reads row max_len + i - j; causal
    pairs (j <= i) land in [max_len, 2*max_len - 1], rows below max_len
    are reserved and only ever touched under a mask that zeroes their
    gradient.
    """

    def __init__(self, max_len: int, head_width: int, rng: np.random.Generator):
        self.max_len = max_len
        self.table = init_param(rng, (2 * max_len, head_width))


class AttentionParams:
    """Per-head projections plus the shared output matrix.

    Each head owns w_q/w_k/w_v of shape (width, width/heads).  When the
    locality mask is enabled each head additionally owns w_l
    (width/heads, 1) and b_l (1,).
    """

    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 local_mask: bool = False):
        if width % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide width ({width})")
        head_width = width // heads
        self.heads = heads
        self.head_width = head_width
        self.w_q = [init_param(rng, (width, head_width)) for _ in range(heads)]
        self.w_k = [init_param(rng, (width, head_width)) for _ in range(heads)]
        self.w_v = [init_param(rng, (width, head_width)) for _ in range(heads)]
        self.w_o = init_param(rng, (width, width))
        if local_mask:
            self.w_l = [init_param(rng, (head_width, 1)) for _ in range(heads)]
            self.b_l = [zeros_param((1,)) for _ in range(heads)]
        else:
            self.w_l = None
            self.b_l = None

    def parameters(self):
        for m in range(self.heads):
            yield f"head{m}.w_q", self.w_q[m]
            yield f"head{m}.w_k", self.w_k[m]
            yield f"head{m}.w_v", self.w_v[m]
        yield "w_o", self.w_o
        if self.w_l is not None:
            for m in range(self.heads):
                yield f"head{m}.w_l", self.w_l[m]
                yield f"head{m}.b_l", self.b_l[m]


def embed_sequence(ids: np.ndarray, emb: EmbeddingTable, pos: PositionTable) -> Tensor:
    """Token embedding plus position embedding, row per position.

    ids: (n,) or (b, n) integer array already padded to the table length.
    """
    ids = np.asarray(ids)
    n = ids.shape[-1]
    if n != pos.max_len:
        raise ValueError(f"ids padded to {n}, position table holds {pos.max_len}")
    return ad.add(emb.lookup(ids), pos.table)


def _distance_offsets(n: int) -> np.ndarray:
    """Index matrix idx[i, j] = n + i - j into a 2n-row distance table."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return n + i - j


def local_mask_logit(q_head: Tensor, k_head: Tensor, d_vec: Tensor,
                     w_l: Tensor, b_l: Tensor) -> Tensor:
    """Locality logit for one (i, j) pair: (q + k + d) . w_l + b_l.

    q_head and k_head are the already-projected per-head query/key rows;
    returns a scalar added to the raw attention logit before softmax.
    """
    s = ad.add(ad.add(q_head, k_head), d_vec)
    dh = s.shape[-1]
    out = ad.matmul(ad.reshape(s, (1, dh)), w_l)
    return ad.reshape(ad.add(out, b_l), ())


def _locality_logits(q: Tensor, k: Tensor, dist: DistanceTable,
                     w_l: Tensor, b_l: Tensor, n: int) -> Tensor:
    """Batched locality logits, (b, n, n), for already-projected q and k."""
    b = q.shape[0]
    q_part = ad.reshape(ad.matmul(q, w_l), (b, n))
    k_part = ad.reshape(ad.matmul(k, w_l), (b, n))
    logits = ad.outer_add(q_part, k_part)
    d_proj = ad.matmul(dist.table, w_l)
    d_mat = ad.reshape(ad.gather_rows(d_proj, _distance_offsets(n)), (n, n))
    return ad.add(ad.add(logits, d_mat), b_l)


def causal_attention(h: Tensor, params: AttentionParams,
                     use_local_mask: bool = False,
                     distances: DistanceTable | list[DistanceTable] | None = None,
                     pad_mask: np.ndarray | None = None,
                     drop_rate: float = 0.0,
                     rng: np.random.Generator | None = None,
                     collect: list | None = None) -> Tensor:
    """Multi-head scaled dot-product attention with a causal mask.

    Position i attends to j <= i only; pad keys are masked everywhere
    except on the diagonal, which keeps fully-padded query rows finite
    (their outputs are never read).  With the locality mask enabled the
    learned logit is added before the softmax, never unmasking j > i.
    ``collect``, when given, receives one (b, n, n) post-softmax weight
    array per head.
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = ad.reshape(h, (1,) + h.shape)
        if pad_mask is not None:
            pad_mask = np.asarray(pad_mask, dtype=bool)[None, :]
    b, n, _ = h.shape

    if use_local_mask and (params.w_l is None or distances is None):
        raise ConfigError("local mask enabled but W_L/b_L or distance table missing")

    forbidden = np.broadcast_to(np.triu(np.ones((n, n), dtype=bool), k=1), (b, n, n))
    if pad_mask is not None:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        off_diag = ~np.eye(n, dtype=bool)
        forbidden = forbidden | (pad_mask[:, None, :] & off_diag[None, :, :])

    inv_scale = 1.0 / np.sqrt(params.head_width)
    head_outs = []
    for m in range(params.heads):
        q = ad.matmul(h, params.w_q[m])
        k = ad.matmul(h, params.w_k[m])
        v = ad.matmul(h, params.w_v[m])
        logits = ad.scale(ad.matmul(q, ad.transpose(k)), inv_scale)
        if use_local_mask:
            dist = distances[m] if isinstance(distances, list) else distances
            logits = ad.add(
                logits, _locality_logits(q, k, dist, params.w_l[m], params.b_l[m], n)
            )
        logits = ad.masked_fill(logits, forbidden, -np.inf)
        weights = ad.softmax_lastdim(logits)
        if collect is not None:
            collect.append(weights.data.copy())
        if drop_rate:
            weights = dropout(weights, drop_rate, rng)
        head_outs.append(ad.matmul(weights, v))

    out = ad.matmul(ad.concat_lastdim(head_outs), params.w_o)
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


def pointwise_ffn(h: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                  drop_rate: float = 0.0,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Per-row ReLU(h w1 + b1) w2 + b2; residual/normalization is the
    caller's job."""
    a = ad.relu(ad.add(ad.matmul(h, w1), b1))
    if drop_rate:
        a = dropout(a, drop_rate, rng)
    return ad.add(ad.matmul(a, w2), b2)
