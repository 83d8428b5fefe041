"""Stacked causal self-attention encoders.

The intent encoder and the item encoder are the same stack; the item
encoder additionally carries a distance table and per-head locality
parameters (``use_local_mask``).  Blocks are pre-normalization:

    h   = h + attention(layer_norm(h))
    h   = h + ffn(layer_norm(h))
    out = layer_norm(h)            # once, after the last block
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    AttentionParams,
    DistanceTable,
    causal_attention,
    dropout,
    ones_param,
    pointwise_ffn,
    zeros_param,
    init_param,
)

LAYER_NORM_EPS = 1e-8


class EncoderLayer:
    """Parameter bundle for one attention + feed-forward block."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 local_mask: bool):
        self.attn = AttentionParams(width, heads, rng, local_mask=local_mask)
        self.ln_attn_gain = ones_param((width,))
        self.ln_attn_bias = zeros_param((width,))
        self.ln_ffn_gain = ones_param((width,))
        self.ln_ffn_bias = zeros_param((width,))
        # feed-forward inner width equals the model width
        self.w1 = init_param(rng, (width, width))
        self.b1 = zeros_param((width,))
        self.w2 = init_param(rng, (width, width))
        self.b2 = zeros_param((width,))

    def parameters(self):
        for name, t in self.attn.parameters():
            yield f"attn.{name}", t
        yield "ln_attn.gain", self.ln_attn_gain
        yield "ln_attn.bias", self.ln_attn_bias
        yield "ln_ffn.gain", self.ln_ffn_gain
        yield "ln_ffn.bias", self.ln_ffn_bias
        yield "ffn.w1", self.w1
        yield "ffn.b1", self.b1
        yield "ffn.w2", self.w2
        yield "ffn.b2", self.b2


class EncoderStack:
    """L blocks plus the final normalization.

    With ``use_local_mask`` the stack owns one distance table shared by
    all layers (or one per head when ``per_head_distance``); each layer
    owns its own locality parameters.
    """

    def __init__(self, width: int, heads: int, num_layers: int, max_len: int,
                 rng: np.random.Generator, use_local_mask: bool = False,
                 per_head_distance: bool = False):
        self.width = width
        self.heads = heads
        self.max_len = max_len
        self.use_local_mask = use_local_mask
        self.layers = [
            EncoderLayer(width, heads, rng, local_mask=use_local_mask)
            for _ in range(num_layers)
        ]
        self.ln_final_gain = ones_param((width,))
        self.ln_final_bias = zeros_param((width,))
        self.distance: DistanceTable | list[DistanceTable] | None = None
        if use_local_mask:
            head_width = width // heads
            if per_head_distance:
                self.distance = [
                    DistanceTable(max_len, head_width, rng) for _ in range(heads)
                ]
            else:
                self.distance = DistanceTable(max_len, head_width, rng)

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name, t in layer.parameters():
                yield f"layer{i}.{name}", t
        yield "ln_final.gain", self.ln_final_gain
        yield "ln_final.bias", self.ln_final_bias
        if isinstance(self.distance, list):
            for m, d in enumerate(self.distance):
                yield f"distance{m}.table", d.table
        elif self.distance is not None:
            yield "distance.table", self.distance.table


def encode(m_in: Tensor, stack: EncoderStack,
           pad_mask: np.ndarray | None = None,
           drop_rate: float = 0.0,
           rng: np.random.Generator | None = None,
           collect_attention: list | None = None) -> Tensor:
    """Run the stack over input embeddings (n, d) or (b, n, d).

    ``pad_mask`` marks left-padding positions (True = pad); no position
    attends to a pad.  ``collect_attention``, when given, receives one
    list of per-head (b, n, n) post-softmax weight arrays per layer.
    """
    h = m_in
    for layer in stack.layers:
        normed = ad.layer_norm(h, layer.ln_attn_gain, layer.ln_attn_bias,
                               LAYER_NORM_EPS)
        layer_sink = [] if collect_attention is not None else None
        attn = causal_attention(
            normed, layer.attn,
            use_local_mask=stack.use_local_mask,
            distances=stack.distance,
            pad_mask=pad_mask,
            drop_rate=drop_rate,
            rng=rng,
            collect=layer_sink,
        )
        if collect_attention is not None:
            collect_attention.append(layer_sink)
        h = ad.add(h, attn)
        normed = ad.layer_norm(h, layer.ln_ffn_gain, layer.ln_ffn_bias,
                               LAYER_NORM_EPS)
        h = ad.add(h, pointwise_ffn(normed, layer.w1, layer.b1, layer.w2,
                                    layer.b2, drop_rate, rng))
    return ad.layer_norm(h, stack.ln_final_gain, stack.ln_final_bias,
                         LAYER_NORM_EPS)
