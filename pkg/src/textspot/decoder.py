"""Text-query decoder with mask-guided cross-attention.

N learned queries read the encoder tokens through D pre-norm blocks
(cross-attention, self-attention, FFN). From the second block on, each
query's cross-attention is restricted to the image region its own previous
mask prediction marked as foreground; a query whose predicted region is
empty falls back to unmasked attention. The decoded query embeddings combine
with a pixel embedding into one semantic feature map per query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from textspot import autodiff as ad
from textspot.layers import CrossFirstDecoderLayer, LayerNorm, Linear


@dataclass
class PixelEmbedding:
    """Per-pixel embedding at 1/4 scale, channels last."""

    features: ad.Tensor  # (Hq, Wq, d)


@dataclass
class SemanticFeatures:
    """One semantic map per query: text embedding times pixel embedding."""

    s: ad.Tensor          # (N, Hq, Wq, d)
    text_embed: ad.Tensor  # (N, d)


class PixelProjection:
    """Linear (1x1) projection of P2; the output keeps the 1/4-scale grid."""

    def __init__(self, store, d):
        self.proj = Linear(store, "pixel.proj", d, d)

    def pixel_embed(self, pyramid):
        return PixelEmbedding(features=self.proj(pyramid.p2))


def semantic_features(text_embed, pixel):
    """Channelwise broadcast product S[i, y, x, c] = text[i, c] * pixel[y, x, c].

    All query maps live in one (N, Hq, Wq, d) tensor so the downstream heads
    can batch over queries.
    """
    n, d = text_embed.shape
    lifted = ad.reshape(text_embed, (n, 1, 1, d))
    return SemanticFeatures(s=lifted * pixel.features, text_embed=text_embed)


class QueryDecoder:
    def __init__(self, store, d, layers, heads, num_queries):
        self.num_queries = num_queries
        self.query_embed = store.create("decoder.query_embed", (num_queries, d), init="normal", std=1.0)
        self.layers = [CrossFirstDecoderLayer(store, f"decoder.layer{i}", d, heads) for i in range(layers)]
        self.final_ln = LayerNorm(store, "decoder.final_ln", d)

    def decode(self, token_seq, pixel, seg_head, masked=True):
        """Run the query stack over the tokens; returns embeddings (N, d)."""
        q = self.query_embed
        for i, layer in enumerate(self.layers):
            blocked = None
            if masked and i > 0:
                blocked = self._blocked_from_aux(q, pixel, seg_head, token_seq)
            q = layer(q, token_seq.tokens, blocked)
        return self.final_ln(q)

    def _blocked_from_aux(self, q, pixel, seg_head, token_seq):
        """Boolean (N, L) cross-attention block mask from the previous layer.

        The mask head is reused on detached inputs: thresholding is not
        differentiable, so no gradient flows through this branch.
        """
        aux_text = self.final_ln(q.detach())
        aux_pixel = PixelEmbedding(features=pixel.features.detach())
        logits = seg_head.segment(semantic_features(aux_text, aux_pixel).s)
        fg = logits.logits.data >= 0.0  # sigmoid >= 0.5
        n, hq, wq = fg.shape
        allowed_parts = []
        for h, w in token_seq.level_shapes:
            step_y, step_x = hq // h, wq // w
            sub = fg[:, ::step_y, ::step_x]
            allowed_parts.append(sub.reshape(n, h * w))
        allowed = np.concatenate(allowed_parts, axis=1)
        empty = ~allowed.any(axis=1)
        allowed[empty] = True
        return ~allowed
