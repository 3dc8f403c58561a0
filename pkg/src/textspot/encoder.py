"""Convolutional pyramid extraction and the token encoder over its levels.

A small channels-last backbone produces strides 4/8/16/32, a top-down pathway
with 1x1 lateral projections and nearest-neighbor upsampling fuses them, and
the three coarsest maps are flattened into one token sequence (coarsest level
first) for dense self-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from textspot import autodiff as ad
from textspot.layers import EncoderLayer, LayerNorm, Linear
from textspot.positional import sine_grid_2d


@dataclass
class FeaturePyramid:
    """Fused maps, channels last, all with the same channel count."""

    p2: ad.Tensor  # (H/4,  W/4,  d)
    p3: ad.Tensor  # (H/8,  W/8,  d)
    p4: ad.Tensor  # (H/16, W/16, d)
    p5: ad.Tensor  # (H/32, W/32, d)


@dataclass
class TokenSequence:
    """Flattened encoder tokens plus the bookkeeping to map them back to grids."""

    tokens: ad.Tensor        # (L, d)
    level_shapes: list       # [(h5, w5), (h4, w4), (h3, w3)], token order
    level_offsets: list      # start index of each level in the token axis


class _ConvBlock:
    """3x3 stride-2 convolution with bias and relu."""

    def __init__(self, store, name, c_in, c_out):
        self.w = store.create(f"{name}.w", (3, 3, c_in, c_out), init="he")
        self.b = store.create(f"{name}.b", (c_out,), init="zeros")

    def __call__(self, x):
        return ad.relu(ad.conv2d(x, self.w, stride=2, pad=1) + self.b)


class PyramidBackbone:
    """Five stride-2 conv blocks: two stem blocks to 1/4, then one per level."""

    def __init__(self, store, d):
        self.stem1 = _ConvBlock(store, "backbone.stem1", 1, d)
        self.stem2 = _ConvBlock(store, "backbone.stem2", d, d)
        self.stage3 = _ConvBlock(store, "backbone.stage3", d, d)
        self.stage4 = _ConvBlock(store, "backbone.stage4", d, d)
        self.stage5 = _ConvBlock(store, "backbone.stage5", d, d)
        self.lat2 = Linear(store, "fpn.lat2", d, d)
        self.lat3 = Linear(store, "fpn.lat3", d, d)
        self.lat4 = Linear(store, "fpn.lat4", d, d)
        self.lat5 = Linear(store, "fpn.lat5", d, d)

    def extract_pyramid(self, image):
        """Image (H, W) or (H, W, 1) with H, W multiples of 32 -> FeaturePyramid."""
        x = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
        if x.ndim == 2:
            x = ad.reshape(x, x.shape + (1,))
        if x.ndim != 3 or x.shape[-1] != 1:
            raise ValueError(f"expected a single-channel image, got shape {x.shape}")
        h, w = x.shape[0], x.shape[1]
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ValueError(f"image sides must be multiples of 32, got {h}x{w}")
        c2 = self.stem2(self.stem1(x))
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        p5 = self.lat5(c5)
        p4 = self.lat4(c4) + ad.upsample2x(p5)
        p3 = self.lat3(c3) + ad.upsample2x(p4)
        p2 = self.lat2(c2) + ad.upsample2x(p3)
        return FeaturePyramid(p2=p2, p3=p3, p4=p4, p5=p5)


class TokenEncoder:
    """Flattens P5/P4/P3 into tokens and runs pre-norm self-attention layers.

    Each token is the sum of its feature, the fixed 2D sine embedding of its
    grid coordinate, and a learned embedding of its pyramid level.
    """

    def __init__(self, store, d, layers, heads):
        self.d = d
        self.level_embed = store.create("encoder.level_embed", (3, d), init="normal", std=1.0)
        self.layers = [EncoderLayer(store, f"encoder.layer{i}", d, heads) for i in range(layers)]
        self.final_ln = LayerNorm(store, "encoder.final_ln", d)

    def encode(self, pyramid):
        parts = []
        shapes = []
        offsets = []
        total = 0
        for level, feat in enumerate((pyramid.p5, pyramid.p4, pyramid.p3)):
            h, w, d = feat.shape
            pos = sine_grid_2d(h, w, d).astype(feat.dtype)
            lv = ad.embedding(self.level_embed, np.array([level]))
            x = feat + ad.Tensor(pos) + lv
            parts.append(ad.reshape(x, (h * w, d)))
            shapes.append((h, w))
            offsets.append(total)
            total += h * w
        tokens = ad.concat(parts, axis=0)
        for layer in self.layers:
            tokens = layer(tokens)
        tokens = self.final_ln(tokens)
        return TokenSequence(tokens=tokens, level_shapes=shapes, level_offsets=offsets)
