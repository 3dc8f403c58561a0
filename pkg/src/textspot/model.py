"""The spotter: pyramid encoder, masked query decoder, and the head stack.

One forward pass takes a single image and produces per-query class logits,
mask logits, and character logits, all differentiable through the shared
parameter store.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from textspot import autodiff as ad
from textspot.decoder import PixelProjection, QueryDecoder, semantic_features
from textspot.encoder import PyramidBackbone, TokenEncoder
from textspot.glyphs import Charset
from textspot.heads import (
    AggAttentionHead,
    ClassificationHead,
    RecognitionHead,
    SegmentationHead,
    SequenceAssembler,
    agg_directional,
    assemble_instances,
)
from textspot.layers import ParamStore


@dataclass
class ModelConfig:
    d: int = 64
    num_queries: int = 8
    num_char_queries: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    recognizer_layers: int = 2
    heads: int = 4
    charset_symbols: str = "ABCEHKLTUY0"
    masked_attention: bool = True
    score_thresh: float = 0.5
    precision: str = "float32"

    def validate(self):
        if self.d % 4:
            raise ValueError(f"model width must be divisible by 4, got {self.d}")
        if self.d % self.heads:
            raise ValueError(f"model width {self.d} not divisible by {self.heads} heads")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        for name in ("num_queries", "num_char_queries", "encoder_layers", "decoder_layers", "recognizer_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class Predictions:
    """Everything one forward pass produces, still on the graph."""

    class_logits: ad.Tensor   # (N, 3)
    class_probs: ad.Tensor    # (N, 3)
    mask_logits: ad.Tensor    # (N, Hq, Wq)
    char_logits: ad.Tensor    # (N, K, C)
    text_embed: ad.Tensor     # (N, d)
    semantic: ad.Tensor       # (N, Hq, Wq, d)


class SpotterModel:
    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        self.config.validate()
        c = self.config
        self.charset = Charset(c.charset_symbols)
        self.store = ParamStore(seed=seed, dtype=np.dtype(c.precision))
        self.backbone = PyramidBackbone(self.store, c.d)
        self.token_encoder = TokenEncoder(self.store, c.d, c.encoder_layers, c.heads)
        self.pixel_proj = PixelProjection(self.store, c.d)
        self.query_decoder = QueryDecoder(self.store, c.d, c.decoder_layers, c.heads, c.num_queries)
        self.class_head = ClassificationHead(self.store, c.d)
        self.seg_head = SegmentationHead(self.store, c.d)
        self.agg_head = AggAttentionHead(self.store, c.d)
        self.seq_assembler = SequenceAssembler(self.store, c.d)
        self.rec_head = RecognitionHead(
            self.store, c.d, c.heads, c.recognizer_layers, c.num_char_queries, self.charset.size
        )

    def forward(self, image):
        """Single image (H, W) in [0, 1] -> Predictions."""
        x = ad.Tensor(np.asarray(image, dtype=self.store.dtype))
        pyramid = self.backbone.extract_pyramid(x)
        tokens = self.token_encoder.encode(pyramid)
        pixel = self.pixel_proj.pixel_embed(pyramid)
        text_embed = self.query_decoder.decode(
            tokens, pixel, self.seg_head, masked=self.config.masked_attention
        )
        sem = semantic_features(text_embed, pixel)
        cls = self.class_head.classify(sem.s)
        seg = self.seg_head.segment(sem.s)
        att = self.agg_head.agg_attention(sem.s)
        seq = self.seq_assembler.assemble_sequence(agg_directional(sem.s, att))
        rec = self.rec_head.recognize(seq)
        return Predictions(
            class_logits=cls.logits,
            class_probs=cls.probs,
            mask_logits=seg.logits,
            char_logits=rec.logits,
            text_embed=text_embed,
            semantic=sem.s,
        )

    def spot(self, image):
        """Full inference: forward pass plus instance assembly."""
        image = np.asarray(image)
        preds = self.forward(image)
        return assemble_instances(
            preds.class_probs.data,
            preds.mask_logits.data,
            preds.char_logits.data,
            self.charset,
            image.shape,
            score_thresh=self.config.score_thresh,
        )

    def parameters(self):
        return self.store.parameters()
