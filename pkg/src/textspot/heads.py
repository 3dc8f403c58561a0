"""Prediction heads over the per-query semantic feature maps.

Every head consumes the stacked (N, Hq, Wq, d) semantic tensor so the whole
query set is one batched computation: classification pools it, segmentation
convolves it, and recognition first collapses it into horizontal and vertical
sequences through a mask-weighted directional average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from textspot import autodiff as ad
from textspot.layers import LayerNorm, Linear, SelfFirstDecoderLayer
from textspot.positional import sine_table_1d

# Class indices for the three-way query classification.
CLASS_TEXT, CLASS_BACKGROUND, CLASS_NO_TEXT = 0, 1, 2

AGG_EPS = 1e-6

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class ClassProbs:
    logits: ad.Tensor  # (N, 3)
    probs: ad.Tensor   # (N, 3) rows sum to 1


@dataclass
class MaskLogits:
    logits: ad.Tensor  # (N, Hq, Wq)


@dataclass
class AttentionMask:
    values: ad.Tensor  # (N, Hq, Wq, d), in (0, 1)


@dataclass
class DirectionalFeatures:
    horizontal: ad.Tensor  # (N, Wq, d)
    vertical: ad.Tensor    # (N, Hq, d)


@dataclass
class RecognitionSequence:
    values: ad.Tensor  # (N, Wq + Hq, d), horizontal part first


@dataclass
class RecognitionLogits:
    logits: ad.Tensor  # (N, K, C)


@dataclass
class InstanceResult:
    """A final spotted instance at full image resolution."""

    mask: np.ndarray      # (H, W) bool
    transcription: str
    score: float
    query_index: int


class ClassificationHead:
    """Spatial mean of the semantic map, then a 3-layer MLP to 3 classes."""

    def __init__(self, store, d):
        self.fc1 = Linear(store, "cls.fc1", d, d)
        self.fc2 = Linear(store, "cls.fc2", d, d)
        self.fc3 = Linear(store, "cls.fc3", d, 3)

    def classify(self, s):
        pooled = ad.mean_(s, axis=(-3, -2))
        logits = self.fc3(ad.relu(self.fc2(ad.relu(self.fc1(pooled)))))
        return ClassProbs(logits=logits, probs=ad.softmax(logits, axis=-1))


class SegmentationHead:
    """Two 3x3 relu convs plus a 1x1 to a single logit channel.

    Weights are shared across queries; the query batch is the conv batch axis.
    """

    def __init__(self, store, d):
        self.w1 = store.create("seg.w1", (3, 3, d, d), init="he")
        self.b1 = store.create("seg.b1", (d,), init="zeros")
        self.w2 = store.create("seg.w2", (3, 3, d, d), init="he")
        self.b2 = store.create("seg.b2", (d,), init="zeros")
        self.w3 = Linear(store, "seg.out", d, 1)

    def segment(self, s):
        x = ad.relu(ad.conv2d(s, self.w1, stride=1, pad=1) + self.b1)
        x = ad.relu(ad.conv2d(x, self.w2, stride=1, pad=1) + self.b2)
        logits = self.w3(x)
        return MaskLogits(logits=ad.reshape(logits, logits.shape[:-1]))


class AggAttentionHead:
    """Per-pixel, per-channel gate in (0, 1): a 1x1 conv followed by sigmoid."""

    def __init__(self, store, d):
        self.proj = Linear(store, "agg.proj", d, d)

    def agg_attention(self, s):
        return AttentionMask(values=ad.sigmoid(self.proj(s)))


def agg_directional(s, attention, eps=AGG_EPS):
    """Mask-weighted mean over rows and over columns.

    F_h[i, x, c] = sum_y(S * M)[i, y, x, c] / (sum_y M[i, y, x, c] + eps), and
    F_v analogously over x. Weighting by M and renormalizing by its sum makes
    the result a weighted average, so a uniform mask reduces to a plain mean
    and the output is invariant to scaling M by a positive constant
    (up to eps).
    """
    weighted = s * attention.values
    m = attention.values
    horizontal = ad.sum_(weighted, axis=-3) / (ad.sum_(m, axis=-3) + eps)
    vertical = ad.sum_(weighted, axis=-2) / (ad.sum_(m, axis=-2) + eps)
    return DirectionalFeatures(horizontal=horizontal, vertical=vertical)


class SequenceAssembler:
    """Concatenate the directional features into one reading-order sequence.

    Each part gets its own fixed 1D sine position table, and a learned
    direction embedding tags every element as horizontal or vertical.
    """

    def __init__(self, store, d):
        self.d = d
        self.direction_embed = store.create("seq.direction_embed", (2, d), init="normal", std=1.0)

    def assemble_sequence(self, direct):
        wq = direct.horizontal.shape[-2]
        hq = direct.vertical.shape[-2]
        dtype = direct.horizontal.dtype
        e_h = ad.Tensor(sine_table_1d(wq, self.d).astype(dtype))
        e_v = ad.Tensor(sine_table_1d(hq, self.d).astype(dtype))
        seq = ad.concat([direct.horizontal + e_h, direct.vertical + e_v], axis=-2)
        idx = np.array([0] * wq + [1] * hq)
        return RecognitionSequence(values=seq + ad.embedding(self.direction_embed, idx))


class RecognitionHead:
    """Non-autoregressive reader: K learned character queries decode in parallel."""

    def __init__(self, store, d, heads, layers, num_char_queries, charset_size):
        self.char_queries = store.create("rec.char_queries", (num_char_queries, d), init="normal", std=1.0)
        self.layers = [SelfFirstDecoderLayer(store, f"rec.layer{i}", d, heads) for i in range(layers)]
        self.final_ln = LayerNorm(store, "rec.final_ln", d)
        self.out = Linear(store, "rec.out", d, charset_size)

    def recognize(self, seq):
        x = self.char_queries
        for layer in self.layers:
            x = layer(x, seq.values)
        return RecognitionLogits(logits=self.out(self.final_ln(x)))


def assemble_instances(class_probs, mask_logits, char_logits, charset, image_shape, score_thresh=0.5):
    """Turn raw per-query predictions into disjoint full-resolution instances.

    Queries scoring below ``score_thresh`` on the text class are dropped.
    Each surviving pixel at 1/4 scale belongs to the query with the highest
    mask probability, provided that probability is at least 0.5; after
    nearest-neighbor upsampling, each query keeps only its largest
    8-connected component. Transcriptions are argmax decodes truncated at the
    first padding symbol.
    """
    class_probs = np.asarray(class_probs)
    mask_logits = np.asarray(mask_logits)
    char_logits = np.asarray(char_logits)
    img_h, img_w = image_shape
    n, hq, wq = mask_logits.shape

    kept = np.flatnonzero(class_probs[:, CLASS_TEXT] >= score_thresh)
    if kept.size == 0:
        return []

    probs = 1.0 / (1.0 + np.exp(-mask_logits[kept].astype(np.float64)))
    winner = probs.argmax(axis=0)
    confident = probs.max(axis=0) >= 0.5
    owner = np.where(confident, kept[winner], -1)      # (Hq, Wq)

    fy, fx = img_h // hq, img_w // wq
    owner_full = np.repeat(np.repeat(owner, fy, axis=0), fx, axis=1)

    results = []
    for qi in kept:
        mask = owner_full == qi
        if not mask.any():
            continue
        labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
        if count > 1:
            sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
            mask = labels == (1 + int(np.argmax(sizes)))
        chars = char_logits[qi].argmax(axis=-1)
        results.append(
            InstanceResult(
                mask=mask,
                transcription=charset.decode(chars),
                score=float(class_probs[qi, CLASS_TEXT]),
                query_index=int(qi),
            )
        )
    return results
