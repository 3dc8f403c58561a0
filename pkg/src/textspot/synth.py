"""Synthetic scene generation with three annotation richness levels.

A scene is a gray image containing a few non-overlapping words rendered from
the fixed glyph font, horizontally or vertically, at integer scale. The full
annotation carries transcription, orientation, and pixel mask per instance;
``degrade_annotation`` derives the transcription-only and single-word weak
variants from it. Everything is deterministic given the seed, and intensities
are quantized to the 1/255 grid so image files round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from textspot.glyphs import DEFAULT_CHARSET, GLYPH_H, GLYPH_W

KINDS = ("full", "text", "weak")

BG_BASE = 51.0 / 255.0           # exactly representable on the 1/255 grid
FG_RANGE = (0.75, 0.95)
MAX_NOISE = 0.1                  # keeps background at most 0.3

_PLACEMENT_TRIES = 20
_FIRST_INSTANCE_TRIES = 200


@dataclass
class InstanceLabel:
    """One word. Mask and orientation are None on degraded annotations."""

    transcription: str
    orientation: str | None = None   # "h" or "v"
    mask: np.ndarray | None = None   # (H, W) bool


@dataclass
class SceneSample:
    image: np.ndarray                # (H, W) float64 in [0, 1]
    instances: list = field(default_factory=list)
    kind: str = "full"
    sample_id: str = ""
    seed: int | None = None


def render_word(text, orientation, scale, charset=DEFAULT_CHARSET):
    """Boolean ink bitmap for one word with one scaled pixel of spacing."""
    if orientation not in ("h", "v"):
        raise ValueError(f"orientation must be 'h' or 'v', got {orientation!r}")
    if scale < 1:
        raise ValueError(f"scale must be a positive integer, got {scale}")
    cell = np.ones((scale, scale), dtype=bool)
    glyphs = [np.kron(charset.glyph(c), cell) for c in text]
    gap_h = np.zeros((GLYPH_H * scale, scale), dtype=bool)
    gap_v = np.zeros((scale, GLYPH_W * scale), dtype=bool)
    if orientation == "h":
        parts = []
        for g in glyphs:
            parts.extend((g, gap_h))
        return np.concatenate(parts[:-1], axis=1)
    parts = []
    for g in glyphs:
        parts.extend((g, gap_v))
    return np.concatenate(parts[:-1], axis=0)


def generate_sample(seed, size=64, charset=DEFAULT_CHARSET, max_instances=2,
                    noise=0.05, max_text_len=4, sample_id=None):
    """One fully annotated scene, deterministic in ``seed``.

    Foreground intensity is at least 0.75 against a background of at most
    ``BG_BASE + noise``; instance masks are the ink pixels dilated by one and
    never overlap. Placement failures reduce the instance count but at least
    one word is always present.
    """
    if not 0.0 <= noise <= MAX_NOISE:
        raise ValueError(f"noise must lie in [0, {MAX_NOISE}], got {noise}")
    if max_instances < 1:
        raise ValueError(f"max_instances must be at least 1, got {max_instances}")
    rng = np.random.default_rng(seed)
    h = w = int(size)
    image = BG_BASE + noise * rng.uniform(0.0, 1.0, size=(h, w))
    occupied = np.zeros((h, w), dtype=bool)
    instances = []

    target = int(rng.integers(1, max_instances + 1))
    for k in range(target):
        tries = _FIRST_INSTANCE_TRIES if k == 0 else _PLACEMENT_TRIES
        placed = _place_word(rng, image, occupied, charset, max_text_len, tries)
        if placed is None:
            if k == 0:
                raise ValueError(f"cannot fit any word into a {h}x{w} image")
            continue
        instances.append(placed)

    image = np.round(image * 255.0) / 255.0
    sid = sample_id if sample_id is not None else f"sample-{seed:08d}"
    return SceneSample(image=image, instances=instances, kind="full", sample_id=sid, seed=int(seed))


def _place_word(rng, image, occupied, charset, max_text_len, tries):
    h, w = image.shape
    for _ in range(tries):
        length = int(rng.integers(1, max_text_len + 1))
        text = "".join(rng.choice(list(charset.symbols), size=length))
        orientation = str(rng.choice(["h", "v"]))
        scale = int(rng.integers(1, 3))
        ink = render_word(text, orientation, scale, charset)
        ih, iw = ink.shape
        if ih > h - 2 or iw > w - 2:
            continue
        y0 = int(rng.integers(1, h - 1 - ih + 1))
        x0 = int(rng.integers(1, w - 1 - iw + 1))
        mask = np.zeros((h, w), dtype=bool)
        mask[y0 : y0 + ih, x0 : x0 + iw] = ink
        mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))
        if (mask & occupied).any():
            continue
        fg = rng.uniform(*FG_RANGE)
        image[y0 : y0 + ih, x0 : x0 + iw][ink] = fg
        occupied |= mask
        return InstanceLabel(transcription=text, orientation=orientation, mask=mask)
    return None


def degrade_annotation(sample, kind, seed=0):
    """Derive the transcription-only or weak (single word) annotation.

    The weak variant keeps the instance with the largest mask area; ties are
    broken by a draw from ``seed``. Masks and orientations are dropped in
    both variants. The image is untouched.
    """
    if sample.kind != "full":
        raise ValueError(f"can only degrade a full annotation, got kind {sample.kind!r}")
    if kind == "text":
        kept = list(sample.instances)
    elif kind == "weak":
        areas = np.array([inst.mask.sum() for inst in sample.instances])
        best = np.flatnonzero(areas == areas.max())
        pick = int(best[0]) if len(best) == 1 else int(np.random.default_rng(seed).choice(best))
        kept = [sample.instances[pick]]
    else:
        raise ValueError(f"kind must be 'text' or 'weak', got {kind!r}")
    stripped = [InstanceLabel(transcription=i.transcription) for i in kept]
    return replace(sample, instances=stripped, kind=kind)
