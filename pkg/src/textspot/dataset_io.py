"""On-disk dataset format: binary PGM images plus a JSONL annotation file.

Layout of a dataset directory:

    images/<id>.pgm      P5, maxval 255, intensity = round(255 * value)
    annotations.jsonl    one record per sample, in dataset order

A record holds ``id``, ``kind``, ``H``, ``W``, ``instances`` and optionally
the generator ``seed``. Full instances carry ``transcription``,
``orientation`` and ``rle``; text and weak instances carry the transcription
only. Masks are run-length encoded row-major as alternating zero/one run
lengths starting with a zero run, summing to H*W.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from textspot.synth import KINDS, InstanceLabel, SceneSample


def write_pgm(path, image):
    """Write a float image in [0, 1] as an 8-bit binary PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError(f"image values outside [0, 1]: [{image.min()}, {image.max()}]")
    h, w = image.shape
    payload = np.round(image * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def read_pgm(path):
    """Read a binary PGM back to floats in [0, 1] (value = byte / 255)."""
    data = Path(path).read_bytes()
    tokens, offset = _pgm_header(data, path)
    magic, w, h, maxval = tokens
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    if maxval != b"255":
        raise ValueError(f"{path}: expected maxval 255, got {maxval.decode('ascii', 'replace')}")
    w, h = int(w), int(h)
    expected = w * h
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {expected}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def _pgm_header(data, path):
    """Collect the four header tokens, honoring '#' comments."""
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise ValueError(f"{path}: truncated PGM header")
        c = data[i : i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(data) and data[j : j + 1] not in b" \t\r\n#":
                j += 1
            tokens.append(data[i:j])
            i = j
    if i >= len(data) or data[i : i + 1] not in b" \t\r\n":
        raise ValueError(f"{path}: missing whitespace after PGM header")
    return tokens, i + 1


def rle_encode(mask):
    """Row-major runs, alternating zero/one and starting with a zero run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate(([0], boundaries, [flat.size])))
    runs = runs.tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs, h, w):
    runs = list(runs)
    if any((not isinstance(r, int)) or r < 0 for r in runs):
        raise ValueError(f"rle runs must be non-negative integers, got {runs[:8]}")
    total = sum(runs)
    if total != h * w:
        raise ValueError(f"rle runs sum to {total}, expected {h}x{w}={h * w}")
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).reshape(h, w).astype(bool)


def write_dataset(out_dir, samples):
    """Write samples to ``out_dir`` (created if needed), in order."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    seen = set()
    with open(out / "annotations.jsonl", "w", encoding="ascii") as fh:
        for sample in samples:
            if not sample.sample_id:
                raise ValueError("sample without an id")
            if sample.sample_id in seen:
                raise ValueError(f"duplicate sample id {sample.sample_id!r}")
            seen.add(sample.sample_id)
            write_pgm(out / "images" / f"{sample.sample_id}.pgm", sample.image)
            fh.write(json.dumps(_record_from(sample)) + "\n")


def _record_from(sample):
    if sample.kind not in KINDS:
        raise ValueError(f"unknown kind {sample.kind!r}")
    h, w = sample.image.shape
    instances = []
    for inst in sample.instances:
        if sample.kind == "full":
            if inst.mask is None or inst.orientation is None:
                raise ValueError(f"sample {sample.sample_id!r}: full annotation lacks mask or orientation")
            instances.append(
                {
                    "transcription": inst.transcription,
                    "orientation": inst.orientation,
                    "rle": rle_encode(inst.mask),
                }
            )
        else:
            instances.append({"transcription": inst.transcription})
    record = {"id": sample.sample_id, "kind": sample.kind, "H": int(h), "W": int(w), "instances": instances}
    if sample.seed is not None:
        record["seed"] = int(sample.seed)
    return record


def read_dataset(root):
    """Read a dataset directory back into samples, validating as it goes.

    Malformed input raises ValueError naming the file, line, and reason.
    """
    root = Path(root)
    ann = root / "annotations.jsonl"
    if not ann.is_file():
        raise ValueError(f"{ann}: annotation file missing")
    samples = []
    with open(ann, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            samples.append(_parse_record(root, ann, lineno, line))
    return samples


def _parse_record(root, ann, lineno, line):
    def bad(reason):
        return ValueError(f"{ann}:{lineno}: {reason}")

    try:
        record = json.loads(line)
    except json.JSONDecodeError as err:
        raise bad(f"invalid JSON ({err.msg})") from None
    if not isinstance(record, dict):
        raise bad(f"record must be an object, got {type(record).__name__}")
    for key in ("id", "kind", "H", "W", "instances"):
        if key not in record:
            raise bad(f"missing key {key!r}")
    kind = record["kind"]
    if kind not in KINDS:
        raise bad(f"kind must be one of {KINDS}, got {kind!r}")
    h, w = record["H"], record["W"]
    if not (isinstance(h, int) and isinstance(w, int) and h > 0 and w > 0):
        raise bad(f"H and W must be positive integers, got {h!r}, {w!r}")
    image_path = root / "images" / f"{record['id']}.pgm"
    if not image_path.is_file():
        raise bad(f"image file {image_path} missing")
    image = read_pgm(image_path)
    if image.shape != (h, w):
        raise bad(f"image is {image.shape[0]}x{image.shape[1]}, record says {h}x{w}")
    raw_instances = record["instances"]
    if not isinstance(raw_instances, list) or not raw_instances:
        raise bad("instances must be a non-empty list")
    if kind == "weak" and len(raw_instances) != 1:
        raise bad(f"weak annotation must have exactly one instance, got {len(raw_instances)}")
    instances = []
    for i, inst in enumerate(raw_instances):
        if not isinstance(inst, dict) or "transcription" not in inst:
            raise bad(f"instance {i}: missing transcription")
        text = inst["transcription"]
        if not isinstance(text, str) or not text:
            raise bad(f"instance {i}: transcription must be a non-empty string")
        if kind == "full":
            orientation = inst.get("orientation")
            if orientation not in ("h", "v"):
                raise bad(f"instance {i}: orientation must be 'h' or 'v', got {orientation!r}")
            if "rle" not in inst:
                raise bad(f"instance {i}: full annotation without rle")
            try:
                mask = rle_decode(inst["rle"], h, w)
            except ValueError as err:
                raise bad(f"instance {i}: {err}") from None
            instances.append(InstanceLabel(transcription=text, orientation=orientation, mask=mask))
        else:
            instances.append(InstanceLabel(transcription=text))
    seed = record.get("seed")
    return SceneSample(image=image, instances=instances, kind=kind, sample_id=record["id"], seed=seed)
