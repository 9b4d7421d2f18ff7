"""Image files and JSON-lines annotation files.

Annotation records, one per line::

    {"image": "images/000000.ppm", "joints": [[x, y], ...8],
     "normalizer": [[x, y], [x, y]], "occluded": false}

Joints are normalized to the image. Images are 8-bit RGB PPM (P6) or PNG.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .data import AnnotatedSample, Dataset, resize
from .errors import InvalidArgumentError

ANNOTATIONS = "annotations.jsonl"


def write_ppm(path, image) -> None:
    """``image`` is (3, H, W) in [0, 1] or (H, W, 3) uint8."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(int(data[pos:end]))
        pos = end
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise InvalidArgumentError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), pos = _ppm_tokens(data, 3)
    if maxval != 255:
        raise InvalidArgumentError(f"{path}: only 8-bit PPM is supported")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3)


def read_image(path) -> np.ndarray:
    """Load an RGB image as (3, H, W) float32 in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        arr = read_ppm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    return (arr.transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def write_dataset(samples, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        rel = f"images/{i:06d}.ppm"
        write_ppm(out / rel, s.image)
        rec = {"image": rel, "joints": s.joints.tolist(), "occluded": False}
        if s.normalizer is not None:
            rec["normalizer"] = s.normalizer.tolist()
        lines.append(json.dumps(rec))
    (out / ANNOTATIONS).write_text("\n".join(lines) + "\n")
    return out


def read_records(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / ANNOTATIONS
    recs = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"{path}:{n}: bad JSON ({exc.msg})") from None
        if "joints" not in rec or np.shape(rec["joints"]) != (8, 2):
            raise InvalidArgumentError(f"{path}:{n}: 'joints' must be 8 [x, y] pairs")
        recs.append(rec)
    return recs


def read_dataset(path, size: int | None = None) -> Dataset:
    """Load an annotation file (or a directory holding one); occluded records are skipped."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    samples = []
    for rec in read_records(path):
        if rec.get("occluded", False):
            continue
        img = read_image(root / rec["image"])
        if size is not None:
            img = resize(img, size)
        samples.append(AnnotatedSample(img, rec["joints"], rec.get("normalizer"),
                                       name=os.fspath(rec["image"])))
    return Dataset.from_samples(samples)


def write_predictions(path, names, joints) -> None:
    with open(path, "w") as fh:
        for name, j in zip(names, joints):
            fh.write(json.dumps({"image": name, "joints": np.asarray(j).tolist()}) + "\n")
