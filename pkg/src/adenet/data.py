"""Manifest loading, insulator cropping, batch padding and split plans."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

HEADER = ["image_path", "x", "y", "w", "h", "label"]
DAMAGED, UNDAMAGED = 1, 0
PAD_MULTIPLE = 8


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationRecord:
    image_path: str
    bbox: tuple  # x, y, w, h; top-left origin
    label: int


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    @property
    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def counts(self):
        lab = self.labels
        return {"damaged": int((lab == DAMAGED).sum()), "undamaged": int((lab == UNDAMAGED).sum())}

    def resolve(self, record):
        return self.root / record.image_path

    def subset(self, indices):
        return DatasetManifest([self.records[i] for i in indices], self.root)


def worker_count():
    try:
        return max(1, int(os.environ.get("ADENET_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    workers = worker_count()
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def load_manifest(path, check_images=True):
    """Parse and validate a manifest CSV.

    Image paths are resolved relative to the manifest's directory. Every
    bounding box must lie fully inside its image; out-of-bounds boxes are
    rejected rather than clamped.
    """
    path = Path(path)
    root = path.parent
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return DatasetManifest([], root)
    if [c.strip() for c in rows[0]] != HEADER:
        raise ManifestError(f"{path}:1: expected header {','.join(HEADER)}")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 6:
            raise ManifestError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
        try:
            x, y, w, h, label = (int(v) for v in row[1:])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: non-integer bbox or label") from None
        if label not in (DAMAGED, UNDAMAGED):
            raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
        if w <= 0 or h <= 0 or x < 0 or y < 0:
            raise ManifestError(f"{path}:{lineno}: invalid bbox {(x, y, w, h)}")
        records.append(AnnotationRecord(row[0].strip(), (x, y, w, h), label))

    manifest = DatasetManifest(records, root)
    if check_images:
        for lineno, rec in enumerate(records, start=2):
            img_path = manifest.resolve(rec)
            if not img_path.exists():
                raise ManifestError(f"record {lineno - 2} ({rec.image_path}): image not found")
            with Image.open(img_path) as im:
                iw, ih = im.size
            x, y, w, h = rec.bbox
            if x + w > iw or y + h > ih:
                raise ManifestError(
                    f"record {lineno - 2} ({rec.image_path}): bbox {rec.bbox} exceeds image {iw}x{ih}")
    return manifest


def write_manifest(manifest_or_records, path):
    records = getattr(manifest_or_records, "records", manifest_or_records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(HEADER)
        for r in records:
            wr.writerow([r.image_path, *r.bbox, r.label])


def read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def crop_insulators(manifest):
    """One (h, w, 3) uint8 crop per record, in manifest order, with its label."""
    def one(rec):
        x, y, w, h = rec.bbox
        try:
            img = read_rgb(manifest.resolve(rec))
        except OSError as exc:
            raise ManifestError(f"cannot read {rec.image_path}: {exc}") from exc
        return img[y:y + h, x:x + w].copy(), rec.label

    return _ordered_map(one, manifest.records)


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    x: np.ndarray  # (n, 3, H, W) float32 in [0, 1]
    sizes: list  # original (h, w) per item
    labels: np.ndarray


def round_up(v, multiple=PAD_MULTIPLE):
    return -(-v // multiple) * multiple


def pad_batch(crops, labels=None):
    """Zero-pad crops bottom-right to the batch maximum, rounded up to 8."""
    if len(crops) == 0:
        raise ValueError("pad_batch: empty batch")
    for c in crops:
        if c.ndim != 3 or c.shape[2] != 3:
            raise ValueError(f"pad_batch: expected (h, w, 3) crops, got {c.shape}")
    H = round_up(max(c.shape[0] for c in crops))
    W = round_up(max(c.shape[1] for c in crops))
    x = np.zeros((len(crops), 3, H, W), dtype=np.float32)
    for i, c in enumerate(crops):
        h, w = c.shape[:2]
        x[i, :, :h, :w] = c.transpose(2, 0, 1).astype(np.float32) / 255.0
    lab = np.zeros(len(crops), np.int64) if labels is None else np.asarray(labels, np.int64)
    return Batch(x, [c.shape[:2] for c in crops], lab)


def unpad(batch, i):
    """Recover crop ``i`` as (h, w, 3) uint8."""
    h, w = batch.sizes[i]
    return np.rint(batch.x[i, :, :h, :w].transpose(1, 2, 0) * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    seed: int
    train: np.ndarray | None = None
    test: np.ndarray | None = None
    folds: list | None = None

    def fold(self, i):
        """(train, validation) indices for fold ``i``."""
        val = self.folds[i]
        train = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return train, val

    def to_dict(self):
        d = {"seed": self.seed}
        if self.folds is not None:
            d["folds"] = [f.tolist() for f in self.folds]
        else:
            d["train"], d["test"] = self.train.tolist(), self.test.tolist()
        return d


def _labels(obj):
    if isinstance(obj, DatasetManifest):
        return obj.labels
    return np.asarray(obj, dtype=np.int64)


def stratified_holdout(manifest, train_fraction=0.8, seed=0):
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    labels = _labels(manifest)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (UNDAMAGED, DAMAGED):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            raise ValueError(f"class {cls} has no samples")
        idx = rng.permutation(idx)
        k = int(np.floor(train_fraction * idx.size + 0.5))
        train.append(idx[:k])
        test.append(idx[k:])
    return SplitPlan(seed, train=np.sort(np.concatenate(train)), test=np.sort(np.concatenate(test)))


def kfold(manifest, k=5, seed=0):
    """Stratified k folds.

    Each class is shuffled and the classes are laid end to end, then dealt
    round-robin. Per-class fold counts therefore differ by at most one and so
    do fold sizes.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    labels = _labels(manifest)
    rng = np.random.default_rng(seed)
    order = []
    for cls in (DAMAGED, UNDAMAGED):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise ValueError(f"class {cls} has {idx.size} samples, fewer than k={k}")
        order.append(rng.permutation(idx))
    order = np.concatenate(order)
    folds = [np.sort(order[i::k]) for i in range(k)]
    return SplitPlan(seed, folds=folds)


LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(crop):
    """Luma (0.299 R + 0.587 G + 0.114 B) of an (h, w, 3) crop, same value range."""
    return crop.astype(np.float64) @ LUMA


def resize_gray(crops, size=32):
    """Stack crops as (n, 1, size, size) float32 grayscale in [0, 1] (LeNet-5 input)."""
    out = np.empty((len(crops), 1, size, size), dtype=np.float32)
    for i, c in enumerate(crops):
        g = Image.fromarray(to_gray(c).astype(np.float32), mode="F")
        out[i, 0] = np.asarray(g.resize((size, size), Image.BILINEAR)) / 255.0
    return out
