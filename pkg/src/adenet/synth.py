"""Seeded generator of procedural insulator images with labelled defects.

Each image holds one disc-stack insulator on a noisy background with a
random orientation and scale. Damaged insulators carry exactly one defect:

* ``missing_disc`` - an interior disc is absent, exposing the rod
* ``flashover`` - an arc-burn discolouration of the glaze that changes hue
  but not luminance
* ``fracture`` - a chipped rim with a dark crack running into the disc

Outputs under ``out_dir``: ``images/img_NNNNN.png``, ``manifest.csv`` and
``defects.jsonl`` (one line per damaged record, defect box in image pixel
coordinates, ``[x, y, w, h]``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import AnnotationRecord, DatasetManifest, write_manifest

DEFECT_KINDS = ("missing_disc", "flashover", "fracture")

_GLAZES = np.array([
    [125, 72, 42],    # brown porcelain
    [214, 212, 200],  # white porcelain
    [120, 165, 170],  # glass
    [92, 128, 96],    # green glass
], dtype=np.float64)

# orange-brown hue shift with zero luma: 0.299 r + 0.587 g + 0.114 b = 0
_BURN_CHROMA = np.array([1.0, -0.3, -(0.299 - 0.3 * 0.587) / 0.114])
_BURN_CHROMA /= np.linalg.norm(_BURN_CHROMA)


@dataclass
class SynthConfig:
    n_images: int = 600
    damaged_ratio: float = 1 / 3
    image_size: int = 64
    defect_kinds: tuple = field(default=DEFECT_KINDS)


def _background(rng, size):
    yy = np.linspace(0, 1, size)[:, None, None]
    top = rng.uniform(70, 190, 3)
    bottom = top + rng.uniform(-40, 40, 3)
    img = top + (bottom - top) * yy
    grey = img.mean(axis=-1, keepdims=True)
    img = grey + (img - grey) * 0.45
    img = np.broadcast_to(img, (size, size, 3)).copy()
    # soft clutter blobs
    ys, xs = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, size, 2)
        rad = rng.uniform(5, 18)
        m = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * rad ** 2))
        img += m[..., None] * rng.uniform(-20, 20, 3)
    # cables
    for _ in range(rng.integers(0, 2)):
        a = rng.uniform(0, np.pi)
        off = rng.uniform(-size / 2, size / 2)
        d = (xs - size / 2) * np.sin(a) - (ys - size / 2) * np.cos(a) - off
        img[np.abs(d) < 0.7] *= 0.45
    img += rng.normal(0, rng.uniform(3, 7), img.shape)
    return img


def _render_one(rng, size, damaged, kinds):
    bg = _background(rng, size)
    img = bg.copy()
    n_discs = int(rng.integers(5, 7))
    radius = rng.uniform(6.5, 8.0)
    spacing = rng.uniform(5.0, 6.5)
    thick = spacing * rng.uniform(0.5, 0.58)
    half_len = (n_discs - 1) / 2 * spacing + thick + 2.0
    angle = rng.uniform(-np.pi / 12, np.pi / 12)
    ca, sa = np.cos(angle), np.sin(angle)

    # extent of the rotated insulator, to keep it inside the canvas
    ext_y = abs(ca) * half_len + abs(sa) * radius
    ext_x = abs(sa) * half_len + abs(ca) * radius
    cy = rng.uniform(ext_y + 3, size - ext_y - 3)
    cx = rng.uniform(ext_x + 3, size - ext_x - 3)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (ys - cy) * ca + (xs - cx) * sa    # along the insulator axis
    v = -(ys - cy) * sa + (xs - cx) * ca   # across it

    glaze = _GLAZES[rng.integers(len(_GLAZES))] * rng.uniform(0.85, 1.15) * rng.uniform(0.96, 1.04, 3)
    centres = (np.arange(n_discs) - (n_discs - 1) / 2) * spacing

    kind = str(rng.choice(kinds)) if damaged else None
    target = int(rng.integers(1, n_discs - 1))

    discs = np.zeros((size, size), bool)
    for k, uc in enumerate(centres):
        if kind == "missing_disc" and k == target:
            continue
        discs |= ((u - uc) / thick) ** 2 + (v / radius) ** 2 <= 1.0
    rod = (np.abs(v) <= 1.3) & (np.abs(u) <= half_len - 1.0)
    caps = (np.abs(v) <= 2.2) & (np.abs(u) > half_len - 3.0) & (np.abs(u) <= half_len)

    shade = 0.75 + 0.35 * np.cos(np.clip(v / radius, -1, 1) * np.pi / 2)
    img[rod | caps] = np.array([62, 62, 68]) * rng.uniform(0.8, 1.2)
    img[discs] = (glaze[None, :] * shade[discs][:, None]
                  + rng.normal(0, 4, (int(discs.sum()), 3)))
    body = discs | rod | caps

    defect = np.zeros((size, size), bool)
    uc = centres[target]
    if kind == "missing_disc":
        defect = ((u - uc) / thick) ** 2 + (v / radius) ** 2 <= 1.0
    elif kind == "flashover":
        bu = uc + rng.uniform(-0.3, 0.3) * spacing
        bv = rng.uniform(-0.4, 0.4) * radius
        br = rng.uniform(0.7, 0.95) * radius
        blot = ((u - bu) / (br * 1.1)) ** 2 + ((v - bv) / br) ** 2 <= 1.0
        defect = blot & body
        # burn discolouration: a chroma shift along a zero-luma direction,
        # so the stain is plain in colour but nearly invisible in greyscale
        direction = _BURN_CHROMA * rng.uniform(75, 95)
        img[defect] = img[defect] + direction
    elif kind == "fracture":
        side = 1.0 if rng.random() < 0.5 else -1.0
        disc_k = ((u - uc) / thick) ** 2 + (v / radius) ** 2 <= 1.0
        # circular bite out of the rim: a concave notch intact discs never show
        bite_u = uc + rng.uniform(-0.3, 0.3) * thick
        bite_r = radius * rng.uniform(0.45, 0.6)
        chip = disc_k & ((u - bite_u) ** 2 + (v - side * radius) ** 2 <= bite_r ** 2)
        img[chip] = bg[chip]
        # dark crack from the notch across the disc
        t = np.linspace(0, 1, 60)
        cu = uc + np.cumsum(rng.normal(0, 0.25, t.size)) * 0.5
        cv = side * (radius - bite_r) * (1 - 1.9 * t)
        crack = np.zeros((size, size), bool)
        py = np.clip(np.rint(cy + cu * ca - cv * sa).astype(int), 0, size - 2)
        px = np.clip(np.rint(cx + cu * sa + cv * ca).astype(int), 0, size - 2)
        crack[py, px] = True
        crack[py + 1, px] = True
        crack[py, px + 1] = True
        crack &= disc_k & ~chip
        img[crack] = img[crack] * 0.15
        defect = chip | crack

    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    bbox = _mask_bbox(body | (defect if kind == "missing_disc" else False), pad=2, size=size)
    defect_bbox = _mask_bbox(defect, pad=1, size=size) if kind else None
    if defect_bbox is not None:
        defect_bbox = _clip_inside(defect_bbox, bbox)
    return img, bbox, kind, defect_bbox


def _mask_bbox(mask, pad, size):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    y0, y1 = max(rows[0] - pad, 0), min(rows[-1] + pad, size - 1)
    x0, x1 = max(cols[0] - pad, 0), min(cols[-1] + pad, size - 1)
    return (int(x0), int(y0), int(x1 - x0 + 1), int(y1 - y0 + 1))


def _clip_inside(inner, outer):
    x0 = max(inner[0], outer[0])
    y0 = max(inner[1], outer[1])
    x1 = min(inner[0] + inner[2], outer[0] + outer[2])
    y1 = min(inner[1] + inner[3], outer[1] + outer[3])
    return (x0, y0, x1 - x0, y1 - y0)


def synth_dataset(config: SynthConfig, seed, out_dir):
    """Render the dataset and return the manifest path.

    Output bytes depend only on ``config`` and ``seed``.
    """
    if not 0 <= config.damaged_ratio <= 1:
        raise ValueError("damaged_ratio must lie in [0, 1]")
    if config.image_size < 40:
        raise ValueError("image_size must be at least 40 pixels")
    kinds = tuple(config.defect_kinds)
    for k in kinds:
        if k not in DEFECT_KINDS:
            raise ValueError(f"unknown defect kind {k!r}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    n = config.n_images
    n_damaged = int(round(n * config.damaged_ratio))
    ss = np.random.SeedSequence(seed)
    label_rng = np.random.default_rng(ss.spawn(1)[0])
    damaged = np.zeros(n, bool)
    damaged[label_rng.permutation(n)[:n_damaged]] = True

    records, sidecar = [], []
    for i, child in enumerate(ss.spawn(n)):
        rng = np.random.default_rng(child)
        img, bbox, kind, dbox = _render_one(rng, config.image_size, bool(damaged[i]), kinds)
        rel = f"images/img_{i:05d}.png"
        Image.fromarray(img).save(out / rel)
        records.append(AnnotationRecord(rel, bbox, int(damaged[i])))
        if kind:
            sidecar.append({"record_index": i, "defect_bbox": list(dbox), "kind": kind})

    manifest_path = out / "manifest.csv"
    write_manifest(DatasetManifest(records, out), manifest_path)
    with open(out / "defects.jsonl", "w", encoding="utf-8") as fh:
        for row in sidecar:
            fh.write(json.dumps(row) + "\n")
    return manifest_path


def load_defects(path):
    """Map record index -> defect bbox (image coordinates) from a sidecar file."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[int(row["record_index"])] = tuple(row["defect_bbox"])
    return out


def crop_relative(defect_bbox, crop_bbox):
    return (defect_bbox[0] - crop_bbox[0], defect_bbox[1] - crop_bbox[1],
            defect_bbox[2], defect_bbox[3])
