"""Grad-CAM heatmaps, overlays, and a localization score for known defects."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import models
from .data import pad_batch

DAMAGED = 1


@dataclass
class Heatmap:
    raw: np.ndarray        # (h', w') in [0, 1] at the captured layer's resolution
    upsampled: np.ndarray  # (h, w) in [0, 1] at crop resolution
    target_class: int
    provenance: dict = field(default_factory=dict)


def capture_index(model):
    """Index of the activation Grad-CAM reads: the output of the last conv
    block's activation (post-ReLU, before pooling)."""
    convs = model.conv_indices()
    if not convs:
        raise ValueError(f"{model.name} has no convolutional layer")
    i = convs[-1]
    while i + 1 < len(model.layers) and model.layers[i + 1].kind in ("batchnorm", "relu"):
        i += 1
    return i


def class_activation_gradients(model, x, target_class):
    """Captured activations and d(target logit)/d(activations) for batch ``x``.

    Inference-mode batch norm is used throughout, so the gradient is that of
    the deployed model.
    """
    if not 0 <= target_class < model.n_classes:
        raise ValueError(f"target class {target_class} out of range")
    cap = capture_index(model)
    acts, head_in_ctx = models.run(model, x, stop=cap + 1, mode="infer")
    logits, ctxs = models.run(model, acts, start=cap + 1, keep_contexts=True, mode="infer")
    d = np.zeros_like(logits)
    d[:, target_class] = 1.0
    grad, _ = models.backward(model, ctxs, d)
    return acts, grad, logits


def cam_from(acts, grads):
    """ReLU(sum_k mean(grad_k) * A_k), normalised by its maximum."""
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, acts, axes=(0, 0)), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam


def upsample(raw, shape, method="bilinear"):
    """Resize a 2-D map to ``shape`` with half-pixel-centre sampling."""
    h, w = raw.shape
    H, W = shape
    if method == "nearest":
        ri = np.minimum((np.arange(H) * h) // H, h - 1)
        ci = np.minimum((np.arange(W) * w) // W, w - 1)
        return raw[ri][:, ci]
    if method != "bilinear":
        raise ValueError(f"unknown upsampling method {method!r}")
    ys = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = raw[y0][:, x0] * (1 - fx) + raw[y0][:, x1] * fx
    bot = raw[y1][:, x0] * (1 - fx) + raw[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def gradcam(model, crop, target_class=DAMAGED, method="bilinear", provenance=None):
    """Grad-CAM heatmap for one (h, w, 3) uint8 crop.

    The crop is zero-padded bottom-right to a multiple of 8 exactly as in
    training; the map is upsampled to the padded size and cut back to the
    crop.
    """
    if crop.shape[0] < 8 or crop.shape[1] < 8:
        raise ValueError("gradcam needs crops of at least 8x8")
    batch = pad_batch([crop])
    dtype = next((p.dtype for _, p in model.named_params()), np.float32)
    acts, grads, _ = class_activation_gradients(model, batch.x.astype(dtype), target_class)
    raw = cam_from(acts[0].astype(np.float64), grads[0].astype(np.float64))
    H, W = batch.x.shape[2:]
    h, w = crop.shape[:2]
    up = np.clip(upsample(raw, (H, W), method)[:h, :w], 0.0, 1.0)
    return Heatmap(raw, up, target_class, dict(provenance or {}, model=model.name))


# --------------------------------------------------------------------------
# rendering


def jet(values):
    """Jet colormap, (..., 3) floats in [0, 1]; 0 maps to dark blue, 1 to dark red."""
    from matplotlib import colormaps
    return colormaps["jet"](np.clip(values, 0, 1))[..., :3]


def overlay(heatmap, crop, path=None, alpha=0.4):
    """Alpha-blend the jet-coloured heatmap over the crop; optionally save a PNG."""
    hm = heatmap.upsampled if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if hm.shape != crop.shape[:2]:
        raise ValueError(f"heatmap {hm.shape} does not match crop {crop.shape[:2]}")
    if alpha == 0:
        out = crop.copy()
    else:
        blend = (1 - alpha) * crop.astype(np.float64) + alpha * 255.0 * jet(hm)
        out = np.clip(np.rint(blend), 0, 255).astype(np.uint8)
    if path is not None:
        Image.fromarray(out).save(path)
    return out


def heatmap_csv(heatmap, path):
    np.savetxt(path, heatmap.raw, delimiter=",", fmt="%.6f")


# --------------------------------------------------------------------------
# localization


def localization_score(heatmap, defect_bbox, top_fraction=0.1):
    """Enrichment of top-decile attention inside the defect box.

    ``(share of the top 10% heatmap mass inside the box) / (box area share)``.
    Pixels tied at the decile threshold share the remaining slots equally,
    so a constant map scores exactly 1.
    """
    hm = heatmap.upsampled if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    H, W = hm.shape
    x, y, w, h = defect_bbox
    if w <= 0 or h <= 0:
        raise ValueError("degenerate defect bbox")
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"defect bbox {defect_bbox} outside the {W}x{H} heatmap")
    inside = np.zeros((H, W), bool)
    inside[y:y + h, x:x + w] = True

    flat = hm.ravel()
    k = max(1, int(np.ceil(top_fraction * flat.size)))
    thresh = np.sort(flat)[::-1][k - 1]
    above = flat > thresh
    tied = flat == thresh
    weight = above.astype(np.float64)
    weight[tied] = (k - above.sum()) / tied.sum()
    frac_inside = weight[inside.ravel()].sum() / k
    return frac_inside / (inside.sum() / flat.size)
