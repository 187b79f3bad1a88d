"""Handcrafted image descriptors for the shallow baseline.

68 values per crop, in this fixed order:

* 24 multi-scale grey-level histograms: the image at full, half and quarter
  resolution (block means), 8 bins each over [0, 1];
* 32 Chebyshev statistics: a histogram of log10 |c_mn| over the 2-D
  Chebyshev coefficients of orders 0..20 (the DC term excluded), 32 bins
  over [-6, 0];
* 12 Radon features: mean line integrals at 0, 45, 90 and 135 degrees,
  each projection summarised by a 3-bin histogram over its own range.

Every histogram is normalised to sum to 1.
"""

from __future__ import annotations

import csv

import numpy as np

from .data import to_gray

FEATURE_VERSION = 1
CHEB_ORDER = 20
CHEB_NODES = 32
CHEB_BINS = 32
CHEB_LOG_RANGE = (-6.0, 0.0)
ANGLES = (0, 45, 90, 135)

FEATURE_NAMES = (
    [f"hist_s{s}_b{b}" for s in (1, 2, 4) for b in range(8)]
    + [f"cheb_b{b}" for b in range(CHEB_BINS)]
    + [f"radon_{a}_b{b}" for a in ANGLES for b in range(3)]
)
N_FEATURES = len(FEATURE_NAMES)


def _hist(values, bins, lo, hi):
    h, _ = np.histogram(np.clip(values, lo, hi), bins=bins, range=(lo, hi))
    return h / h.sum()


def block_mean(img, f):
    if f == 1:
        return img
    h, w = img.shape
    hh, ww = max(h // f, 1), max(w // f, 1)
    fy, fx = min(f, h), min(f, w)
    return img[:hh * fy, :ww * fx].reshape(hh, fy, ww, fx).mean(axis=(1, 3))


def chebyshev_nodes(n=CHEB_NODES):
    return np.cos(np.pi * (np.arange(n) + 0.5) / n)


def sample_on_nodes(img, n=CHEB_NODES):
    """Bilinear samples of ``img`` at the n x n Chebyshev-node grid on [-1, 1]^2."""
    h, w = img.shape
    t = chebyshev_nodes(n)
    ys = (t + 1) / 2 * (h - 1)
    xs = (t + 1) / 2 * (w - 1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    return ((img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx) * (1 - fy)
            + (img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx) * fy)


def chebyshev_basis(order, n=CHEB_NODES):
    """T_k at the nodes for k = 0..order by the three-term recurrence."""
    x = chebyshev_nodes(n)
    T = np.empty((order + 1, n))
    T[0] = 1.0
    if order >= 1:
        T[1] = x
    for k in range(2, order + 1):
        T[k] = 2 * x * T[k - 1] - T[k - 2]
    return T


def chebyshev_coefficients(img, order=CHEB_ORDER, n=CHEB_NODES):
    """Discrete Chebyshev transform coefficients c[m, n] of ``img``.

    Exact for any polynomial of degree < n in each axis: the image sampled
    at the nodes equals sum c_mn T_m(y) T_n(x).
    """
    g = sample_on_nodes(img, n)
    T = chebyshev_basis(order, n)
    scale = np.full(order + 1, 2.0 / n)
    scale[0] = 1.0 / n
    return (scale[:, None] * T) @ g @ (scale[:, None] * T).T


def radon_projections(img):
    """Mean intensity along each line at 0, 45, 90 and 135 degrees."""
    h, w = img.shape
    flipped = img[:, ::-1]
    return [
        img.mean(axis=0),                                                  # vertical lines
        np.array([flipped.diagonal(k).mean() for k in range(-(h - 1), w)]),  # anti-diagonals
        img.mean(axis=1),                                                  # horizontal lines
        np.array([img.diagonal(k).mean() for k in range(-(h - 1), w)]),      # diagonals
    ]


def _range_hist3(p):
    lo, hi = p.min(), p.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.array([0.0, 1.0, 0.0])
    return _hist(p, 3, lo, hi)


def extract_features(crop):
    """68-value descriptor of an (h, w, 3) uint8 crop (or an (h, w) grey image)."""
    img = to_gray(crop) / 255.0 if crop.ndim == 3 else np.asarray(crop, np.float64)
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"crop {img.shape} too small for feature extraction")
    parts = [_hist(block_mean(img, f).ravel(), 8, 0.0, 1.0) for f in (1, 2, 4)]

    c = chebyshev_coefficients(img)
    mags = np.abs(c).ravel()[1:]
    logs = np.log10(np.maximum(mags, 1e-300))
    parts.append(_hist(logs, CHEB_BINS, *CHEB_LOG_RANGE))

    parts += [_range_hist3(p) for p in radon_projections(img)]
    out = np.concatenate(parts)
    assert out.size == N_FEATURES
    return out


def extract_all(crops):
    return np.stack([extract_features(c) for c in crops]) if len(crops) else np.zeros((0, N_FEATURES))


def write_feature_csv(features, labels, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([*FEATURE_NAMES, "label"])
        for row, y in zip(features, labels):
            wr.writerow([*(repr(float(v)) for v in row), int(y)])


def read_feature_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0][:-1] != FEATURE_NAMES:
        raise ValueError(f"{path}: feature header does not match version {FEATURE_VERSION}")
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, N_FEATURES + 1)
    return data[:, :-1], data[:, -1].astype(np.int64)
