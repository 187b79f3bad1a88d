"""Slow, obviously-correct reference implementations used as test oracles."""

import numpy as np


def direct_correlation(x, w, b, padding):
    """Nested-loop cross-correlation with a zero border."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    y = np.zeros((n, co, ho, wo))
    for s in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r, q = i + u - padding, j + v - padding
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[s, ch, r, q] * w[o, ch, u, v]
                    y[s, o, i, j] = acc
    return y


def window_max(x):
    n, c, h, w = x.shape
    y = np.empty((n, c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            y[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(n, c, 4).max(axis=2)
    return y


def mann_whitney_auc(scores, labels):
    """P(random positive outscores random negative), ties counted 1/2, as an exact fraction pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    twice = 0
    for p in pos:
        for q in neg:
            twice += 2 if p > q else 1 if p == q else 0
    return twice, 2 * len(pos) * len(neg)


def numeric_grad(f, arr, step=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        fp = f()
        arr[i] = old - step
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def chebyshev_cos(k, t):
    return np.cos(k * np.arccos(np.clip(t, -1, 1)))


def chebyshev_projection(samples, order):
    """c_mn by the explicit double sum over the node grid with T_k(t) = cos(k arccos t)."""
    n = samples.shape[0]
    t = np.cos(np.pi * (np.arange(n) + 0.5) / n)
    c = np.zeros((order + 1, order + 1))
    for m in range(order + 1):
        for k in range(order + 1):
            total = 0.0
            for i in range(n):
                for j in range(n):
                    total += samples[i, j] * chebyshev_cos(m, t[i]) * chebyshev_cos(k, t[j])
            c[m, k] = total * (1 if m == 0 else 2) * (1 if k == 0 else 2) / n ** 2
    return c


def lenet5_param_count():
    """Layer-formula arithmetic: conv k*k*ci*co + co, dense d*k + k."""
    return (5 * 5 * 1 * 6 + 6) + (5 * 5 * 6 * 16 + 16) + (400 * 120 + 120) + (120 * 84 + 84) + (84 * 2 + 2)
