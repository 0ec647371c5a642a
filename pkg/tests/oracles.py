"""Brute-force reference implementations used only by the tests.

These loop over pixels and taps directly and share no code with the
package, so agreement is evidence rather than tautology.
"""

import math

import numpy as np


def same_pads(extent, k, stride, dilation):
    span = (k - 1) * dilation + 1
    out = -(-extent // stride)
    total = max((out - 1) * stride + span - extent, 0)
    return total // 2, total - total // 2, out


def naive_conv2d(x, w, b=None, stride=1, dilation=1, padding="same"):
    """x: N,H,W,C  w: kh,kw,C,F."""
    n, h, wd, c = x.shape
    kh, kw, _, f = w.shape
    if padding == "same":
        top, _, ho = same_pads(h, kh, stride, dilation)
        left, _, wo = same_pads(wd, kw, stride, dilation)
    else:
        top = left = 0
        ho = (h - (kh - 1) * dilation - 1) // stride + 1
        wo = (wd - (kw - 1) * dilation - 1) // stride + 1
    out = np.zeros((n, ho, wo, f))
    for i in range(ho):
        for j in range(wo):
            for u in range(kh):
                for v in range(kw):
                    y = i * stride + u * dilation - top
                    z = j * stride + v * dilation - left
                    if 0 <= y < h and 0 <= z < wd:
                        out[:, i, j, :] += x[:, y, z, :] @ w[u, v]
    if b is not None:
        out += b
    return out


def naive_depthwise(x, w, b=None, stride=1, dilation=1, padding="same"):
    """x: N,H,W,C  w: kh,kw,C; channel c uses only w[..., c]."""
    c = x.shape[3]
    full = np.zeros(w.shape[:2] + (c, c))
    for k in range(c):
        full[:, :, k, k] = w[:, :, k]
    return naive_conv2d(x, full, b, stride, dilation, padding)


SOBEL_X = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
SOBEL_Y = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]


def sobel_direct(x):
    """Channel-mean Sobel magnitude with clamped (replicated) borders."""
    n, h, w, c = x.shape
    out = np.zeros((n, h, w, 1))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for ch in range(c):
                    gx = gy = 0.0
                    for u in range(3):
                        for v in range(3):
                            val = x[b, min(max(i + u - 1, 0), h - 1), min(max(j + v - 1, 0), w - 1), ch]
                            gx += SOBEL_X[u][v] * val
                            gy += SOBEL_Y[u][v] * val
                    acc += math.sqrt(gx * gx + gy * gy + 1e-12)
                out[b, i, j, 0] = acc / c
    return out


def pool_scan(x, kind, k, stride, padding="valid"):
    """Window scan; out-of-frame taps are ignored (max) or excluded from the mean (avg)."""
    n, h, w, c = x.shape
    if padding == "same":
        top, _, ho = same_pads(h, k, stride, 1)
        left, _, wo = same_pads(w, k, stride, 1)
    else:
        top = left = 0
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            vals = [x[:, y, z, :] for y in range(i * stride - top, i * stride - top + k)
                    for z in range(j * stride - left, j * stride - left + k) if 0 <= y < h and 0 <= z < w]
            stack = np.stack(vals)
            out[:, i, j, :] = stack.max(axis=0) if kind == "max" else stack.mean(axis=0)
    return out


def pixel_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def loop_bias_add(x, bias):
    out = np.empty_like(x)
    n, h, w, c = x.shape
    for a in range(n):
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    out[a, i, j, k] = x[a, i, j, k] + bias[0, 0, 0, k]
    return out


def loop_bce(p, g, clamp=1e-7):
    total = 0.0
    for pv, gv in zip(np.ravel(p), np.ravel(g)):
        pv = min(max(pv, clamp), 1 - clamp)
        total += -(gv * math.log(pv) + (1 - gv) * math.log(1 - pv))
    return total / np.size(p)


def point_in_ellipse(i, j, cx, cy, a, b, theta):
    """Pixel (row i, col j) sits at (x=j, y=i)."""
    c, s = math.cos(theta), math.sin(theta)
    dx, dy = j - cx, i - cy
    u = dx * c + dy * s
    v = dy * c - dx * s
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0
