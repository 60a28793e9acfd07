"""Independent reference implementations used by the tests.

Everything here is written against numpy or plain loops, never by calling
the function under test.
"""

from __future__ import annotations

import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, index, h: float = 1e-3) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for a scalar-valued ``fn``."""
    xp, xm = x.clone(), x.clone()
    xp[index] += h
    xm[index] -= h
    with torch.no_grad():
        return float((fn(xp) - fn(xm)) / (2 * h))


def random_indices(shape, k: int, seed: int):
    rng = np.random.default_rng(seed)
    return [tuple(int(rng.integers(0, s)) for s in shape) for _ in range(k)]


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def cosine(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.array([np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)) for x, y in zip(a, b)])


def symmetric_cross_entropy(sim) -> float:
    s = np.asarray(sim, dtype=np.float64)
    n = s.shape[0]
    total_rows = 0.0
    total_cols = 0.0
    for i in range(n):
        total_rows += -s[i, i] + np.log(np.sum(np.exp(s[i, :])))
        total_cols += -s[i, i] + np.log(np.sum(np.exp(s[:, i])))
    return (total_rows / n + total_cols / n) / 2


def project_l2(delta: np.ndarray, eps: float) -> np.ndarray:
    out = delta.copy()
    for i in range(delta.shape[0]):
        n = np.sqrt(np.sum(delta[i].astype(np.float64) ** 2))
        if n > eps:
            out[i] = delta[i] * (eps / n)
    return out


def r_precision_brute(sim) -> float:
    s = np.asarray(sim)
    hits = 0
    for i in range(s.shape[0]):
        best = 0
        for j in range(1, s.shape[1]):
            if s[i, j] > s[i, best]:
                best = j
        hits += best == i
    return hits / s.shape[0]


def preference_brute(a, b) -> float:
    score = 0.0
    for x, y in zip(a, b):
        score += 1.0 if x > y else 0.5 if x == y else 0.0
    return score / len(a)


def gradcam_loop(features, gradients) -> np.ndarray:
    c, h, w = features.shape
    weights = [sum(gradients[k, i, j] for i in range(h) for j in range(w)) / (h * w) for k in range(c)]
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            v = sum(weights[k] * features[k, i, j] for k in range(c))
            out[i, j] = max(v, 0.0)
    return out


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """(C, H, W) -> (C, H/f, W/f) by block means."""
    c, h, w = img.shape
    out = np.zeros((c, h // factor, w // factor))
    for k in range(c):
        for i in range(h // factor):
            for j in range(w // factor):
                out[k, i, j] = img[k, i * factor : (i + 1) * factor, j * factor : (j + 1) * factor].mean()
    return out


def per_pixel_variance(x: np.ndarray) -> np.ndarray:
    n, d = x.shape
    out = np.zeros(d)
    for j in range(d):
        m = sum(x[i, j] for i in range(n)) / n
        out[j] = sum((x[i, j] - m) ** 2 for i in range(n)) / (n - 1)
    return out


def translate_loop(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    c, h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            sy, sx = y - dy, x - dx
            if 0 <= sy < h and 0 <= sx < w:
                out[:, y, x] = img[:, sy, sx]
    return out

