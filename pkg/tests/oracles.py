"""Brute-force reference implementations used by the tests.

Deliberately loop-based and independent of the package code paths they check.
"""

import numpy as np


def pixel_scan_incidence(region_map, patch, factor=1):
    h, w = region_map.shape
    fp = patch * factor
    out = []
    for pr in range(h // fp):
        for pc in range(w // fp):
            labels = set()
            for y in range(pr * fp, (pr + 1) * fp):
                for x in range(pc * fp, (pc + 1) * fp):
                    v = int(region_map[y, x])
                    if v:
                        labels.add(v)
            out.append(labels)
    return out


def pairwise_B(incidence):
    n = len(incidence)
    B = np.zeros((n, n))
    for i in range(n):
        for k in range(n):
            if incidence[i] & incidence[k]:
                B[i, k] = 1.0
    return B


def one_over_k(B):
    out = np.zeros_like(B, dtype=float)
    for i in range(B.shape[0]):
        k = sum(1 for v in B[i] if v)
        for j in range(B.shape[1]):
            if B[i, j]:
                out[i, j] = 1.0 / k
    return out


def count_edges(B):
    n = B.shape[0]
    total = 0
    for i in range(n):
        for k in range(n):
            if B[i, k]:
                total += 1
    return total, n * n


def random_region_map(rng, h, w, max_regions=4):
    """Random axis-aligned and disc-shaped regions, later ones painted over earlier."""
    m = np.zeros((h, w), dtype=np.uint8)
    r = int(rng.integers(0, max_regions + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    for lab in range(1, r + 1):
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            y1, x1 = y0 + rng.integers(1, h // 2 + 2), x0 + rng.integers(1, w // 2 + 2)
            m[y0:y1, x0:x1] = lab
        else:
            cy, cx, rad = rng.integers(0, h), rng.integers(0, w), rng.integers(1, max(2, h // 4))
            m[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = lab
    return m


def average_precision_table(scores, labels):
    """AP by explicit precision/recall table; ties broken by sample index."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    npos = sum(labels)
    rows = []
    tp = 0
    for rank, i in enumerate(order, start=1):
        tp += labels[i]
        rows.append((tp / rank, tp / npos))
    ap, prev_recall = 0.0, 0.0
    for precision, recall in rows:
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap
