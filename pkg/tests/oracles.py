"""Independent brute-force oracles used across the test suite.

These deliberately avoid the library's own code paths: ranks are computed by
sorting, AUC by explicit pair counting, hulls by Jarvis march with integer
arithmetic, and group-weight updates by the closed-form exponentiated
gradient formula.
"""

from __future__ import annotations

import math

import numpy as np


def brute_force_ranks(values) -> list[float]:
    """Average-tie ranks via explicit counting."""
    values = list(values)
    ranks = []
    for v in values:
        less = sum(1 for u in values if u < v)
        equal = sum(1 for u in values if u == v)
        ranks.append(less + (equal + 1) / 2.0)
    return ranks


def brute_force_spearman(x, y) -> float:
    """Pearson correlation of brute-force ranks."""
    rx = brute_force_ranks(x)
    ry = brute_force_ranks(y)
    mx = sum(rx) / len(rx)
    my = sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


def brute_force_phi(x, y) -> float:
    """Phi coefficient from the 2x2 contingency counts."""
    x = np.asarray(x)
    y = np.asarray(y)
    n11 = int(((x == 1) & (y == 1)).sum())
    n10 = int(((x == 1) & (y == 0)).sum())
    n01 = int(((x == 0) & (y == 1)).sum())
    n00 = int(((x == 0) & (y == 0)).sum())
    den = math.sqrt((n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00))
    return (n11 * n00 - n10 * n01) / den


def brute_force_auc(scores, labels) -> float:
    """O(P*N) pairwise concordance count with half credit for ties."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def jarvis_hull(points: np.ndarray) -> np.ndarray:
    """Gift-wrapping convex hull of integer points, CCW, collinear dropped."""
    pts = [tuple(p) for p in np.unique(np.asarray(points, dtype=np.int64), axis=0)]
    if len(pts) <= 2:
        return np.array(pts, dtype=np.int64)
    start = min(pts)
    hull = [start]
    current = start
    while True:
        candidate = pts[0] if pts[0] != current else pts[1]
        for p in pts:
            if p == current:
                continue
            cross = (candidate[0] - current[0]) * (p[1] - current[1]) - (
                candidate[1] - current[1]
            ) * (p[0] - current[0])
            if cross < 0:
                candidate = p
            elif cross == 0:
                # keep the farthest collinear point
                d_c = (candidate[0] - current[0]) ** 2 + (candidate[1] - current[1]) ** 2
                d_p = (p[0] - current[0]) ** 2 + (p[1] - current[1]) ** 2
                if d_p > d_c:
                    candidate = p
        hull.append(candidate)
        current = candidate
        if candidate == start:
            break
    hull.pop()
    return np.array(hull, dtype=np.int64)


def brute_force_hull_mask(mask: np.ndarray) -> np.ndarray:
    """Filled hull of foreground pixel centers via Jarvis march and exact
    point-in-convex-polygon tests."""
    ys, xs = np.nonzero(mask)
    points = np.stack([xs, ys], axis=1)
    verts = jarvis_hull(points)
    out = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    if len(verts) == 1:
        out[verts[0][1], verts[0][0]] = True
        return out
    for y in range(ys.min(), ys.max() + 1):
        for x in range(xs.min(), xs.max() + 1):
            if len(verts) == 2:
                a, b = verts
                cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0])
                inside = cross == 0
            else:
                inside = True
                for i in range(len(verts)):
                    a = verts[i]
                    b = verts[(i + 1) % len(verts)]
                    cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0])
                    if cross < 0:
                        inside = False
                        break
            out[y, x] = inside
    return out


def exponentiated_gradient_update(q, losses, eta) -> np.ndarray:
    """Closed-form q update: q_i * exp(eta * loss_i), renormalized."""
    q = np.asarray(q, dtype=float) * np.exp(eta * np.asarray(losses, dtype=float))
    return q / q.sum()
