"""Independent reference implementations written with explicit loops."""
from __future__ import annotations

import math

import numpy as np


def relu(x: float) -> float:
    return x if x > 0 else 0.0


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def project_loop(H, W, activate=True):
    n, d = len(H), len(H[0])
    k = len(W[0])
    out = [[sum(H[i][a] * W[a][c] for a in range(d)) for c in range(k)] for i in range(n)]
    if activate:
        out = [[relu(v) for v in row] for row in out]
    return out


def interaction_loop(H_l, H_c, U, M, q, mask=None):
    """A[i][j] = sum_c P[i][c] q[c] Q[j][c] with masked rows/cols zero."""
    P, Q = project_loop(H_l, U), project_loop(H_c, M)
    n, k = len(P), len(q)
    keep = mask if mask is not None else [True] * n
    return [[sum(P[i][c] * q[c] * Q[j][c] for c in range(k)) if keep[i] and keep[j] else 0.0
             for j in range(n)] for i in range(n)]


def pooling_loop(H_l, H_c, U, M, A, activate=True, mask=None):
    """f''[c] = sum_i sum_j P[i][c] A[i][j] Q[j][c]."""
    P, Q = project_loop(H_l, U, activate), project_loop(H_c, M, activate)
    n, k = len(P), len(U[0])
    keep = mask if mask is not None else [True] * n
    out = []
    for c in range(k):
        total = 0.0
        for i in range(n):
            for j in range(n):
                if keep[i] and keep[j]:
                    total += P[i][c] * A[i][j] * Q[j][c]
        out.append(total)
    return out


def bafn_loop(H_l, H_c, U, M, qs, stride, activate=True, mask=None):
    """Fused two-head feature plus per-head maps, every step a plain loop."""
    fused = None
    maps = []
    for q in qs:
        A = interaction_loop(H_l, H_c, U, M, q, mask)
        maps.append(A)
        f2 = pooling_loop(H_l, H_c, U, M, A, activate, mask)
        pooled = [sum(f2[g * stride:(g + 1) * stride]) for g in range(len(f2) // stride)]
        fused = pooled if fused is None else [a + b for a, b in zip(fused, pooled)]
    return fused, maps


def auc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def confusion_loop(scores, labels, threshold=0.5):
    tp = tn = fp = fn = 0
    for s, y in zip(scores, labels):
        pred = s >= threshold
        if pred and y:
            tp += 1
        elif pred:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def ba_loop(scores, labels, threshold=0.5) -> float:
    tp, tn, fp, fn = confusion_loop(scores, labels, threshold)
    return 0.5 * (tp / (tp + fn) + tn / (tn + fp))


def mcc_loop(scores, labels, threshold=0.5) -> float:
    tp, tn, fp, fn = confusion_loop(scores, labels, threshold)
    den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return 0.0 if den == 0 else (tp * tn - fp * fn) / den


def inspection_order(files):
    """files: list of (file_id, prob, [(line, score, defective), ...]) -> flags in order."""
    order = []
    for fid, prob, lines in sorted(files, key=lambda f: (-f[1], f[0])):
        for line, score, bad in sorted(lines, key=lambda t: (-t[1], t[0])):
            order.append(bad)
    return order


def recall_scan(flags, fraction=0.2) -> float:
    """Walk the ranking line by line until the LOC budget is spent."""
    budget = 0
    while budget < fraction * len(flags) - 1e-9:
        budget += 1
    found = 0
    for pos, bad in enumerate(flags, start=1):
        if pos > budget:
            break
        found += bad
    return found / sum(flags)


def effort_scan(flags, fraction=0.2) -> float:
    """Walk the ranking until enough defective lines have been seen."""
    need = 0
    while need < fraction * sum(flags) - 1e-9:
        need += 1
    need = max(need, 1)
    seen = 0
    for pos, bad in enumerate(flags, start=1):
        seen += bad
        if seen >= need:
            return pos / len(flags)
    raise AssertionError("unreachable")


def random_bafn_instance(rng: np.random.Generator, max_lines=5, max_dim=4, stride=None):
    n = int(rng.integers(1, max_lines + 1))
    d = int(rng.integers(1, max_dim + 1))
    dc = int(rng.integers(1, max_dim + 1))
    if stride is None:
        stride = int(rng.integers(1, 3))
    k = stride * int(rng.integers(1, max_dim // stride + 1))
    return {
        "H_l": rng.normal(size=(n, d)),
        "H_c": rng.normal(size=(n, dc)),
        "U": rng.normal(size=(d, k)),
        "M": rng.normal(size=(dc, k)),
        "q": [rng.normal(size=(1, k)), rng.normal(size=(1, k))],
        "stride": stride,
        "mask": [bool(b) for b in rng.random(n) > 0.2],
    }
