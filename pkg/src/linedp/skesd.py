"""Scott-Knott ESD ranking of methods over per-task metric values.

1. If any method's values fail a Shapiro-Wilk normality test, every value is
   log(x + 1)-transformed.
2. Methods sorted by mean are split recursively at the cut maximising the
   between-group sum of squares; a split is kept only if the one-way F test
   between the two pooled groups is significant.
3. Adjacent clusters whose Cohen's d is negligible (< 0.2) are merged.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

NEGLIGIBLE_D = 0.2


@dataclass
class SkEsdResult:
    ranks: dict[str, int]
    clusters: list[list[str]]
    effect_sizes: list[float] = field(default_factory=list)
    transformed: bool = False


def cohens_d(x: Sequence[float], y: Sequence[float]) -> float:
    """Mean difference over the pooled standard deviation (inf when it is zero)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = x.size, y.size
    diff = x.mean() - y.mean()
    pooled = ((nx - 1) * x.var(ddof=1) + (ny - 1) * y.var(ddof=1)) / (nx + ny - 2)
    if pooled <= 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return float(diff / math.sqrt(pooled))


def _needs_transform(data: Mapping[str, np.ndarray], alpha: float) -> bool:
    for vals in data.values():
        if np.ptp(vals) == 0:
            continue
        if stats.shapiro(vals).pvalue < alpha:
            return True
    return False


def _best_split(groups: list[np.ndarray]) -> tuple[int, float]:
    allv = np.concatenate(groups)
    grand = allv.mean()
    best_i, best_b = 1, -1.0
    for i in range(1, len(groups)):
        left = np.concatenate(groups[:i])
        right = np.concatenate(groups[i:])
        b = left.size * (left.mean() - grand) ** 2 + right.size * (right.mean() - grand) ** 2
        if b > best_b + 1e-15:
            best_i, best_b = i, b
    return best_i, best_b


def _split_significant(left: np.ndarray, right: np.ndarray, between: float, alpha: float) -> bool:
    n = left.size + right.size
    within = ((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum()
    if within <= 0:
        return between > 0
    f = between / (within / (n - 2))
    return stats.f.sf(f, 1, n - 2) < alpha


def _partition(names: list[str], data: Mapping[str, np.ndarray], alpha: float) -> list[list[str]]:
    if len(names) == 1:
        return [names]
    groups = [data[n] for n in names]
    i, between = _best_split(groups)
    left, right = np.concatenate(groups[:i]), np.concatenate(groups[i:])
    if not _split_significant(left, right, between, alpha):
        return [names]
    return _partition(names[:i], data, alpha) + _partition(names[i:], data, alpha)


def scott_knott_esd(results: Mapping[str, Sequence[float]], alpha: float = 0.05,
                    higher_is_better: bool = True, transform: str = "auto") -> SkEsdResult:
    """Rank methods into statistically distinct, non-negligibly different clusters.

    ``transform`` is ``"auto"`` (log if normality fails), ``"log"`` or ``"none"``.
    """
    if len(results) < 2:
        raise ValueError("Scott-Knott ESD needs at least two methods")
    lengths = {len(v) for v in results.values()}
    if len(lengths) != 1 or min(lengths) < 3:
        raise ValueError("every method needs the same number (>= 3) of observations")
    data = {k: np.asarray(v, dtype=np.float64) for k, v in results.items()}
    allv = np.concatenate(list(data.values()))
    if not np.isfinite(allv).all():
        raise ValueError("observations must be finite")
    if np.ptp(allv) == 0:
        names = sorted(data)
        return SkEsdResult({n: 1 for n in names}, [names])

    do_log = transform == "log" or (transform == "auto" and _needs_transform(data, alpha))
    if do_log:
        if allv.min() <= -1:
            log.warning("values <= -1 cannot be log(x+1)-transformed; using raw values")
            do_log = False
        else:
            data = {k: np.log1p(v) for k, v in data.items()}

    sign = 1.0 if higher_is_better else -1.0
    names = sorted(data, key=lambda n: (-sign * data[n].mean(), n))
    clusters = _partition(names, data, alpha)

    def pooled(c):
        return np.concatenate([data[n] for n in c])

    merged = True
    while merged and len(clusters) > 1:
        merged = False
        ds = [abs(cohens_d(pooled(a), pooled(b))) for a, b in zip(clusters, clusters[1:])]
        j = int(np.argmin(ds))
        if ds[j] < NEGLIGIBLE_D:
            clusters[j:j + 2] = [clusters[j] + clusters[j + 1]]
            merged = True
    effects = [abs(cohens_d(pooled(a), pooled(b))) for a, b in zip(clusters, clusters[1:])]
    ranks = {n: r for r, c in enumerate(clusters, start=1) for n in c}
    return SkEsdResult(ranks, clusters, effects, do_log)
