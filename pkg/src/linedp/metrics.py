"""File-level classification metrics and effort-aware line-level metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given labels."""


class IntegrityError(ValueError):
    """Predictions and ground truth disagree about which lines exist."""


def _arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    return s, y


def auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic (ties count 1/2)."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both defective and clean instances")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, tn, fp, fn) with prediction = score >= threshold."""
    s, y = _arrays(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    return tp, tn, fp, fn


def balanced_accuracy(scores, labels, threshold: float = 0.5) -> float:
    tp, tn, fp, fn = confusion(scores, labels, threshold)
    if tp + fn == 0 or tn + fp == 0:
        raise UndefinedMetricError("balanced accuracy needs both classes")
    return (tp / (tp + fn) + tn / (tn + fp)) / 2.0


def mcc_with_flag(scores, labels, threshold: float = 0.5) -> tuple[float, bool]:
    """MCC and whether the zero-denominator convention (MCC = 0) was applied."""
    tp, tn, fp, fn = confusion(scores, labels, threshold)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0, True
    return (tp * tn - fp * fn) / math.sqrt(denom), False


def mcc(scores, labels, threshold: float = 0.5) -> float:
    return mcc_with_flag(scores, labels, threshold)[0]


# ---------------------------------------------------------------------------
# release-level line ranking
# ---------------------------------------------------------------------------

@dataclass
class RankedLine:
    file_id: str
    line_number: int
    score: float
    is_defective: bool
    loc_index: int


@dataclass
class ReleaseRanking:
    lines: list[RankedLine]

    @property
    def total_loc(self) -> int:
        return len(self.lines)

    @property
    def total_defective(self) -> int:
        return sum(1 for r in self.lines if r.is_defective)

    @property
    def defect_flags(self) -> np.ndarray:
        return np.fromiter((r.is_defective for r in self.lines), dtype=bool, count=len(self.lines))


def rank_release_lines(records, ground_truth: Mapping[str, Mapping[int, bool]],
                       order: str = "file-first") -> ReleaseRanking:
    """Global inspection order over every predicted line of a release.

    ``file-first``: files by probability descending (ties: file id), then each
    file's lines by score descending (ties: line number).  ``product``: all
    lines by probability x line score descending (ties: file id, line number).
    """
    if order not in ("file-first", "product"):
        raise ValueError(f"unknown ordering {order!r}")
    entries = []
    seen = set()
    for rec in records:
        truth = ground_truth.get(rec.file_id)
        if truth is None:
            raise IntegrityError(f"file {rec.file_id!r} has no ground truth")
        for num, score in rec.lines:
            key = (rec.file_id, num)
            if key in seen:
                raise IntegrityError(f"duplicate prediction for file {rec.file_id!r} line {num}")
            seen.add(key)
            if num not in truth:
                raise IntegrityError(f"file {rec.file_id!r} line {num} not in ground truth")
            entries.append((rec.prob, rec.file_id, num, score, bool(truth[num])))
    if order == "file-first":
        entries.sort(key=lambda e: (-e[0], e[1], -e[3], e[2]))
        ranked = [RankedLine(fid, num, sc, d, i + 1)
                  for i, (_, fid, num, sc, d) in enumerate(entries)]
    else:
        entries.sort(key=lambda e: (-(e[0] * e[3]), e[1], e[2]))
        ranked = [RankedLine(fid, num, p * sc, d, i + 1)
                  for i, (p, fid, num, sc, d) in enumerate(entries)]
    return ReleaseRanking(ranked)


def ceil_fraction(total: int, fraction: float) -> int:
    # round first so 0.2 * 10 does not become 2.0000000000000004 -> 3
    return math.ceil(round(fraction * total, 9))


def recall_at_top_loc(ranking: ReleaseRanking, fraction: float = 0.2) -> float:
    """Share of defective lines found within the first ceil(fraction * LOC) lines."""
    flags = ranking.defect_flags
    total = int(flags.sum())
    if total == 0:
        raise UndefinedMetricError("release has no defective lines")
    budget = ceil_fraction(flags.size, fraction)
    return float(flags[:budget].sum() / total)


def effort_at_top_recall(ranking: ReleaseRanking, fraction: float = 0.2) -> float:
    """LOC share inspected when the ceil(fraction * D)-th defective line is reached."""
    flags = ranking.defect_flags
    total = int(flags.sum())
    if total == 0:
        raise UndefinedMetricError("release has no defective lines")
    target = ceil_fraction(total, fraction)
    position = int(np.searchsorted(np.cumsum(flags), target)) + 1
    return position / flags.size


def recall_at_top20_loc(ranking: ReleaseRanking) -> float:
    return recall_at_top_loc(ranking, 0.2)


def effort_at_top20_recall(ranking: ReleaseRanking) -> float:
    return effort_at_top_recall(ranking, 0.2)


# ---------------------------------------------------------------------------
# combined report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    auc: float | None
    ba: float | None
    mcc: float | None
    recall_top20_loc: float | None
    effort_top20_recall: float | None
    threshold: float = 0.5
    counts: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def metric_items(self) -> list[tuple[str, float | None]]:
        return [("auc", self.auc), ("ba", self.ba), ("mcc", self.mcc),
                ("recall_top20_loc", self.recall_top20_loc),
                ("effort_top20_recall", self.effort_top20_recall)]


def evaluate_release(records, files, threshold: float = 0.5,
                     order: str = "file-first") -> MetricReport:
    """All five metrics for one release.

    ``files`` are the prepared ground-truth files; line labels come from them.
    Undefined metrics are reported as ``None`` with a flag instead of raising.
    """
    truth = {f.file_id: dict(zip(f.line_numbers, f.line_labels)) for f in files}
    labels_by_file = {f.file_id: f.file_label for f in files}
    probs = [r.prob for r in records]
    labels = [labels_by_file[r.file_id] for r in records]
    flags: list[str] = []

    def guarded(name, fn):
        try:
            return fn()
        except UndefinedMetricError as e:
            flags.append(f"{name}: {e}")
            return None

    m_auc = guarded("auc", lambda: auc(probs, labels))
    m_ba = guarded("ba", lambda: balanced_accuracy(probs, labels, threshold))
    m_mcc, zero = mcc_with_flag(probs, labels, threshold)
    if zero:
        flags.append("mcc: zero denominator, reported as 0")
    ranking = rank_release_lines(records, truth, order)
    m_rec = guarded("recall_top20_loc", lambda: recall_at_top20_loc(ranking))
    m_eff = guarded("effort_top20_recall", lambda: effort_at_top20_recall(ranking))
    tp, tn, fp, fn = confusion(probs, labels, threshold)
    counts = {"files": len(records), "defective_files": int(sum(labels)),
              "loc": ranking.total_loc, "defective_lines": ranking.total_defective,
              "tp": tp, "tn": tn, "fp": fp, "fn": fn}
    return MetricReport(m_auc, m_ba, m_mcc, m_rec, m_eff, threshold, counts, flags)


def within_file_rank_percentiles(records, files) -> list[float]:
    """rank / n_lines of every defective line inside its own file's ranking."""
    truth = {f.file_id: dict(zip(f.line_numbers, f.line_labels)) for f in files}
    out = []
    for rec in records:
        lab = truth[rec.file_id]
        n = len(rec.lines)
        for pos, (num, _) in enumerate(rec.lines, start=1):
            if lab.get(num):
                out.append(pos / n)
    return out
