"""Rank-correlation and classification metrics with fixed tie conventions.

Conventions (applied uniformly): Spearman uses average ranks; Kendall is
the tie-corrected tau-b; AUC counts tied score pairs as 1/2 (Mann-Whitney
form); median binarization labels strictly-greater-than-median as positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataset import TrajectoryRecord
from .errors import UndefinedMetricError
from .stackio import AttentionStack

_CHUNK = 512


def _as_vector(x, name: str, min_len: int) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size < min_len:
        raise ValueError(f"{name} needs at least {min_len} values, got {v.size}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} contains non-finite values")
    return v


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by their group average."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    order = np.argsort(x, kind="stable")
    sx = x[order]
    new_group = np.r_[True, sx[1:] != sx[:-1]]
    group = np.cumsum(new_group) - 1
    counts = np.bincount(group)
    pos_sum = np.bincount(group, weights=np.arange(1, n + 1))
    ranks = np.empty(n)
    ranks[order] = (pos_sum / counts)[group]
    return ranks


def pcc(a, b) -> float:
    """Pearson correlation; constant inputs are undefined."""
    va = _as_vector(a, "a", 3)
    vb = _as_vector(b, "b", 3)
    if va.size != vb.size:
        raise ValueError("input lengths differ")
    da = va - va.mean()
    db = vb - vb.mean()
    na = np.sqrt((da * da).sum())
    nb = np.sqrt((db * db).sum())
    if na == 0 or nb == 0:
        raise UndefinedMetricError("correlation undefined for a constant vector")
    return float((da * db).sum() / (na * nb))


def srcc(a, b) -> float:
    """Spearman rank correlation: Pearson over average ranks."""
    va = _as_vector(a, "a", 3)
    vb = _as_vector(b, "b", 3)
    if va.size != vb.size:
        raise ValueError("input lengths differ")
    if (va == va[0]).all() or (vb == vb[0]).all():
        raise UndefinedMetricError("rank correlation undefined for a constant vector")
    return pcc(average_ranks(va), average_ranks(vb))


def _tie_pair_count(x: np.ndarray) -> float:
    _, counts = np.unique(x, return_counts=True)
    return float((counts * (counts - 1) / 2).sum())


def ktc(a, b) -> float:
    """Kendall tau-b (tie-corrected concordant/discordant pair statistic)."""
    va = _as_vector(a, "a", 3)
    vb = _as_vector(b, "b", 3)
    if va.size != vb.size:
        raise ValueError("input lengths differ")
    n = va.size
    n0 = n * (n - 1) / 2
    n1 = _tie_pair_count(va)
    n2 = _tie_pair_count(vb)
    if n0 == n1 or n0 == n2:
        raise UndefinedMetricError("tau undefined: all pairs tied in one vector")
    s = 0.0
    cols = np.arange(n)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        da = np.sign(va[lo:hi, None] - va[None, :])
        db = np.sign(vb[lo:hi, None] - vb[None, :])
        upper = cols[None, :] > np.arange(lo, hi)[:, None]
        s += float((da * db)[upper].sum())
    return s / np.sqrt((n0 - n1) * (n0 - n2))


def binarize_median(q) -> tuple[np.ndarray, float]:
    """Strict-greater-than-median binarization; returns (labels, threshold)."""
    v = _as_vector(q, "q", 2)
    threshold = float(np.median(v))
    return (v > threshold).astype(np.int64), threshold


def auc_roc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting 1/2."""
    s = _as_vector(scores, "scores", 2)
    lab = np.asarray(labels).ravel().astype(np.int64)
    if lab.size != s.size:
        raise ValueError("input lengths differ")
    if set(np.unique(lab)) - {0, 1}:
        raise ValueError("labels must be 0/1")
    n_pos = int(lab.sum())
    n_neg = lab.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: only one class present")
    ranks = average_ranks(s)
    return float((ranks[lab == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class EvalReport:
    srcc: float
    ktc: float
    pcc: float
    auc_roc: float
    n: int
    binarization_threshold: float
    metric_name: str

    def validate(self) -> None:
        if self.n < 3:
            raise ValueError("report needs n >= 3")
        for name in ("srcc", "ktc", "pcc"):
            if not -1 - 1e-12 <= getattr(self, name) <= 1 + 1e-12:
                raise ValueError(f"{name} outside [-1, 1]")
        if not 0 <= self.auc_roc <= 1:
            raise ValueError("auc_roc outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "srcc": self.srcc,
            "ktc": self.ktc,
            "pcc": self.pcc,
            "auc_roc": self.auc_roc,
            "n": self.n,
            "binarization_threshold": self.binarization_threshold,
            "metric_name": self.metric_name,
        }


def balance_testset(
    records: Sequence,
    bins: int,
    per_bin: int,
    seed: int,
    label_of: Callable | None = None,
):
    """Flatten the label histogram: equal-width bins, uniform per-bin draws.

    Bins short of ``per_bin`` keep all their members. Deterministic given
    the seed; returns records in their original order.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    if per_bin < 1:
        raise ValueError("per_bin must be positive")
    if label_of is None:
        label_of = lambda r: r.labels[0].value  # noqa: E731
    values = np.asarray([label_of(r) for r in records], dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty record set")
    vmin, vmax = values.min(), values.max()
    if vmin == vmax:
        raise ValueError("degenerate label range: all labels identical")
    edges = np.linspace(vmin, vmax, bins + 1)
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, bins - 1)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for b in range(bins):
        members = np.flatnonzero(idx == b)
        if members.size <= per_bin:
            chosen.extend(members.tolist())
        else:
            chosen.extend(rng.choice(members, size=per_bin, replace=False).tolist())
    return [records[i] for i in sorted(chosen)]


def evaluate_probe(
    scorer,
    records: Iterable[TrajectoryRecord],
    capture_step: int,
    metric_name: str | None = None,
) -> EvalReport:
    """Score each record's stack at the capture step and report all metrics.

    ``scorer`` maps an AttentionStack to a float; objects exposing
    ``score_batch(stacks)`` are evaluated in one call.
    """
    recs = list(records)
    if not recs:
        raise ValueError("no records to evaluate")
    if metric_name is None:
        metric_name = recs[0].labels[0].metric_name
    stacks: list[AttentionStack] = [r.stack_at(capture_step) for r in recs]
    truth = np.asarray([r.label_value(metric_name) for r in recs])
    if hasattr(scorer, "score_batch"):
        qhat = np.asarray(scorer.score_batch(stacks), dtype=np.float64)
    else:
        qhat = np.asarray([float(scorer(s)) for s in stacks])
    bin_labels, threshold = binarize_median(truth)
    report = EvalReport(
        srcc=srcc(qhat, truth),
        ktc=ktc(qhat, truth),
        pcc=pcc(qhat, truth),
        auc_roc=auc_roc(qhat, bin_labels),
        n=len(recs),
        binarization_threshold=threshold,
        metric_name=metric_name,
    )
    report.validate()
    return report
