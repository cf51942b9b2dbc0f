"""Early-prediction applications: prompt gating, seed selection, pair mining.

All three consume a *generator* (anything with ``partial(prompt, seed, t0)``
and ``full(prompt, seed)`` returning TrajectoryRecords; an optional
``partial_batch`` speeds up seed sweeps) and a *scorer* (a callable mapping
an AttentionStack to a predicted quality).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .costing import CostLedger, CostModel, cost_guided
from .dataset import TrajectoryRecord
from .errors import GenerationError


class TrajectoryGenerator(Protocol):
    total_steps: int

    def partial(self, prompt, seed: int, t0: int) -> TrajectoryRecord: ...

    def full(self, prompt, seed: int) -> TrajectoryRecord: ...


@dataclass(frozen=True)
class GateDecision:
    """Outcome of the prompt gate: keep, or rewrite when q_hat < tau."""

    original_prompt: object
    threshold: float
    predicted: float
    action: str  # "keep" | "rewrite"
    rewritten_prompt: object = None
    variant_scores: tuple[float, ...] = ()
    rewriter_error: Optional[str] = None

    def __post_init__(self):
        if self.action not in ("keep", "rewrite"):
            raise ValueError(f"unknown action {self.action!r}")
        if (self.action == "rewrite") != (self.predicted < self.threshold):
            raise ValueError("action must be 'rewrite' exactly when predicted < threshold")

    @property
    def effective_prompt(self):
        return self.rewritten_prompt if self.rewritten_prompt is not None else self.original_prompt


@dataclass(frozen=True)
class SelectionResult:
    """Argmax-of-predicted-quality seed choice over partial trajectories."""

    prompt_id: str
    candidates: tuple[tuple[int, float], ...]  # (seed, predicted)
    chosen_seed: int
    predicted_score: float
    realized_quality: float
    warnings: tuple[str, ...] = ()
    ledger: Optional[CostLedger] = None

    def __post_init__(self):
        seeds = [s for s, _ in self.candidates]
        if self.chosen_seed not in seeds:
            raise ValueError("chosen seed is not among the candidates")
        best = max(q for _, q in self.candidates)
        chosen_q = dict(self.candidates)[self.chosen_seed]
        if chosen_q < best:
            raise ValueError("chosen seed does not have the maximal predicted score")


@dataclass(frozen=True)
class MinedRecord:
    """Lightweight reference to a scored trajectory."""

    prompt_id: str
    seed: int
    qhat: float
    label: Optional[float] = None


@dataclass(frozen=True)
class PairSet:
    positives: tuple[MinedRecord, ...]
    negatives: tuple[MinedRecord, ...]
    theta_pos: float
    theta_neg: float

    def validate(self) -> None:
        if self.theta_pos < self.theta_neg:
            raise ValueError("theta_pos must be >= theta_neg")
        keys = {(r.prompt_id, r.seed) for r in self.positives}
        if keys & {(r.prompt_id, r.seed) for r in self.negatives}:
            raise ValueError("positive and negative sets overlap")
        if any(r.qhat < self.theta_pos for r in self.positives):
            raise ValueError("positive below theta_pos")
        if any(r.qhat > self.theta_neg for r in self.negatives):
            raise ValueError("negative above theta_neg")


@dataclass(frozen=True)
class PairMiningResult:
    pair_set: PairSet
    pairs: tuple[tuple[MinedRecord, MinedRecord], ...]
    diagnostic: Optional[str] = None


@dataclass(frozen=True)
class BatchStats:
    n: int
    label_variance: float
    frac_above_pos: float
    frac_below_neg: float
    usable: int
    usable_fraction: float


@dataclass(frozen=True)
class EffectiveSampleReport:
    filtered: BatchStats
    unfiltered: BatchStats
    theta_pos: float
    theta_neg: float
    usable_ratio: float

    def to_json(self) -> dict:
        return {
            "theta_pos": self.theta_pos,
            "theta_neg": self.theta_neg,
            "usable_ratio": self.usable_ratio,
            "filtered": vars(self.filtered),
            "unfiltered": vars(self.unfiltered),
        }


def default_gate_threshold(qhats: Sequence[float]) -> float:
    """Scale-free default for tau: the median predicted quality."""
    return float(np.median(np.asarray(qhats, dtype=np.float64)))


def default_pair_thresholds(qhats: Sequence[float]) -> tuple[float, float]:
    """Scale-free defaults: (70th percentile, 30th percentile)."""
    v = np.asarray(qhats, dtype=np.float64)
    return float(np.quantile(v, 0.7)), float(np.quantile(v, 0.3))


def _score_record(scorer, record: TrajectoryRecord, t0: int) -> float:
    return float(scorer(record.stack_at(t0)))


def select_seed(
    prompt,
    seeds: Sequence[int],
    generator: TrajectoryGenerator,
    scorer,
    t0: int,
    cost_model: CostModel | None = None,
) -> SelectionResult:
    """Run T0-step partials for every seed, fully generate only the argmax.

    Ties break toward the lowest seed value. Seeds whose partial generation
    fails are excluded with a warning; if every seed fails the selection
    fails. The ledger charges 1 full + |S| partials + |S| predictions.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one candidate seed")
    if len(set(seeds)) != len(seeds):
        raise ValueError("candidate seeds must be distinct")
    total = generator.total_steps
    if t0 > total // 2:
        raise ValueError(f"t0={t0} too large: partial must stay at or below T/2={total // 2}")

    warnings: list[str] = []
    partials: dict[int, TrajectoryRecord] = {}
    batch = getattr(generator, "partial_batch", None)
    if batch is not None:
        for seed, rec in zip(seeds, batch(prompt, seeds, t0)):
            partials[seed] = rec
    else:
        for seed in seeds:
            try:
                partials[seed] = generator.partial(prompt, seed, t0)
            except GenerationError as exc:
                warnings.append(f"seed {seed} excluded: {exc}")
    if not partials:
        raise GenerationError("all candidate seeds failed to generate")

    candidates = tuple((seed, _score_record(scorer, rec, t0)) for seed, rec in partials.items())
    chosen_seed, predicted = min(candidates, key=lambda c: (-c[1], c[0]))
    final = generator.full(prompt, chosen_seed)
    ledger = None
    if cost_model is not None:
        ledger = cost_guided(len(seeds), t0, cost_model)
    return SelectionResult(
        prompt_id=final.prompt_id,
        candidates=candidates,
        chosen_seed=chosen_seed,
        predicted_score=predicted,
        realized_quality=final.label_value(),
        warnings=tuple(warnings),
        ledger=ledger,
    )


def gate_prompt(
    prompt,
    generator: TrajectoryGenerator,
    scorer,
    tau: float,
    rewriter,
    seed: int = 0,
    t0: int = 5,
    n_variants: int = 4,
) -> GateDecision:
    """Rewrite the prompt only when its predicted quality falls below tau.

    The boundary keeps (strict ``< tau`` triggers the rewrite). On rewrite,
    ``n_variants`` candidates from ``rewriter(prompt, variant_index)`` are
    each probed at the same seed and the best-predicted one is kept. A
    rewriter failure is surfaced in the decision with the original prompt
    preserved.
    """
    if not np.isfinite(tau):
        raise ValueError("tau must be finite")
    qhat = _score_record(scorer, generator.partial(prompt, seed, t0), t0)
    if qhat >= tau:
        return GateDecision(prompt, tau, qhat, "keep")
    try:
        variants = [rewriter(prompt, v) for v in range(n_variants)]
        scores = tuple(
            _score_record(scorer, generator.partial(p, seed, t0), t0) for p in variants
        )
    except Exception as exc:  # surfaced, original prompt preserved
        return GateDecision(prompt, tau, qhat, "rewrite", None, (), f"{type(exc).__name__}: {exc}")
    best = int(np.argmax(scores))
    return GateDecision(prompt, tau, qhat, "rewrite", variants[best], scores)


def mine_pairs(
    records: Iterable[MinedRecord],
    theta_pos: float,
    theta_neg: float,
) -> PairMiningResult:
    """Partition scored trajectories into (D+, D-) and pair them per prompt.

    Mid-band records (theta_neg < qhat < theta_pos) are discarded. Pairs
    are the same-prompt cross product of D+ x D-, ordered by
    (prompt_id, positive seed, negative seed). Empty sides yield an empty
    pair list with a diagnostic rather than an error.
    """
    if theta_pos < theta_neg:
        raise ValueError("theta_pos must be >= theta_neg")
    recs = list(records)
    positives = tuple(r for r in recs if r.qhat >= theta_pos)
    # with theta_pos == theta_neg a record can satisfy both rules; the
    # positive set wins so the partition stays disjoint
    negatives = tuple(r for r in recs if r.qhat <= theta_neg and r.qhat < theta_pos)
    pair_set = PairSet(positives, negatives, theta_pos, theta_neg)
    pair_set.validate()
    by_prompt: dict[str, tuple[list[MinedRecord], list[MinedRecord]]] = {}
    for r in positives:
        by_prompt.setdefault(r.prompt_id, ([], []))[0].append(r)
    for r in negatives:
        by_prompt.setdefault(r.prompt_id, ([], []))[1].append(r)
    pairs = []
    for pid in sorted(by_prompt):
        pos, neg = by_prompt[pid]
        for p in sorted(pos, key=lambda r: r.seed):
            for m in sorted(neg, key=lambda r: r.seed):
                pairs.append((p, m))
    diagnostic = None
    if not positives or not negatives:
        diagnostic = (
            f"no pairs: |D+|={len(positives)}, |D-|={len(negatives)} "
            f"at thresholds ({theta_pos:.4g}, {theta_neg:.4g})"
        )
    return PairMiningResult(pair_set, tuple(pairs), diagnostic)


def write_pairs_jsonl(path: str | Path, result: PairMiningResult) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pos, neg in result.pairs:
            f.write(
                json.dumps(
                    {
                        "prompt_id": pos.prompt_id,
                        "seed_pos": pos.seed,
                        "seed_neg": neg.seed,
                        "qhat_pos": pos.qhat,
                        "qhat_neg": neg.qhat,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def _batch_stats(records: Sequence[MinedRecord], theta_pos: float, theta_neg: float) -> BatchStats:
    if not records:
        raise ValueError("empty batch")
    if any(r.label is None for r in records):
        raise ValueError("effective-sample accounting needs labeled batches")
    labels = np.asarray([r.label for r in records], dtype=np.float64)
    qhat = np.asarray([r.qhat for r in records])
    usable_keys = {
        (r.prompt_id, r.seed)
        for pos, neg in mine_pairs(records, theta_pos, theta_neg).pairs
        for r in (pos, neg)
    }
    usable = sum((r.prompt_id, r.seed) in usable_keys for r in records)
    return BatchStats(
        n=len(records),
        label_variance=float(labels.var()),
        frac_above_pos=float((qhat >= theta_pos).mean()),
        frac_below_neg=float((qhat <= theta_neg).mean()),
        usable=usable,
        usable_fraction=usable / len(records),
    )


def effective_sample_report(
    filtered: Sequence[MinedRecord],
    unfiltered: Sequence[MinedRecord],
    theta_pos: float,
    theta_neg: float,
) -> EffectiveSampleReport:
    """Compare label variance and usable (paired) fractions across batches."""
    fs = _batch_stats(filtered, theta_pos, theta_neg)
    us = _batch_stats(unfiltered, theta_pos, theta_neg)
    if us.usable_fraction == 0:
        ratio = 1.0 if fs.usable_fraction == 0 else float("inf")
    else:
        ratio = fs.usable_fraction / us.usable_fraction
    return EffectiveSampleReport(fs, us, theta_pos, theta_neg, ratio)
