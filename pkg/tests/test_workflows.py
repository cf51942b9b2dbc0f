import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnprobe.costing import CostModel
from attnprobe.dataset import QualityLabel, TrajectoryRecord
from attnprobe.errors import GenerationError
from attnprobe.stackio import AttentionStack
from attnprobe.workflows import (
    GateDecision,
    MinedRecord,
    PairSet,
    default_gate_threshold,
    default_pair_thresholds,
    effective_sample_report,
    gate_prompt,
    mine_pairs,
    select_seed,
    write_pairs_jsonl,
)


def tiny_stack(prompt_id, seed, step, total=20):
    maps = np.full((1, 1, 2, 2), 0.25, dtype=np.float32)
    return AttentionStack(prompt_id, seed, step, total, (0,), maps, np.array([True]), True)


class StubGenerator:
    """Table-driven generator; scorers look results up by (prompt, seed)."""

    total_steps = 20

    def __init__(self, table, fail_seeds=()):
        self.table = table
        self.fail_seeds = set(fail_seeds)
        self.full_calls = []
        self.partial_calls = []

    def partial(self, prompt, seed, t0):
        if seed in self.fail_seeds:
            raise GenerationError(f"seed {seed} exploded")
        self.partial_calls.append((prompt, seed))
        return TrajectoryRecord(prompt, (prompt,), prompt, seed, self.total_steps, t0,
                                (tiny_stack(prompt, seed, t0),))

    def full(self, prompt, seed):
        self.full_calls.append((prompt, seed))
        label = QualityLabel("programmatic", self.table[(prompt, seed)])
        return TrajectoryRecord(prompt, (prompt,), prompt, seed, self.total_steps,
                                self.total_steps, (), labels=(label,))


def table_scorer(table):
    return lambda stack: table[(stack.prompt_id, stack.seed)]


# ------------------------------------------------------------- seed choice


def test_select_seed_argmax():
    table = {("p", 7): 0.2, ("p", 8): 0.9, ("p", 9): 0.5}
    gen = StubGenerator(table)
    result = select_seed("p", [7, 8, 9], gen, table_scorer(table), t0=5)
    assert result.chosen_seed == 8
    assert result.predicted_score == 0.9
    assert result.realized_quality == 0.9
    assert gen.full_calls == [("p", 8)]  # exactly one full generation
    assert len(gen.partial_calls) == 3


def test_select_seed_tie_breaks_low():
    table = {("p", 3): 0.9, ("p", 11): 0.9}
    gen = StubGenerator(table)
    result = select_seed("p", [11, 3], gen, table_scorer(table), t0=5)
    assert result.chosen_seed == 3


def test_select_seed_failure_handling():
    table = {("p", 1): 0.1, ("p", 2): 0.8}
    gen = StubGenerator(table, fail_seeds=[1])
    result = select_seed("p", [1, 2], gen, table_scorer(table), t0=5)
    assert result.chosen_seed == 2
    assert len(result.warnings) == 1 and "seed 1" in result.warnings[0]
    gen_all_fail = StubGenerator(table, fail_seeds=[1, 2])
    with pytest.raises(GenerationError):
        select_seed("p", [1, 2], gen_all_fail, table_scorer(table), t0=5)


def test_select_seed_validation():
    gen = StubGenerator({("p", 1): 0.5})
    with pytest.raises(ValueError, match="distinct"):
        select_seed("p", [1, 1], gen, lambda s: 0.0, t0=5)
    with pytest.raises(ValueError, match="t0"):
        select_seed("p", [1], gen, lambda s: 0.0, t0=11)  # > T/2
    with pytest.raises(ValueError, match="at least one"):
        select_seed("p", [], gen, lambda s: 0.0, t0=5)


def test_select_seed_ledger():
    table = {("p", s): s / 10 for s in range(10)}
    gen = StubGenerator(table)
    result = select_seed("p", list(range(10)), gen, table_scorer(table), t0=5,
                         cost_model=CostModel.paper_default())
    assert result.ledger.total_latency == pytest.approx(42.62)
    counts = {e.label.split(" (")[0]: e.count for e in result.ledger.entries}
    assert counts == {"full generation": 1, "partial trajectory": 10, "probe prediction": 10}


@settings(max_examples=60, deadline=None)
@given(
    raw=st.lists(st.integers(-50, 50), min_size=2, max_size=8, unique=True),
    scale=st.floats(0.1, 3.0),
    shift=st.floats(-10, 10),
)
def test_select_seed_invariant_under_monotone_transform(raw, scale, shift):
    scores = [v / 10 for v in raw]  # spaced values survive exp without tie collapse
    seeds = list(range(len(scores)))
    table = {("p", s): q for s, q in zip(seeds, scores)}
    gen = StubGenerator(table)
    base = select_seed("p", seeds, gen, table_scorer(table), t0=5)
    warped = {k: np.exp(scale * v) + shift for k, v in table.items()}
    gen2 = StubGenerator(table)
    transformed = select_seed("p", seeds, gen2, table_scorer(warped), t0=5)
    assert base.chosen_seed == transformed.chosen_seed


def test_perfect_probe_reaches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        seeds = list(range(6))
        table = {("p", s): float(rng.uniform()) for s in seeds}
        gen = StubGenerator(table)
        result = select_seed("p", seeds, gen, table_scorer(table), t0=5)
        assert result.realized_quality == max(table.values())


# ------------------------------------------------------------------- gate


def test_gate_below_threshold_rewrites():
    table = {("p", 0): 0.3, ("p:v0", 0): 0.6, ("p:v1", 0): 0.8,
             ("p:v2", 0): 0.1, ("p:v3", 0): 0.7}
    gen = StubGenerator(table)
    rewriter = lambda p, v: f"{p}:v{v}"  # noqa: E731
    decision = gate_prompt("p", gen, table_scorer(table), tau=0.5, rewriter=rewriter, seed=0)
    assert decision.action == "rewrite"
    assert decision.rewritten_prompt == "p:v1"  # best predicted of the 4 variants
    assert decision.variant_scores == (0.6, 0.8, 0.1, 0.7)
    assert decision.effective_prompt == "p:v1"


def test_gate_boundary_keeps():
    table = {("p", 0): 0.5}
    gen = StubGenerator(table)
    decision = gate_prompt("p", gen, table_scorer(table), tau=0.5,
                           rewriter=lambda p, v: p, seed=0)
    assert decision.action == "keep"
    assert decision.rewritten_prompt is None
    assert decision.effective_prompt == "p"


def test_gate_rewriter_failure_preserves_original():
    table = {("p", 0): 0.1}
    gen = StubGenerator(table)

    def broken(prompt, variant):
        raise RuntimeError("LLM on fire")

    decision = gate_prompt("p", gen, table_scorer(table), tau=0.5, rewriter=broken, seed=0)
    assert decision.action == "rewrite"
    assert decision.rewritten_prompt is None
    assert "LLM on fire" in decision.rewriter_error
    assert decision.effective_prompt == "p"


def test_gate_decision_invariant_enforced():
    with pytest.raises(ValueError):
        GateDecision("p", threshold=0.5, predicted=0.6, action="rewrite")
    with pytest.raises(ValueError):
        GateDecision("p", threshold=0.5, predicted=0.4, action="keep")


def test_gate_deterministic():
    table = {("p", 0): 0.3, ("p:v0", 0): 0.6, ("p:v1", 0): 0.2,
             ("p:v2", 0): 0.1, ("p:v3", 0): 0.0}
    rewriter = lambda p, v: f"{p}:v{v}"  # noqa: E731
    d1 = gate_prompt("p", StubGenerator(table), table_scorer(table), 0.5, rewriter, seed=0)
    d2 = gate_prompt("p", StubGenerator(table), table_scorer(table), 0.5, rewriter, seed=0)
    assert d1 == d2


# ------------------------------------------------------------ pair mining


def test_mine_pairs_example():
    recs = [MinedRecord("p", 1, 0.9), MinedRecord("p", 2, 0.1)]
    result = mine_pairs(recs, theta_pos=0.7, theta_neg=0.3)
    assert len(result.pairs) == 1
    pos, neg = result.pairs[0]
    assert (pos.seed, neg.seed) == (1, 2)
    assert result.diagnostic is None


def test_mine_pairs_discard_band():
    recs = [MinedRecord("p", i, 0.5) for i in range(5)]
    result = mine_pairs(recs, theta_pos=0.7, theta_neg=0.3)
    assert result.pairs == ()
    assert "no pairs" in result.diagnostic


def test_mine_pairs_same_prompt_only():
    recs = [MinedRecord("a", 1, 0.9), MinedRecord("b", 2, 0.1)]
    assert mine_pairs(recs, 0.7, 0.3).pairs == ()


def test_mine_pairs_deterministic_order():
    recs = [
        MinedRecord("b", 5, 0.9), MinedRecord("b", 1, 0.95), MinedRecord("b", 9, 0.05),
        MinedRecord("a", 3, 0.8), MinedRecord("a", 2, 0.2),
    ]
    result = mine_pairs(recs, 0.7, 0.3)
    order = [(p.prompt_id, p.seed, n.seed) for p, n in result.pairs]
    assert order == [("a", 3, 2), ("b", 1, 9), ("b", 5, 9)]


def test_mine_pairs_threshold_validation():
    with pytest.raises(ValueError):
        mine_pairs([], theta_pos=0.2, theta_neg=0.8)


@settings(max_examples=200, deadline=None)
@given(
    qhats=st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=20),
    t1=st.floats(0, 1),
    t2=st.floats(0, 1),
    n_prompts=st.integers(1, 4),
)
def test_pairset_invariants_random(qhats, t1, t2, n_prompts):
    theta_pos, theta_neg = max(t1, t2), min(t1, t2)
    recs = [
        MinedRecord(f"p{i % n_prompts}", i, q) for i, q in enumerate(qhats)
    ]
    result = mine_pairs(recs, theta_pos, theta_neg)
    ps = result.pair_set
    ps.validate()
    keys_pos = {(r.prompt_id, r.seed) for r in ps.positives}
    keys_neg = {(r.prompt_id, r.seed) for r in ps.negatives}
    assert not keys_pos & keys_neg
    assert all(r.qhat >= theta_pos for r in ps.positives)
    assert all(r.qhat <= theta_neg for r in ps.negatives)
    for pos, neg in result.pairs:
        assert pos.prompt_id == neg.prompt_id
        assert pos.qhat >= theta_pos >= theta_neg >= neg.qhat


def test_pairset_validate_rejects_violations():
    with pytest.raises(ValueError):
        PairSet((MinedRecord("p", 1, 0.5),), (), 0.7, 0.3).validate()
    with pytest.raises(ValueError):
        PairSet((MinedRecord("p", 1, 0.9),), (MinedRecord("p", 1, 0.9),), 0.9, 0.9).validate()


def test_pairs_jsonl_format(tmp_path):
    recs = [MinedRecord("p", 1, 0.9), MinedRecord("p", 2, 0.1)]
    result = mine_pairs(recs, 0.7, 0.3)
    path = tmp_path / "pairs.jsonl"
    write_pairs_jsonl(path, result)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows == [
        {"prompt_id": "p", "seed_pos": 1, "seed_neg": 2, "qhat_pos": 0.9, "qhat_neg": 0.1}
    ]


# -------------------------------------------------- effective-sample stats


def rec(prompt, seed, qhat, label):
    return MinedRecord(prompt, seed, qhat, label)


def test_effective_report_identity():
    batch = [rec("p", 1, 0.9, 0.8), rec("p", 2, 0.1, 0.2)]
    report = effective_sample_report(batch, batch, 0.7, 0.3)
    assert report.usable_ratio == pytest.approx(1.0)


def test_effective_report_variance_zero():
    batch = [rec("p", i, 0.5 + 0.4 * (i % 2), 0.6) for i in range(6)]
    report = effective_sample_report(batch, batch, 0.7, 0.3)
    assert report.filtered.label_variance == 0.0


def test_effective_report_midband_bulge():
    # unfiltered: 2 extremes + 8 mid-band records per prompt
    unfiltered = []
    for p in range(5):
        unfiltered.append(rec(f"p{p}", 0, 0.95, 0.9))
        unfiltered.append(rec(f"p{p}", 1, 0.05, 0.1))
        unfiltered += [rec(f"p{p}", 2 + i, 0.5, 0.5) for i in range(8)]
    filtered = [r for r in unfiltered if r.qhat >= 0.7 or r.qhat <= 0.3]
    report = effective_sample_report(filtered, unfiltered, 0.7, 0.3)
    # counting oracle: filtered is 10/10 usable, unfiltered 10/50
    assert report.filtered.usable_fraction == pytest.approx(1.0)
    assert report.unfiltered.usable_fraction == pytest.approx(0.2)
    assert report.usable_ratio == pytest.approx(5.0)
    assert report.filtered.frac_above_pos == pytest.approx(0.5)


def test_effective_report_requires_labels():
    with pytest.raises(ValueError, match="labeled"):
        effective_sample_report([rec("p", 1, 0.9, None)], [rec("p", 1, 0.9, 0.5)], 0.7, 0.3)
    with pytest.raises(ValueError, match="empty"):
        effective_sample_report([], [rec("p", 1, 0.9, 0.5)], 0.7, 0.3)


def test_default_thresholds():
    qhats = list(np.linspace(0, 1, 11))
    assert default_gate_threshold(qhats) == pytest.approx(0.5)
    pos, neg = default_pair_thresholds(qhats)
    assert pos == pytest.approx(0.7)
    assert neg == pytest.approx(0.3)
