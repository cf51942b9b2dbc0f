"""Analytical FLOPS/latency ledgers for naive vs probe-guided workflows.

The default model is calibrated against the published cost table of the
target deployment: a full 25-step generation at 1877.56 TFLOPS / 14.70 s,
a probe prediction at 0.0036 TFLOPS / 0.05 s, and a 5-step partial
trajectory solved from the guided 10-seed row (42.62 s total). A k-step
partial costs ``intercept + k * per_step``; the intercept calibrates
negative (a partial run skips fixed per-generation stages such as decode),
and partial costs are clamped at zero.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

# Published reference cells (flops are TFLOPS, latency seconds).
PAPER_FULL_FLOPS = 1877.56
PAPER_FULL_LATENCY = 14.70
PAPER_PRED_FLOPS = 0.0036
PAPER_PRED_LATENCY = 0.05
PAPER_GUIDED10_FLOPS = 5280.43
PAPER_GUIDED10_LATENCY = 42.62
PAPER_NAIVE10_FLOPS = 18775.60
PAPER_NAIVE10_LATENCY = 147.00
PAPER_NAIVE4_LATENCY_PRINTED = 58.00  # inconsistent with 4 x 14.70 = 58.80
PAPER_GUIDED4_FLOPS_PRINTED = 3026.42
PAPER_GUIDED4_LATENCY_PRINTED = 28.29
PAPER_SPEEDUP_10 = 3.45
PAPER_SPEEDUP_4 = 2.05
PAPER_TOTAL_STEPS = 25
PAPER_PARTIAL_STEPS = 5


@dataclass(frozen=True)
class CostModel:
    full_gen_flops: float
    full_gen_latency: float
    per_step_flops: float
    per_step_latency: float
    intercept_flops: float
    intercept_latency: float
    probe_pred_flops: float
    probe_pred_latency: float
    total_steps: int = PAPER_TOTAL_STEPS

    def __post_init__(self):
        for name in ("full_gen_flops", "full_gen_latency", "per_step_flops",
                     "per_step_latency", "probe_pred_flops", "probe_pred_latency"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        for reconstructed, full in (
            (self.intercept_flops + self.total_steps * self.per_step_flops, self.full_gen_flops),
            (self.intercept_latency + self.total_steps * self.per_step_latency, self.full_gen_latency),
        ):
            if full > 0 and abs(reconstructed - full) > 0.01 * full:
                raise ValueError("intercept + T*per_step must match full cost within 1%")

    def partial_cost(self, steps: int) -> tuple[float, float]:
        """(flops, latency) of a ``steps``-step partial trajectory."""
        if not 0 <= steps <= self.total_steps:
            raise ValueError(f"partial steps {steps} outside [0, {self.total_steps}]")
        return (
            max(0.0, self.intercept_flops + steps * self.per_step_flops),
            max(0.0, self.intercept_latency + steps * self.per_step_latency),
        )

    @classmethod
    def calibrate(
        cls,
        full_flops: float,
        full_latency: float,
        pred_flops: float,
        pred_latency: float,
        total_steps: int,
        anchor_steps: int,
        anchor_partial_flops: float,
        anchor_partial_latency: float,
    ) -> "CostModel":
        """Affine partial-cost model through (anchor_steps, anchor) and (T, full)."""
        sf = (full_flops - anchor_partial_flops) / (total_steps - anchor_steps)
        sl = (full_latency - anchor_partial_latency) / (total_steps - anchor_steps)
        return cls(
            full_gen_flops=full_flops,
            full_gen_latency=full_latency,
            per_step_flops=sf,
            per_step_latency=sl,
            intercept_flops=anchor_partial_flops - anchor_steps * sf,
            intercept_latency=anchor_partial_latency - anchor_steps * sl,
            probe_pred_flops=pred_flops,
            probe_pred_latency=pred_latency,
            total_steps=total_steps,
        )

    @classmethod
    def paper_default(cls) -> "CostModel":
        """Calibrated so the guided 10-seed row reproduces 5280.43 / 42.62."""
        n = 10
        partial_flops = (PAPER_GUIDED10_FLOPS - PAPER_FULL_FLOPS - n * PAPER_PRED_FLOPS) / n
        partial_latency = (PAPER_GUIDED10_LATENCY - PAPER_FULL_LATENCY - n * PAPER_PRED_LATENCY) / n
        return cls.calibrate(
            PAPER_FULL_FLOPS,
            PAPER_FULL_LATENCY,
            PAPER_PRED_FLOPS,
            PAPER_PRED_LATENCY,
            PAPER_TOTAL_STEPS,
            PAPER_PARTIAL_STEPS,
            partial_flops,
            partial_latency,
        )

    def to_ini_dict(self) -> dict[str, str]:
        return {
            "full_gen_flops": repr(self.full_gen_flops),
            "full_gen_latency": repr(self.full_gen_latency),
            "per_step_flops": repr(self.per_step_flops),
            "per_step_latency": repr(self.per_step_latency),
            "intercept_flops": repr(self.intercept_flops),
            "intercept_latency": repr(self.intercept_latency),
            "probe_pred_flops": repr(self.probe_pred_flops),
            "probe_pred_latency": repr(self.probe_pred_latency),
            "total_steps": str(self.total_steps),
        }

    @classmethod
    def from_config(cls, path: str | Path, section: str = "cost") -> "CostModel":
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        sec = parser[section]
        return cls(
            full_gen_flops=sec.getfloat("full_gen_flops"),
            full_gen_latency=sec.getfloat("full_gen_latency"),
            per_step_flops=sec.getfloat("per_step_flops"),
            per_step_latency=sec.getfloat("per_step_latency"),
            intercept_flops=sec.getfloat("intercept_flops"),
            intercept_latency=sec.getfloat("intercept_latency"),
            probe_pred_flops=sec.getfloat("probe_pred_flops"),
            probe_pred_latency=sec.getfloat("probe_pred_latency"),
            total_steps=sec.getint("total_steps", fallback=PAPER_TOTAL_STEPS),
        )


@dataclass(frozen=True)
class LedgerEntry:
    label: str
    count: int
    unit_flops: float
    unit_latency: float

    @property
    def flops(self) -> float:
        return self.count * self.unit_flops

    @property
    def latency(self) -> float:
        return self.count * self.unit_latency


@dataclass(frozen=True)
class CostLedger:
    title: str
    entries: tuple[LedgerEntry, ...] = field(default_factory=tuple)

    @property
    def total_flops(self) -> float:
        return sum(e.flops for e in self.entries)

    @property
    def total_latency(self) -> float:
        return sum(e.latency for e in self.entries)

    def to_json(self) -> dict:
        return {
            "title": self.title,
            "entries": [
                {
                    "label": e.label,
                    "count": e.count,
                    "unit_flops": e.unit_flops,
                    "unit_latency": e.unit_latency,
                }
                for e in self.entries
            ],
            "total_flops": self.total_flops,
            "total_latency": self.total_latency,
        }

    def format_table(self) -> str:
        lines = [f"{self.title}", f"{'item':<28}{'count':>6}{'flops (T)':>14}{'latency (s)':>14}"]
        for e in self.entries:
            lines.append(f"{e.label:<28}{e.count:>6}{e.flops:>14.4f}{e.latency:>14.4f}")
        lines.append(f"{'total':<28}{'':>6}{self.total_flops:>14.4f}{self.total_latency:>14.4f}")
        return "\n".join(lines)


def cost_naive(n_candidates: int, model: CostModel) -> CostLedger:
    """Brute force: run the full generation for every candidate."""
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    return CostLedger(
        f"naive oversampling ({n_candidates} candidates)",
        (LedgerEntry("full generation", n_candidates, model.full_gen_flops, model.full_gen_latency),),
    )


def cost_guided(n_candidates: int, partial_steps: int, model: CostModel) -> CostLedger:
    """Probe-guided: n partials + n predictions + one full generation."""
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    pf, pl = model.partial_cost(partial_steps)
    return CostLedger(
        f"probe guided ({n_candidates} candidates, {partial_steps}-step partials)",
        (
            LedgerEntry("full generation", 1, model.full_gen_flops, model.full_gen_latency),
            LedgerEntry(f"partial trajectory ({partial_steps} steps)", n_candidates, pf, pl),
            LedgerEntry("probe prediction", n_candidates, model.probe_pred_flops, model.probe_pred_latency),
        ),
    )


def speedup(naive: CostLedger, guided: CostLedger) -> float:
    """Ratio of latency totals."""
    if guided.total_latency == 0:
        raise ValueError("guided latency total is zero")
    return naive.total_latency / guided.total_latency


def reference_table(model: CostModel | None = None) -> list[dict]:
    """Recompute the published cost-table cells and flag mismatches.

    The printed 4-candidate naive latency (58.00 s) disagrees with its own
    breakdown (4 x 14.70 = 58.80 s); our ledger reports the formula value
    and flags the cell. The guided prompt-optimization cells (3026.42 T /
    28.29 s) are not reachable by any affine partial-cost model consistent
    with the guided seed-selection row, so they are flagged the same way.
    """
    m = model if model is not None else CostModel.paper_default()
    t0 = PAPER_PARTIAL_STEPS

    def row(task, workflow, ledger, paper_flops, paper_latency):
        ours_f, ours_l = ledger.total_flops, ledger.total_latency
        return {
            "task": task,
            "workflow": workflow,
            "flops": ours_f,
            "latency": ours_l,
            "paper_flops": paper_flops,
            "paper_latency": paper_latency,
            "flops_within_tol": paper_flops is None or abs(ours_f - paper_flops) <= 0.005 * paper_flops,
            "latency_within_tol": paper_latency is None or abs(ours_l - paper_latency) <= 0.005 * paper_latency,
        }

    single = CostLedger("single", (LedgerEntry("full generation", 1, m.full_gen_flops, m.full_gen_latency),))
    single_pred = CostLedger(
        "single+pred",
        (
            LedgerEntry("full generation", 1, m.full_gen_flops, m.full_gen_latency),
            LedgerEntry("probe prediction", 1, m.probe_pred_flops, m.probe_pred_latency),
        ),
    )
    rows = [
        row("reference", "single generation", single, 1877.56, 14.70),
        row("reference", "single + 1 prediction", single_pred, 1877.57, 14.75),
        row("seed selection", "naive (10x full)", cost_naive(10, m), 18775.60, 147.00),
        row("seed selection", "guided (1 full + 10 pred)", cost_guided(10, t0, m), 5280.43, 42.62),
        row("prompt optimization", "naive (4x full)", cost_naive(4, m), 7510.25, 58.00),
        row("prompt optimization", "guided (1 full + 4 pred)", cost_guided(4, t0, m), 3026.42, 28.29),
    ]
    return rows


def format_reference_table(rows: list[dict]) -> str:
    header = (
        f"{'task':<22}{'workflow':<28}{'flops (T)':>12}{'latency (s)':>12}"
        f"{'published':>22}{'':>4}"
    )
    lines = [header]
    for r in rows:
        pub = f"{r['paper_flops']:.2f} / {r['paper_latency']:.2f}"
        flags = []
        if not r["flops_within_tol"]:
            flags.append("flops!")
        if not r["latency_within_tol"]:
            flags.append("latency!")
        mark = " ".join(flags) if flags else "ok"
        lines.append(
            f"{r['task']:<22}{r['workflow']:<28}{r['flops']:>12.2f}{r['latency']:>12.2f}"
            f"{pub:>22}  {mark}"
        )
    lines.append("cells marked '!' are published values inconsistent with their own breakdown")
    return "\n".join(lines)
