"""Command-line entry point orchestrating the full pipeline.

Every subcommand reads option defaults from an INI run-config (section
named after the subcommand, e.g. ``[train-probe]``), lets flags override
them, writes its outputs under ``--out-dir``, and records a ``run.json``
provenance file (resolved options, their hash, seed, package version).
Exit codes: 0 success, 2 usage/missing input, 1 runtime failure (with a
one-line JSON error on stderr).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, metrics, probe, stats, workflows
from .seeding import rng_for
from .costing import CostModel, cost_guided, cost_naive, format_reference_table, reference_table, speedup
from .dataset import DatasetManifest, ManifestRecord, write_pgm
from .errors import AttnProbeError
from .stackio import normalize_stack, read_stack, write_stack
from .testbed import scenes, synthetic, toy


def _hash_options(options: dict) -> str:
    return hashlib.sha256(json.dumps(options, sort_keys=True).encode()).hexdigest()


def write_run_record(out_dir: Path, subcommand: str, options: dict, outputs: list[str]) -> None:
    record = {
        "subcommand": subcommand,
        "seed": options.get("seed"),
        "options": options,
        "config_hash": _hash_options(options),
        "outputs": sorted(outputs),
        "version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run.json", "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


class Options:
    """Flag > config-file > built-in default resolution for one subcommand."""

    def __init__(self, args: argparse.Namespace, section: str):
        self._args = vars(args)
        self._section = None
        config = self._args.get("config")
        if config:
            parser = configparser.ConfigParser()
            if not parser.read(config):
                raise FileNotFoundError(config)
            if parser.has_section(section):
                self._section = parser[section]
        self.resolved: dict = {}

    def get(self, name: str, default=None, cast=None):
        key = name.replace("-", "_")
        value = self._args.get(key)
        if value is None and self._section is not None and name in self._section:
            value = self._section.get(name)
        if value is None:
            value = default
        if value is not None and cast is not None:
            value = cast(value)
        self.resolved[name] = value
        return value

    def require(self, name: str, cast=None):
        value = self.get(name, cast=cast)
        if value is None:
            raise SystemExit(f"error: missing required option --{name}")
        return value


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).replace(",", " ").split()]


def _sample_prompt(seed: int, n_objects: int | None = None) -> scenes.SceneSpec:
    rng = rng_for("prompt", seed)
    return scenes.sample_scene(rng, n_objects=n_objects)


def _load_scorer(opts: Options):
    """Either a trained probe checkpoint or the dispersion baseline."""
    ckpt = opts.get("checkpoint")
    baseline = opts.get("baseline")
    if ckpt and baseline:
        raise SystemExit("error: give either --checkpoint or --baseline, not both")
    if ckpt:
        return probe.ProbeScorer(probe.load_checkpoint(ckpt)), f"probe:{ckpt}"
    if baseline:
        if baseline != "dispersion":
            raise SystemExit(f"error: unknown baseline {baseline!r}")
        return stats.dispersion_quality, "baseline:dispersion"
    raise SystemExit("error: a scorer is required (--checkpoint or --baseline dispersion)")


def _probe_config_for_dataset(manifest: DatasetManifest, records, opts: Options) -> probe.ProbeConfig:
    first = manifest.load_stack(records[0])
    return probe.ProbeConfig(
        n_blocks=first.n_blocks,
        n_token_slots=first.n_token_slots,
        height=first.spatial_shape[0],
        width=first.spatial_shape[1],
        widths=tuple(_int_list(opts.get("widths", "32,64,128"))),
        res_layers=opts.get("res-layers", 2, int),
        emb_dim=opts.get("emb-dim", 64, int),
        lr=opts.get("lr", 1e-3, float),
        batch_size=opts.get("batch-size", 32, int),
        epochs=opts.get("epochs", 30, int),
        seed=opts.get("seed", 0, int),
        oversample_factor=opts.get("oversample", 3, int),
        low_score_quantile=opts.get("low-quantile", 0.3, float),
    )


# ---------------------------------------------------------------- handlers


def cmd_gen_synth(args) -> tuple[dict, list[str]]:
    opts = Options(args, "gen-synth")
    out_dir = Path(opts.require("out-dir"))
    n = opts.require("n", int)
    manifest = synthetic.write_synthetic_dataset(
        out_dir,
        n,
        global_seed=opts.get("seed", 0, int),
        sigma_q=opts.get("sigma-q", 0.05, float),
        test_frac=opts.get("test-frac", 0.2, float),
        law=opts.get("law", "linear"),
        n_objects=(opts.get("min-objects", 1, int), opts.get("max-objects", 4, int)),
        n_blocks=opts.get("blocks", 2, int),
        n_token_slots=opts.get("slots", 16, int),
        map_size=opts.get("map-size", 16, int),
        step=opts.get("step", 5, int),
        total_steps=opts.get("total-steps", 25, int),
    )
    print(f"wrote {len(manifest.records)} synthetic records to {out_dir}")
    return opts.resolved, ["manifest.jsonl"]


def cmd_train_toy(args) -> tuple[dict, list[str]]:
    opts = Options(args, "train-toy")
    out_dir = Path(opts.require("out-dir"))
    seed = opts.get("seed", 0, int)
    config = toy.ToyDiffusionConfig(
        width=opts.get("width", 32, int),
        attn_layers=opts.get("attn-layers", 2, int),
        heads=opts.get("heads", 2, int),
        head_dim=opts.get("head-dim", 16, int),
        total_steps=opts.get("total-steps", 25, int),
        train_iters=opts.get("iters", 3000, int),
        batch_size=opts.get("batch-size", 32, int),
        lr=opts.get("lr", 2e-3, float),
        seed=seed,
    )
    n_scenes = opts.get("scenes", 512, int)
    rng = rng_for("toy-scenes", seed)
    dataset = [scenes.sample_scene(rng) for _ in range(n_scenes)]
    model, history = toy.toy_train(config, dataset, log_every=opts.get("log-every", 0, int))
    out_dir.mkdir(parents=True, exist_ok=True)
    toy.save_model(model, out_dir / "toy-model.atpw")
    with open(out_dir / "toy-history.json", "w") as f:
        json.dump({"loss": history}, f)
    print(f"trained toy model: first-100 loss {np.mean(history[:100]):.4f}, "
          f"last-100 loss {np.mean(history[-100:]):.4f}")
    return opts.resolved, ["toy-model.atpw", "toy-history.json"]


def cmd_gen_toy(args) -> tuple[dict, list[str]]:
    opts = Options(args, "gen-toy")
    out_dir = Path(opts.require("out-dir"))
    model = toy.load_model(opts.require("model"))
    seed = opts.get("seed", 0, int)
    n_prompts = opts.require("n-prompts", int)
    seeds_per = opts.get("seeds-per-prompt", 1, int)
    capture = _int_list(opts.get("capture-steps", "5"))
    test_frac = opts.get("test-frac", 0.2, float)
    chunk = opts.get("chunk", 128, int)
    n_objects_lo = opts.get("min-objects", 1, int)
    n_objects_hi = opts.get("max-objects", 4, int)

    (out_dir / "stacks").mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(exist_ok=True)
    jobs = []
    for i in range(n_prompts):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        spec = scenes.sample_scene(rng, n_objects=int(rng.integers(n_objects_lo, n_objects_hi + 1)))
        for j in range(seeds_per):
            record_seed = int(rng.integers(0, 2**31 - 1))
            jobs.append((i, j, spec, record_seed))

    n_test_prompts = int(round(n_prompts * test_frac))
    manifest = DatasetManifest(out_dir)
    for lo in range(0, len(jobs), chunk):
        batch = jobs[lo : lo + chunk]
        records = toy.sample_trajectories(
            model, [b[2] for b in batch], [b[3] for b in batch], capture_steps=capture
        )
        for (i, j, spec, record_seed), rec in zip(batch, records):
            pid = f"toy-{i:05d}-{j:02d}"
            image_rel = f"images/{pid}.pgm"
            write_pgm(out_dir / image_rel, rec.final_image)
            for stack in rec.stacks:
                norm = normalize_stack(stack)
                rel = f"stacks/{pid}-s{stack.step:03d}.atnp"
                write_stack(norm, out_dir / rel)
                manifest.append(
                    ManifestRecord(
                        path=rel,
                        prompt_id=pid,
                        prompt_tokens=list(rec.prompt_tokens),
                        prompt_text=rec.prompt_text,
                        seed=rec.seed,
                        step=stack.step,
                        total_steps=stack.total_steps,
                        block_ids=list(stack.block_ids),
                        n_real_tokens=stack.n_real_tokens(),
                        normalized=True,
                        labels=list(rec.labels),
                        split="test" if i < n_test_prompts else "train",
                        image=image_rel,
                        scene=rec.scene,
                    )
                )
    manifest.save()
    print(f"wrote {len(manifest.records)} toy records ({n_prompts} prompts x {seeds_per} seeds) to {out_dir}")
    return opts.resolved, ["manifest.jsonl"]


def cmd_train_probe(args) -> tuple[dict, list[str]]:
    opts = Options(args, "train-probe")
    out_dir = Path(opts.require("out-dir"))
    manifest = DatasetManifest.load(opts.require("dataset"))
    step = opts.get("step", 5, int)
    metric = opts.get("metric")
    rows = manifest.select(split="train", step=step)
    if not rows:
        raise SystemExit(f"error: dataset has no train records at step {step}")
    config = _probe_config_for_dataset(manifest, rows, opts)
    pairs = []
    for row in rows:
        stack = manifest.load_stack(row)
        value = next(
            lab.value for lab in row.labels if metric is None or lab.metric_name == metric
        )
        pairs.append((stack, value))
    params, history = probe.train_probe(pairs, config, log_every=opts.get("log-every", 0, int))
    out_dir.mkdir(parents=True, exist_ok=True)
    name = opts.get("name", f"probe-step{step}")
    probe.save_checkpoint(params, out_dir / f"{name}.atpw")
    with open(out_dir / f"{name}-history.json", "w") as f:
        json.dump({"mse": history}, f)
    print(f"trained probe on {len(pairs)} records at step {step}: "
          f"epoch-0 mse {history[0]:.5f} -> final {history[-1]:.5f}")
    return opts.resolved, [f"{name}.atpw", f"{name}-history.json"]


def cmd_eval(args) -> tuple[dict, list[str]]:
    opts = Options(args, "eval")
    out_dir = Path(opts.require("out-dir"))
    manifest = DatasetManifest.load(opts.require("dataset"))
    step = opts.get("step", 5, int)
    split = opts.get("split", "test")
    scorer, scorer_name = _load_scorer(opts)
    records = [manifest.load_record(r) for r in manifest.select(split=split, step=step)]
    if not records:
        raise SystemExit(f"error: no {split} records at step {step}")
    report = metrics.evaluate_probe(scorer, records, step, metric_name=opts.get("metric"))
    payload = dict(report.to_json(), scorer=scorer_name, split=split, step=step)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    outputs = ["eval.json"]
    table = opts.get("table")
    if table:
        table_path = Path(table)
        new = not table_path.exists()
        with open(table_path, "a") as f:
            if new:
                f.write("step\tsrcc\tktc\tpcc\tauc_roc\tn\tscorer\n")
            f.write(
                f"{step}\t{report.srcc:.6f}\t{report.ktc:.6f}\t{report.pcc:.6f}"
                f"\t{report.auc_roc:.6f}\t{report.n}\t{scorer_name}\n"
            )
        outputs.append(str(table_path))
    print(json.dumps(payload, sort_keys=True))
    return opts.resolved, outputs


def cmd_stats(args) -> tuple[dict, list[str]]:
    opts = Options(args, "stats")
    stack = read_stack(opts.require("stack"))
    if not stack.normalized:
        stack = normalize_stack(stack)
    peak_k = opts.get("peak-k", 4, int)
    tau = opts.get("threshold", 0.5, float)
    token = opts.get("token", None, int)
    slots = [token] if token is not None else [int(i) for i in np.flatnonzero(stack.token_mask)]
    rows = []
    for blk in range(stack.n_blocks):
        for slot in slots:
            m = stack.maps[blk, slot]
            rows.append(
                {
                    "block": stack.block_ids[blk],
                    "token_slot": slot,
                    "entropy": stats.spatial_entropy(m),
                    "peak_mass": stats.peak_mass(m, peak_k),
                    "fragmentation": stats.fragmentation(m, tau),
                }
            )
    summary = {"dispersion_score": stats.dispersion_score(stack), "per_token": rows}
    print(json.dumps(summary, sort_keys=True))
    outputs = []
    out_dir = opts.get("out-dir")
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "stats.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
        outputs.append("stats.json")
    return opts.resolved, outputs


def cmd_select_seed(args) -> tuple[dict, list[str]]:
    opts = Options(args, "select-seed")
    out_dir = Path(opts.require("out-dir"))
    model = toy.load_model(opts.require("model"))
    scorer, scorer_name = _load_scorer(opts)
    n_seeds = opts.get("n-seeds", 10, int)
    t0 = opts.get("t0", 5, int)
    prompt = _sample_prompt(opts.get("prompt-seed", 0, int), opts.get("n-objects", None, int))
    generator = toy.ToyGenerator(model)
    result = workflows.select_seed(
        prompt, list(range(n_seeds)), generator, scorer, t0, cost_model=CostModel.paper_default()
    )
    naive = cost_naive(n_seeds, CostModel.paper_default())
    payload = {
        "prompt": prompt.text(),
        "scorer": scorer_name,
        "candidates": [{"seed": s, "predicted": q} for s, q in result.candidates],
        "chosen_seed": result.chosen_seed,
        "predicted_score": result.predicted_score,
        "realized_quality": result.realized_quality,
        "warnings": list(result.warnings),
        "ledger": result.ledger.to_json(),
        "naive_latency": naive.total_latency,
        "speedup": speedup(naive, result.ledger),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "selection.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps({k: payload[k] for k in ("chosen_seed", "predicted_score", "realized_quality", "speedup")}))
    return opts.resolved, ["selection.json"]


def cmd_gate(args) -> tuple[dict, list[str]]:
    opts = Options(args, "gate")
    out_dir = Path(opts.require("out-dir"))
    model = toy.load_model(opts.require("model"))
    scorer, scorer_name = _load_scorer(opts)
    tau = opts.require("tau", float)
    seed = opts.get("seed", 0, int)
    t0 = opts.get("t0", 5, int)
    prompt = _sample_prompt(opts.get("prompt-seed", 0, int), opts.get("n-objects", None, int))
    generator = toy.ToyGenerator(model)
    rewriter = lambda p, variant: scenes.respread_scene(p, variant, seed)  # noqa: E731
    decision = workflows.gate_prompt(
        prompt, generator, scorer, tau, rewriter,
        seed=seed, t0=t0, n_variants=opts.get("variants", 4, int),
    )
    payload = {
        "prompt": prompt.text(),
        "scorer": scorer_name,
        "tau": tau,
        "predicted": decision.predicted,
        "action": decision.action,
        "rewritten": decision.rewritten_prompt.text() if decision.rewritten_prompt else None,
        "variant_scores": list(decision.variant_scores),
        "rewriter_error": decision.rewriter_error,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "gate.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps({k: payload[k] for k in ("predicted", "action", "rewritten")}))
    return opts.resolved, ["gate.json"]


def cmd_mine_pairs(args) -> tuple[dict, list[str]]:
    opts = Options(args, "mine-pairs")
    out_dir = Path(opts.require("out-dir"))
    manifest = DatasetManifest.load(opts.require("dataset"))
    step = opts.get("step", 5, int)
    split = opts.get("split", "train")
    scorer, scorer_name = _load_scorer(opts)
    rows = manifest.select(split=split, step=step)
    if not rows:
        raise SystemExit(f"error: no {split} records at step {step}")
    stacks = [manifest.load_stack(r) for r in rows]
    if hasattr(scorer, "score_batch"):
        qhats = scorer.score_batch(stacks)
    else:
        qhats = [scorer(s) for s in stacks]
    mined = [
        workflows.MinedRecord(r.prompt_id, r.seed, float(q), r.labels[0].value if r.labels else None)
        for r, q in zip(rows, qhats)
    ]
    theta_pos = opts.get("theta-pos", None, float)
    theta_neg = opts.get("theta-neg", None, float)
    if theta_pos is None or theta_neg is None:
        dp, dn = workflows.default_pair_thresholds([m.qhat for m in mined])
        theta_pos = dp if theta_pos is None else theta_pos
        theta_neg = dn if theta_neg is None else theta_neg
    result = workflows.mine_pairs(mined, theta_pos, theta_neg)
    out_dir.mkdir(parents=True, exist_ok=True)
    workflows.write_pairs_jsonl(out_dir / "pairs.jsonl", result)
    filtered = list(result.pair_set.positives + result.pair_set.negatives)
    payload = {
        "scorer": scorer_name,
        "theta_pos": theta_pos,
        "theta_neg": theta_neg,
        "n_records": len(mined),
        "n_positive": len(result.pair_set.positives),
        "n_negative": len(result.pair_set.negatives),
        "n_pairs": len(result.pairs),
        "diagnostic": result.diagnostic,
    }
    if filtered and all(m.label is not None for m in mined):
        report = workflows.effective_sample_report(filtered, mined, theta_pos, theta_neg)
        payload["effective_samples"] = report.to_json()
    with open(out_dir / "mining.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps({k: payload[k] for k in ("n_positive", "n_negative", "n_pairs")}))
    return opts.resolved, ["pairs.jsonl", "mining.json"]


def cmd_cost(args) -> tuple[dict, list[str]]:
    opts = Options(args, "cost")
    out_dir = Path(opts.require("out-dir"))
    cost_config = opts.get("cost-config")
    model = CostModel.from_config(cost_config) if cost_config else CostModel.paper_default()
    n = opts.get("candidates", 10, int)
    t0 = opts.get("t0", 5, int)
    naive = cost_naive(n, model)
    guided = cost_guided(n, t0, model)
    rows = reference_table(model)
    print(naive.format_table())
    print()
    print(guided.format_table())
    print(f"\nspeedup: {speedup(naive, guided):.4f}x\n")
    print(format_reference_table(rows))
    payload = {
        "naive": naive.to_json(),
        "guided": guided.to_json(),
        "speedup": speedup(naive, guided),
        "reference_table": rows,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "cost.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return opts.resolved, ["cost.json"]


def cmd_export_heatmaps(args) -> tuple[dict, list[str]]:
    opts = Options(args, "export-heatmaps")
    out_dir = Path(opts.require("out-dir"))
    stack_path = opts.require("stack")
    stack = read_stack(stack_path)
    token = opts.require("token", int)
    if not 0 <= token < stack.n_token_slots:
        raise SystemExit(f"error: token slot {token} outside [0, {stack.n_token_slots})")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(stack_path).stem
    outputs = []
    for blk in range(stack.n_blocks):
        m = stack.maps[blk, token].astype(np.float64)
        peak = m.max()
        img = m / peak if peak > 0 else m
        rel = f"{stem}-block{stack.block_ids[blk]:03d}-token{token:02d}.pgm"
        write_pgm(out_dir / rel, img)
        outputs.append(rel)
    print(f"wrote {len(outputs)} heatmaps to {out_dir}")
    return opts.resolved, outputs


HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "gen-toy": cmd_gen_toy,
    "train-toy": cmd_train_toy,
    "train-probe": cmd_train_probe,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "select-seed": cmd_select_seed,
    "gate": cmd_gate,
    "mine-pairs": cmd_mine_pairs,
    "cost": cmd_cost,
    "export-heatmaps": cmd_export_heatmaps,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnprobe",
        description="Early-attention quality probing toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, *specs, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="INI run-config file")
        p.add_argument("--seed", type=int, help="global random seed (default 0)")
        p.add_argument("--out-dir", help="output directory")
        for spec in specs:
            p.add_argument(f"--{spec}")
        return p

    add("gen-synth", "n", "sigma-q", "test-frac", "law", "min-objects", "max-objects",
        "blocks", "slots", "map-size", "step", "total-steps",
        help="generate a synthetic attention dataset")
    add("gen-toy", "model", "n-prompts", "seeds-per-prompt", "capture-steps",
        "test-frac", "chunk", "min-objects", "max-objects",
        help="sample labeled trajectories from a trained toy model")
    add("train-toy", "width", "attn-layers", "heads", "head-dim", "total-steps",
        "iters", "batch-size", "lr", "scenes", "log-every",
        help="train the toy conditional denoiser")
    add("train-probe", "dataset", "step", "metric", "widths", "res-layers", "emb-dim",
        "lr", "batch-size", "epochs", "oversample", "low-quantile", "name", "log-every",
        help="train the quality probe on a dataset")
    add("eval", "dataset", "checkpoint", "baseline", "step", "split", "metric", "table",
        help="evaluate a scorer: SRCC/KTC/PCC/AUC-ROC")
    add("stats", "stack", "token", "peak-k", "threshold",
        help="per-token dispersion statistics of a stack")
    add("select-seed", "model", "checkpoint", "baseline", "n-seeds", "t0",
        "prompt-seed", "n-objects",
        help="probe-guided best-of-N seed selection")
    add("gate", "model", "checkpoint", "baseline", "tau", "t0", "prompt-seed",
        "n-objects", "variants",
        help="prompt gating with the deterministic rewriter stub")
    add("mine-pairs", "dataset", "checkpoint", "baseline", "step", "split",
        "theta-pos", "theta-neg",
        help="mine preference pairs and report effective-sample stats")
    add("cost", "candidates", "t0", "cost-config",
        help="naive-vs-guided cost ledgers and the reference table")
    add("export-heatmaps", "stack", "token",
        help="export per-block heatmaps of one token as PGM images")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        options, outputs = HANDLERS[args.command](args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(json.dumps({"error": "usage", "message": exc.code}), file=sys.stderr)
            return 2
        raise
    except FileNotFoundError as exc:
        print(json.dumps({"error": "missing-input", "message": str(exc)}), file=sys.stderr)
        return 2
    except (AttnProbeError, ValueError, KeyError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    out_dir = options.get("out-dir")
    if out_dir:
        write_run_record(Path(out_dir), args.command, options, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
