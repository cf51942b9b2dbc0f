"""Session fixtures for the heavyweight acceptance runs.

The toy model, its labeled trajectory corpus, and the per-step probes are
trained once per session. Set ATTNPROBE_TEST_CACHE to a directory to reuse
them across sessions while iterating locally.
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from attnprobe.dataset import TrajectoryRecord
from attnprobe.probe import ProbeConfig, ProbeParams, load_checkpoint, save_checkpoint, train_probe
from attnprobe.seeding import rng_for
from attnprobe.stackio import normalize_stack
from attnprobe.testbed.scenes import sample_scene
from attnprobe.testbed.toy import (
    ToyDiffusionConfig,
    load_model,
    sample_trajectories,
    save_model,
    toy_train,
)

TOY_CONFIG = ToyDiffusionConfig(train_iters=3000, seed=0)
TOY_SCENES = 2048
TOY_PROBE_CONFIG = ProbeConfig(
    n_blocks=2, n_token_slots=16, height=16, width=16,
    widths=(16, 32), res_layers=2, epochs=20, seed=3,
)
CAPTURE_STEPS = (1, 5, 10)


def _cache_dir():
    path = os.environ.get("ATTNPROBE_TEST_CACHE")
    if not path:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _normalize(rec: TrajectoryRecord) -> TrajectoryRecord:
    return TrajectoryRecord(
        rec.prompt_id, rec.prompt_tokens, rec.prompt_text, rec.seed,
        rec.total_steps, rec.capture_step,
        tuple(normalize_stack(s) for s in rec.stacks),
        rec.final_image, rec.labels, rec.scene,
    )


@pytest.fixture(scope="session")
def toy_model():
    cache = _cache_dir()
    target = cache / "toy-model.atpw" if cache else None
    if target and target.exists():
        return load_model(target)
    scenes = [sample_scene(rng_for("toy-scenes", TOY_CONFIG.seed)) for _ in range(TOY_SCENES)]
    model, _ = toy_train(TOY_CONFIG, scenes)
    if target:
        save_model(model, target)
    return model


@pytest.fixture(scope="session")
def toy_corpus(toy_model):
    """800 labeled trajectories (400 prompts x 2 seeds), captures at 1/5/10."""
    rng = np.random.default_rng(31)
    prompts = [sample_scene(rng, n_objects=int(rng.integers(1, 5))) for _ in range(400)]
    jobs = [(p, int(rng.integers(0, 2**31))) for p in prompts for _ in range(2)]
    records = []
    for lo in range(0, len(jobs), 200):
        chunk = jobs[lo : lo + 200]
        records += sample_trajectories(
            toy_model, [c[0] for c in chunk], [c[1] for c in chunk],
            capture_steps=list(CAPTURE_STEPS),
        )
    records = [_normalize(r) for r in records]
    return records[:640], records[640:]


@pytest.fixture(scope="session")
def toy_probes(toy_corpus):
    """One trained probe per capture step."""
    cache = _cache_dir()
    train_recs, _ = toy_corpus
    probes: dict[int, ProbeParams] = {}
    for step in CAPTURE_STEPS:
        target = cache / f"toy-probe-{step}.atpw" if cache else None
        if target and target.exists():
            probes[step] = load_checkpoint(target)
            continue
        pairs = [(r.stack_at(step), r.labels[0]) for r in train_recs]
        params, _ = train_probe(pairs, TOY_PROBE_CONFIG)
        if target:
            save_checkpoint(params, target)
        probes[step] = params
    return probes


@pytest.fixture(scope="session")
def selection_corpus(toy_model):
    """100 prompts x 10 seeds, fully generated, stacks captured at step 5."""
    rng = np.random.default_rng(77)
    prompts = [sample_scene(rng, n_objects=int(rng.integers(2, 5))) for _ in range(100)]
    specs, seeds = [], []
    for p in prompts:
        specs += [p] * 10
        seeds += [int(rng.integers(0, 2**31)) for _ in range(10)]
    records = []
    for lo in range(0, len(specs), 200):
        records += sample_trajectories(
            toy_model, specs[lo : lo + 200], seeds[lo : lo + 200], capture_steps=[5]
        )
    return [_normalize(r) for r in records]
