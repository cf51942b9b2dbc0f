import numpy as np
import pytest

from attnprobe.testbed.scenes import sample_scene
from attnprobe.testbed.toy import (
    ToyDiffusionConfig,
    ToyGenerator,
    ToyModel,
    cosine_schedule,
    denoiser_backward,
    denoiser_forward,
    encode_scenes,
    init_params,
    load_model,
    sample_trajectories,
    save_model,
    toy_sample,
    toy_train,
)

TINY = ToyDiffusionConfig(width=6, attn_layers=2, heads=2, head_dim=3, token_dim=5,
                          emb_dim=4, canvas=8, n_token_slots=3, total_steps=5,
                          train_iters=40, batch_size=8, seed=0)


@pytest.fixture(scope="module")
def tiny_model():
    rng = np.random.default_rng(1)
    tensors = init_params(TINY, rng, dtype=np.float32)
    # randomize the zero-initialized output so sampling paths are exercised
    tensors["out.conv.w"] = (0.2 * rng.standard_normal(tensors["out.conv.w"].shape)).astype(np.float32)
    return ToyModel(TINY, tensors)


@pytest.fixture(scope="module")
def tiny_scene():
    rng = np.random.default_rng(2)
    return sample_scene(rng, n_objects=2, height=8, width=8, radius_range=(1.5, 2.0))


def test_schedule_shape_and_monotonicity():
    abar, beta = cosine_schedule(25)
    assert abar[0] == pytest.approx(1.0)
    assert all(a > b for a, b in zip(abar, abar[1:]))
    assert abar[-1] > 0
    assert (beta[1:] > 0).all() and (beta[1:] <= 0.999).all()


def test_config_validation():
    with pytest.raises(ValueError):
        ToyDiffusionConfig(total_steps=1)
    with pytest.raises(ValueError):
        ToyDiffusionConfig(canvas=9)
    with pytest.raises(ValueError):
        ToyDiffusionConfig(parameterization="v")
    assert ToyDiffusionConfig().total_steps == 25


def test_sample_determinism(tiny_model, tiny_scene):
    a = toy_sample(tiny_model, tiny_scene, seed=9, capture_steps=[1, 3])
    b = toy_sample(tiny_model, tiny_scene, seed=9, capture_steps=[1, 3])
    assert np.array_equal(a.final_image, b.final_image)
    for sa, sb in zip(a.stacks, b.stacks):
        assert sa.maps.tobytes() == sb.maps.tobytes()
    c = toy_sample(tiny_model, tiny_scene, seed=10, capture_steps=[1])
    assert not np.array_equal(a.final_image, c.final_image)


def test_capture_grid(tiny_model, tiny_scene):
    rec = toy_sample(tiny_model, tiny_scene, seed=3, total_steps=25, capture_steps=[1, 5, 10, 15])
    assert [s.step for s in rec.stacks] == [1, 5, 10, 15]
    assert all(s.total_steps == 25 for s in rec.stacks)


def test_empty_capture_gives_image_only(tiny_model, tiny_scene):
    rec = toy_sample(tiny_model, tiny_scene, seed=3)
    assert rec.stacks == ()
    assert rec.final_image is not None
    assert rec.labels[0].metric_name == "programmatic"
    rec.validate()


def test_capture_step_out_of_range(tiny_model, tiny_scene):
    with pytest.raises(ValueError, match="capture steps"):
        toy_sample(tiny_model, tiny_scene, seed=3, capture_steps=[99])


def test_captured_stacks_satisfy_invariants(tiny_model, tiny_scene):
    rec = toy_sample(tiny_model, tiny_scene, seed=5, capture_steps=[2, 4])
    for stack in rec.stacks:
        stack.validate()
        assert stack.maps[:, ~stack.token_mask].max() == 0.0  # padded slots empty
        assert stack.n_blocks == TINY.attn_layers
        # post-softmax: at each position the mass over real tokens is 1
        sums = stack.maps.sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-5)


def test_partial_equals_full_prefix(tiny_model, tiny_scene):
    full = toy_sample(tiny_model, tiny_scene, seed=11, capture_steps=[2])
    part = sample_trajectories(tiny_model, [tiny_scene], [11], capture_steps=[2],
                               stop_after=2)[0]
    assert part.final_image is None and part.labels == ()
    assert np.array_equal(part.stacks[0].maps, full.stacks[0].maps)


def test_gradients_match_finite_differences(tiny_scene):
    rng = np.random.default_rng(4)
    tensors = init_params(TINY, rng, dtype=np.float64)
    tensors["out.conv.w"] = 0.2 * rng.standard_normal(tensors["out.conv.w"].shape)
    ids, geo, mask = encode_scenes([tiny_scene], TINY)
    x = rng.standard_normal((1, 1, 8, 8))
    t_frac = np.array([0.4])
    target = rng.standard_normal((1, 1, 8, 8))

    def loss(t):
        out, _, _ = denoiser_forward(t, TINY, x, t_frac, ids, geo, mask)
        return float(((out - target) ** 2).mean())

    out, cache, _ = denoiser_forward(tensors, TINY, x, t_frac, ids, geo, mask, want_cache=True)
    grads = denoiser_backward(tensors, TINY, cache, (2.0 / out.size) * (out - target))
    rng2 = np.random.default_rng(7)
    eps = 1e-6
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in rng2.choice(flat.size, size=min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            fp = loss(tensors)
            flat[i] = old - eps
            fm = loss(tensors)
            flat[i] = old
            fd = (fp - fm) / (2 * eps)
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-4)
            assert rel < 1e-3, f"{name}[{i}]"


def test_training_decreases_loss_and_is_deterministic():
    rng = np.random.default_rng(5)
    scenes = [sample_scene(rng, n_objects=1, height=8, width=8, radius_range=(1.5, 2.0))
              for _ in range(16)]
    model1, hist1 = toy_train(TINY, scenes)
    model2, hist2 = toy_train(TINY, scenes)
    assert np.mean(hist1[-10:]) < np.mean(hist1[:10])
    assert hist1 == hist2
    assert all(np.array_equal(model1.tensors[k], model2.tensors[k]) for k in model1.tensors)


def test_training_rejects_empty_dataset():
    with pytest.raises(ValueError):
        toy_train(TINY, [])


def test_model_roundtrip(tmp_path, tiny_model, tiny_scene):
    path = tmp_path / "toy.atpw"
    save_model(tiny_model, path)
    back = load_model(path)
    a = toy_sample(tiny_model, tiny_scene, seed=8)
    b = toy_sample(back, tiny_scene, seed=8)
    assert np.array_equal(a.final_image, b.final_image)


def test_generator_adapter(tiny_model, tiny_scene):
    gen = ToyGenerator(tiny_model)
    assert gen.total_steps == TINY.total_steps
    partial = gen.partial(tiny_scene, seed=3, t0=2)
    assert partial.stacks[0].normalized
    partial.stacks[0].validate()
    batch = gen.partial_batch(tiny_scene, [3, 4], 2)
    # batching changes BLAS reduction shapes; per-record noise is identical
    np.testing.assert_allclose(batch[0].stacks[0].maps, partial.stacks[0].maps,
                               rtol=1e-4, atol=1e-6)
    full = gen.full(tiny_scene, seed=3)
    assert full.final_image is not None
    assert 0.0 <= full.label_value() <= 1.0


def test_flops_estimate_positive(tiny_model):
    assert tiny_model.denoiser_flops() > 0
