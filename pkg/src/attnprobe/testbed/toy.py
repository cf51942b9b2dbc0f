"""Tiny trainable conditional denoising model with real cross-attention.

A convolutional encoder-decoder over a 32x32 single-channel canvas,
conditioned on scene tokens through multi-head cross-attention at 16x16
feature resolution. Trained with the standard noise-prediction MSE under a
cosine schedule; sampled with ancestral steps. Attention probabilities are
captured post-softmax and head-averaged into AttentionStacks.

Gradients are hand-written (verified against finite differences in tests);
the heavy convolutions go through ``attnprobe.kernels``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import checkpoint, nn
from ..dataset import QualityLabel, TrajectoryRecord
from ..errors import CompatibilityError, TrainingError
from ..probe import _embed_fracs
from ..stackio import AttentionStack
from .scenes import TOKEN_IDS, VOCAB, SceneSpec, render_scene, score_image

CHECKPOINT_KIND = "toy-diffusion"
MAX_RADIUS = 8.0


@dataclass(frozen=True)
class ToyDiffusionConfig:
    width: int = 32
    attn_layers: int = 2
    heads: int = 2
    head_dim: int = 16
    token_dim: int = 32
    emb_dim: int = 64
    canvas: int = 32
    n_token_slots: int = 16
    patch: int = 2
    total_steps: int = 25
    train_iters: int = 2500
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    # "x0": network predicts the clean canvas (stable at this scale);
    # "eps": classic noise prediction (the implied SNR weighting starves
    # structure formation on sparse toy canvases)
    parameterization: str = "x0"
    # per-object drop probability for subset augmentation during training
    subset_dropout: float = 0.2
    # appearance ambiguity: targets jitter around the prompted nominal
    # placement/intensity, so the sampler's noise genuinely decides the
    # outcome (otherwise conditioning determines the image and every seed
    # renders identically)
    jitter_px: int = 2
    gain_range: tuple[float, float] = (0.7, 1.25)

    def __post_init__(self):
        if self.total_steps < 2:
            raise ValueError("need at least 2 sampling steps")
        if min(self.width, self.attn_layers, self.heads, self.head_dim,
               self.token_dim, self.emb_dim, self.canvas, self.n_token_slots) < 1:
            raise ValueError("all sizes must be positive")
        if self.canvas % self.patch:
            raise ValueError("canvas side must be divisible by the patch size")
        if self.parameterization not in ("x0", "eps"):
            raise ValueError("parameterization must be 'x0' or 'eps'")
        if not 0.0 <= self.subset_dropout < 1.0:
            raise ValueError("subset_dropout must lie in [0, 1)")

    @property
    def feat(self) -> int:
        return self.canvas // self.patch

    def to_json(self) -> dict:
        d = asdict(self)
        d["kind"] = CHECKPOINT_KIND
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ToyDiffusionConfig":
        d = dict(d)
        d.pop("kind", None)
        return cls(**d)

    def fingerprint(self) -> bytes:
        return checkpoint.config_fingerprint(self.to_json())


POS_FREQS = (1.0, 2.0, 4.0, 8.0)
POS_FEATURES = 4 * len(POS_FREQS)  # sin/cos x two axes


def position_features(ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Fourier features of normalized (y, x) in [0, 1]; shape [..., F].

    Shared between attention queries (image positions) and keys (token
    placements) so position matching generalizes off the training scenes.
    """
    parts = []
    for f in POS_FREQS:
        for axis in (ys, xs):
            ang = 2.0 * np.pi * f * axis
            parts.append(np.sin(ang))
            parts.append(np.cos(ang))
    return np.stack(parts, axis=-1)


def cosine_schedule(total_steps: int, s: float = 0.008):
    """DDPM cosine schedule; returns (alpha_bar[0..T], beta[1..T] at index t)."""
    t = np.arange(total_steps + 1, dtype=np.float64)
    f = np.cos((t / total_steps + s) / (1 + s) * np.pi / 2) ** 2
    abar = f / f[0]
    beta = np.empty(total_steps + 1)
    beta[0] = 0.0
    beta[1:] = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    return abar, beta


def param_shapes(cfg: ToyDiffusionConfig) -> dict[str, tuple[int, ...]]:
    w, td, hd = cfg.width, cfg.token_dim, cfg.heads * cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok.embed": (len(VOCAB), td),
        "tok.geo.w": (td, 3),
        "tok.geo.b": (td,),
        "temb.fc1.w": (w, cfg.emb_dim),
        "temb.fc1.b": (w,),
        "temb.fc2.w": (w, w),
        "temb.fc2.b": (w,),
        "stem.conv.w": (w, cfg.patch * cfg.patch + 2, 3, 3),  # +2 coordinate channels
        "stem.conv.b": (w,),
        "out.conv.w": (cfg.patch * cfg.patch, w, 3, 3),
        "out.conv.b": (cfg.patch * cfg.patch,),
    }
    for i in range(cfg.attn_layers):
        shapes[f"attn{i}.q.w"] = (hd, w)
        shapes[f"attn{i}.q.b"] = (hd,)
        shapes[f"attn{i}.qp.w"] = (hd, POS_FEATURES)
        shapes[f"attn{i}.k.w"] = (hd, td)
        shapes[f"attn{i}.k.b"] = (hd,)
        shapes[f"attn{i}.kp.w"] = (hd, POS_FEATURES)
        shapes[f"attn{i}.v.w"] = (hd, td)
        shapes[f"attn{i}.v.b"] = (hd,)
        shapes[f"attn{i}.o.w"] = (w, hd)
        shapes[f"attn{i}.o.b"] = (w,)
        shapes[f"attn{i}.res.conv1.w"] = (w, w, 3, 3)
        shapes[f"attn{i}.res.conv1.b"] = (w,)
        shapes[f"attn{i}.res.conv2.w"] = (w, w, 3, 3)
        shapes[f"attn{i}.res.conv2.b"] = (w,)
    return shapes


def init_params(cfg: ToyDiffusionConfig, rng: np.random.Generator, dtype=np.float32):
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or name == "out.conv.w":
            # zero-init output so the untrained denoiser predicts zero noise
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif name == "tok.embed":
            tensors[name] = (0.5 * rng.standard_normal(shape)).astype(dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return tensors


def coord_channels(b: int, feat: int, dtype) -> np.ndarray:
    """Normalized (y, x) grids; absolute position for placement-conditioned drawing."""
    yy, xx = np.mgrid[0:feat, 0:feat].astype(np.float64) / max(feat - 1, 1)
    grid = np.stack([yy, xx]).astype(dtype)
    return np.broadcast_to(grid[None], (b, 2, feat, feat))


def space_to_depth(x: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = x.shape
    return np.ascontiguousarray(
        x.reshape(b, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    ).reshape(b, c * r * r, h // r, w // r)


def depth_to_space(x: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = x.shape
    return np.ascontiguousarray(
        x.reshape(b, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    ).reshape(b, c // (r * r), h * r, w * r)


def encode_scenes(specs, cfg: ToyDiffusionConfig):
    """Token ids, geometry features and slot mask for a batch of scenes."""
    b = len(specs)
    s = cfg.n_token_slots
    ids = np.zeros((b, s), dtype=np.int64)
    geo = np.zeros((b, s, 3))
    mask = np.zeros((b, s), dtype=bool)
    for i, spec in enumerate(specs):
        if len(spec.objects) > s:
            raise ValueError(f"scene has {len(spec.objects)} objects > {s} token slots")
        for j, obj in enumerate(spec.objects):
            ids[i, j] = TOKEN_IDS[obj.token]
            geo[i, j] = (
                obj.cy / (spec.height - 1),
                obj.cx / (spec.width - 1),
                obj.radius / MAX_RADIUS,
            )
            mask[i, j] = True
    return ids, geo, mask


def denoiser_forward(tensors, cfg: ToyDiffusionConfig, x, t_frac, ids, geo, mask,
                     want_cache=False, capture_attention=False):
    """Noise prediction; returns (eps_hat, cache, attention list per layer)."""
    dt = x.dtype
    b = x.shape[0]
    n = cfg.feat * cfg.feat
    heads, hdim = cfg.heads, cfg.head_dim
    scale = 1.0 / float(np.sqrt(hdim))  # python float, keeps f32 paths f32

    e0 = _embed_fracs(np.asarray(t_frac, dtype=np.float64), cfg.emb_dim).astype(dt)
    u_pre = e0 @ tensors["temb.fc1.w"].T + tensors["temb.fc1.b"]
    u = nn.silu(u_pre)
    tb = u @ tensors["temb.fc2.w"].T + tensors["temb.fc2.b"]

    tok_raw = tensors["tok.embed"][ids] + geo.astype(dt) @ tensors["tok.geo.w"].T + tensors["tok.geo.b"]
    tok = tok_raw * mask[:, :, None]

    # shared positional basis for queries (grid cells) and keys (placements)
    grid = np.linspace(0.0, 1.0, cfg.feat)
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    qpos = position_features(gy.ravel(), gx.ravel()).astype(dt)  # [N, F]
    qpos_t = qpos.T
    tokpos = (position_features(geo[..., 0], geo[..., 1]).astype(dt) * mask[:, :, None])

    patches = np.concatenate(
        [space_to_depth(x, cfg.patch), coord_channels(b, cfg.feat, dt)], axis=1
    )
    s1 = nn.conv2d(patches, tensors["stem.conv.w"], tensors["stem.conv.b"], 1, 1)
    s1 = s1 + tb[:, :, None, None]
    h = nn.silu(s1)

    layers = []
    attention = []
    neg = np.asarray(-1e9, dtype=dt)
    for i in range(cfg.attn_layers):
        h_in = h
        hf = h_in.reshape(b, cfg.width, n)
        q_lin = (
            np.matmul(tensors[f"attn{i}.q.w"], hf)
            + tensors[f"attn{i}.q.b"][None, :, None]
            + (tensors[f"attn{i}.qp.w"] @ qpos_t)[None]
        )
        q = q_lin.reshape(b, heads, hdim, n).transpose(0, 1, 3, 2)
        k_lin = tok @ tensors[f"attn{i}.k.w"].T + tensors[f"attn{i}.k.b"] + tokpos @ tensors[f"attn{i}.kp.w"].T
        v_lin = tok @ tensors[f"attn{i}.v.w"].T + tensors[f"attn{i}.v.b"]
        k = k_lin.reshape(b, cfg.n_token_slots, heads, hdim).transpose(0, 2, 1, 3)
        v = v_lin.reshape(b, cfg.n_token_slots, heads, hdim).transpose(0, 2, 1, 3)
        logits = scale * (q @ k.transpose(0, 1, 3, 2))
        logits = np.where(mask[:, None, None, :], logits, neg)
        attn = nn.softmax_last(logits)
        ctx = attn @ v
        ctx_f = ctx.transpose(0, 1, 3, 2).reshape(b, heads * hdim, n)
        o = np.matmul(tensors[f"attn{i}.o.w"], ctx_f) + tensors[f"attn{i}.o.b"][None, :, None]
        h_mid = h_in + o.reshape(b, cfg.width, cfg.feat, cfg.feat)
        a1 = nn.silu(h_mid)
        c1 = nn.conv2d(a1, tensors[f"attn{i}.res.conv1.w"], tensors[f"attn{i}.res.conv1.b"], 1, 1)
        a2 = nn.silu(c1)
        c2 = nn.conv2d(a2, tensors[f"attn{i}.res.conv2.w"], tensors[f"attn{i}.res.conv2.b"], 1, 1)
        h = h_mid + c2
        if capture_attention:
            attention.append(attn.mean(axis=1))  # head-averaged [B, N, S]
        if want_cache:
            layers.append((h_in, hf, q, k, v, attn, ctx_f, h_mid, a1, c1, a2))

    out = nn.conv2d(h, tensors["out.conv.w"], tensors["out.conv.b"], 1, 1)
    eps_hat = depth_to_space(out, cfg.patch)

    cache = None
    if want_cache:
        cache = (patches, e0, u_pre, u, ids, geo.astype(dt), mask, tok,
                 qpos, tokpos, s1, layers, h)
    return eps_hat, cache, attention


def denoiser_backward(tensors, cfg: ToyDiffusionConfig, cache, g_eps):
    patches, e0, u_pre, u, ids, geo, mask, tok, qpos, tokpos, s1, layers, h_last = cache
    b = patches.shape[0]
    n = cfg.feat * cfg.feat
    heads, hdim = cfg.heads, cfg.head_dim
    scale = 1.0 / float(np.sqrt(hdim))
    grads: dict[str, np.ndarray] = {}

    g_out = space_to_depth(g_eps, cfg.patch)  # adjoint of depth_to_space
    gh, grads["out.conv.w"], grads["out.conv.b"] = nn.conv2d_grads(
        h_last, tensors["out.conv.w"], g_out, 1, 1
    )

    g_tok = np.zeros_like(tok)
    for i in reversed(range(cfg.attn_layers)):
        h_in, hf, q, k, v, attn, ctx_f, h_mid, a1, c1, a2 = layers[i]
        gc2 = gh
        ga2, grads[f"attn{i}.res.conv2.w"], grads[f"attn{i}.res.conv2.b"] = nn.conv2d_grads(
            a2, tensors[f"attn{i}.res.conv2.w"], gc2, 1, 1
        )
        gc1 = ga2 * nn.silu_grad(c1)
        ga1, grads[f"attn{i}.res.conv1.w"], grads[f"attn{i}.res.conv1.b"] = nn.conv2d_grads(
            a1, tensors[f"attn{i}.res.conv1.w"], gc1, 1, 1
        )
        gh_mid = gh + ga1 * nn.silu_grad(h_mid)

        go = gh_mid.reshape(b, cfg.width, n)
        g_ctx_f = np.matmul(tensors[f"attn{i}.o.w"].T, go)
        go_flat = go.transpose(1, 0, 2).reshape(cfg.width, -1)
        ctx_flat = ctx_f.transpose(1, 0, 2).reshape(heads * hdim, -1)
        grads[f"attn{i}.o.w"] = go_flat @ ctx_flat.T
        grads[f"attn{i}.o.b"] = go_flat.sum(axis=1)
        g_ctx = g_ctx_f.reshape(b, heads, hdim, n).transpose(0, 1, 3, 2)
        g_attn = g_ctx @ v.transpose(0, 1, 3, 2)
        gv = attn.transpose(0, 1, 3, 2) @ g_ctx
        g_logits = nn.softmax_last_grad(attn, g_attn)
        gq = scale * (g_logits @ k)
        gk = scale * (g_logits.transpose(0, 1, 3, 2) @ q)

        gk_lin = gk.transpose(0, 2, 1, 3).reshape(b, cfg.n_token_slots, heads * hdim)
        gv_lin = gv.transpose(0, 2, 1, 3).reshape(b, cfg.n_token_slots, heads * hdim)
        tok_flat = tok.reshape(-1, cfg.token_dim)
        grads[f"attn{i}.k.w"] = gk_lin.reshape(-1, heads * hdim).T @ tok_flat
        grads[f"attn{i}.k.b"] = gk_lin.sum(axis=(0, 1))
        grads[f"attn{i}.kp.w"] = gk_lin.reshape(-1, heads * hdim).T @ tokpos.reshape(-1, POS_FEATURES)
        grads[f"attn{i}.v.w"] = gv_lin.reshape(-1, heads * hdim).T @ tok_flat
        grads[f"attn{i}.v.b"] = gv_lin.sum(axis=(0, 1))
        g_tok += gk_lin @ tensors[f"attn{i}.k.w"] + gv_lin @ tensors[f"attn{i}.v.w"]

        gq_lin = gq.transpose(0, 1, 3, 2).reshape(b, heads * hdim, n)
        gq_flat = gq_lin.transpose(1, 0, 2).reshape(heads * hdim, -1)
        hf_flat = hf.transpose(1, 0, 2).reshape(cfg.width, -1)
        grads[f"attn{i}.q.w"] = gq_flat @ hf_flat.T
        grads[f"attn{i}.q.b"] = gq_flat.sum(axis=1)
        grads[f"attn{i}.qp.w"] = gq_lin.sum(axis=0) @ qpos
        ghf = np.matmul(tensors[f"attn{i}.q.w"].T, gq_lin)
        gh = gh_mid + ghf.reshape(b, cfg.width, cfg.feat, cfg.feat)

    gs1 = gh * nn.silu_grad(s1)
    gtb = gs1.sum(axis=(2, 3))
    _, grads["stem.conv.w"], grads["stem.conv.b"] = nn.conv2d_grads(
        patches, tensors["stem.conv.w"], gs1, 1, 1
    )

    gu = gtb @ tensors["temb.fc2.w"]
    grads["temb.fc2.w"] = gtb.T @ u
    grads["temb.fc2.b"] = gtb.sum(axis=0)
    gu_pre = gu * nn.silu_grad(u_pre)
    grads["temb.fc1.w"] = gu_pre.T @ e0
    grads["temb.fc1.b"] = gu_pre.sum(axis=0)

    g_tok_raw = g_tok * mask[:, :, None]
    g_embed = np.zeros_like(tensors["tok.embed"])
    np.add.at(g_embed, ids, g_tok_raw)
    grads["tok.embed"] = g_embed
    grads["tok.geo.w"] = g_tok_raw.reshape(-1, g_tok_raw.shape[2]).T @ geo.reshape(-1, 3)
    grads["tok.geo.b"] = g_tok_raw.sum(axis=(0, 1))
    return grads


@dataclass
class ToyModel:
    config: ToyDiffusionConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def denoiser_flops(self) -> float:
        """Analytic multiply-add count for one denoiser call, one sample."""
        c = self.config
        n, w, hd = c.feat * c.feat, c.width, c.heads * c.head_dim
        p2 = c.patch * c.patch
        flops = 9 * p2 * w * n  # patchified stem conv
        per_layer = n * w * hd + 2 * c.n_token_slots * c.token_dim * hd  # q, k, v
        per_layer += 2 * n * c.n_token_slots * hd  # scores + context
        per_layer += n * hd * w  # out proj
        per_layer += 2 * 9 * w * w * n  # residual convs
        flops += c.attn_layers * per_layer
        flops += 9 * w * p2 * n  # output conv before depth-to-space
        return 2.0 * flops  # MACs -> FLOPs


def _shift2d(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Zero-filled integer shift (roll would wrap objects across borders)."""
    out = np.zeros_like(img)
    h, w = img.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = img[ys_src, xs_src]
    return out


def toy_train(config: ToyDiffusionConfig, scenes, log_every: int = 0):
    """Train the denoiser on rendered scenes; returns (model, loss history).

    Every batch draws a random object subset per scene and composes the
    matching target from per-object layers, so the effective training set
    is combinatorial in the object count (blocks whole-scene memorization,
    forces per-token compositional rendering). Layers are jittered in
    position and intensity while the conditioning keeps nominal values,
    leaving genuine ambiguity for the sampling noise to resolve.
    """
    specs = list(scenes)
    if not specs:
        raise ValueError("empty scene dataset")
    layers = [
        np.stack([render_scene(SceneSpec((obj,), s.height, s.width)) for obj in s.objects])
        .astype(np.float32)
        for s in specs
    ]
    ids, geo, mask = encode_scenes(specs, config)

    abar, _ = cosine_schedule(config.total_steps)
    rng = np.random.default_rng(config.seed)
    tensors = init_params(config, rng, dtype=np.float32)
    state = nn.AdamState(tensors)
    history: list[float] = []
    bsz, s_slots = config.batch_size, config.n_token_slots
    jit = config.jitter_px
    for it in range(config.train_iters):
        idx = rng.integers(0, len(specs), size=bsz)
        x0 = np.full((bsz, 1, config.canvas, config.canvas), -1.0, dtype=np.float32)
        ids_b = np.zeros((bsz, s_slots), dtype=np.int64)
        geo_b = np.zeros((bsz, s_slots, 3))
        mask_b = np.zeros((bsz, s_slots), dtype=bool)
        for j, scene_i in enumerate(idx):
            n_obj = layers[scene_i].shape[0]
            keep = np.flatnonzero(rng.random(n_obj) >= config.subset_dropout)
            if keep.size:
                canvas = np.zeros(x0.shape[2:], dtype=np.float32)
                for li in keep:
                    layer = layers[scene_i][li]
                    if jit:
                        dy, dx = rng.integers(-jit, jit + 1, size=2)
                        layer = _shift2d(layer, int(dy), int(dx))
                    gain = rng.uniform(*config.gain_range)
                    np.maximum(canvas, np.clip(layer * gain, 0.0, 1.0), out=canvas)
                x0[j, 0] = canvas * 2.0 - 1.0
                ids_b[j, : keep.size] = ids[scene_i, keep]
                geo_b[j, : keep.size] = geo[scene_i, keep]
                mask_b[j, : keep.size] = True
        t = rng.integers(1, config.total_steps + 1, size=bsz)
        eps = rng.standard_normal((bsz, 1, config.canvas, config.canvas)).astype(np.float32)
        xt = (
            np.sqrt(abar[t])[:, None, None, None].astype(np.float32) * x0
            + np.sqrt(1.0 - abar[t])[:, None, None, None].astype(np.float32) * eps
        )
        out, cache, _ = denoiser_forward(
            tensors, config, xt, t / config.total_steps, ids_b, geo_b, mask_b,
            want_cache=True,
        )
        target = x0 if config.parameterization == "x0" else eps
        err = out - target
        loss = float((err * err).mean())
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {it}", iteration=it)
        grads = denoiser_backward(tensors, config, cache, (2.0 / err.size) * err)
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > 1.0:  # late-training spikes otherwise destabilize Adam
            for g in grads.values():
                g *= np.float32(1.0 / norm)
        nn.adam_step(tensors, grads, state, lr=config.lr)
        history.append(loss)
        if log_every and (it + 1) % log_every == 0:
            recent = float(np.mean(history[-log_every:]))
            print(f"iter {it + 1}/{config.train_iters}  mse={recent:.4f}")
    return ToyModel(config, tensors), history


def _prompt_id(spec: SceneSpec) -> str:
    import hashlib
    import json

    blob = json.dumps(spec.to_json(), sort_keys=True).encode()
    return "scene-" + hashlib.sha256(blob).hexdigest()[:12]


def sample_trajectories(
    model: ToyModel,
    specs,
    seeds,
    capture_steps=(),
    total_steps: int | None = None,
    score: bool = True,
    stop_after: int | None = None,
) -> list[TrajectoryRecord]:
    """Batched ancestral sampling with post-softmax attention capture.

    Record ``i`` draws all of its noise from ``seeds[i]`` alone, so results
    do not depend on how records are batched together. With ``stop_after``
    set, only that many denoising steps run (a partial trajectory: stacks
    but no final image).
    """
    cfg = model.config
    specs = list(specs)
    seeds = [int(s) for s in seeds]
    if len(specs) != len(seeds):
        raise ValueError("specs and seeds must align")
    t_total = int(total_steps) if total_steps is not None else cfg.total_steps
    capture_steps = sorted(int(s) for s in capture_steps)
    if capture_steps and not (1 <= capture_steps[0] and capture_steps[-1] <= t_total):
        raise ValueError(f"capture steps {capture_steps} outside [1, {t_total}]")
    last_step = t_total if stop_after is None else int(stop_after)
    if not 1 <= last_step <= t_total:
        raise ValueError(f"stop_after {stop_after} outside [1, {t_total}]")

    b = len(specs)
    ids, geo, mask = encode_scenes(specs, cfg)
    abar, beta = cosine_schedule(t_total)
    alpha = 1.0 - beta
    rngs = [np.random.default_rng(s) for s in seeds]
    x = np.stack([r.standard_normal((1, cfg.canvas, cfg.canvas)) for r in rngs]).astype(np.float32)

    captured: dict[int, list[np.ndarray]] = {}
    for k in range(1, last_step + 1):  # k-th denoising step, diffusion time t
        t = t_total - k + 1
        t_frac = np.full(b, t / t_total)
        out, _, attn = denoiser_forward(
            model.tensors, cfg, x, t_frac, ids, geo, mask,
            capture_attention=(k in capture_steps),
        )
        if k in capture_steps:
            captured[k] = attn
        # posterior over x_{t-1} through the clipped implied clean image;
        # without the clip the 1/sqrt(alpha) factor amplifies early errors
        if cfg.parameterization == "x0":
            x0_hat = out
        else:
            x0_hat = (x - np.sqrt(1.0 - abar[t]) * out) / np.sqrt(abar[t])
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
        c0 = np.sqrt(abar[t - 1]) * beta[t] / (1.0 - abar[t])
        ct = np.sqrt(alpha[t]) * (1.0 - abar[t - 1]) / (1.0 - abar[t])
        mean = c0 * x0_hat + ct * x
        if t > 1:
            var = (1.0 - abar[t - 1]) / (1.0 - abar[t]) * beta[t]
            z = np.stack([r.standard_normal((1, cfg.canvas, cfg.canvas)) for r in rngs])
            x = (mean + np.sqrt(var) * z).astype(np.float32)
        else:
            x = mean.astype(np.float32)

    finished = last_step == t_total
    images = np.clip((x[:, 0] + 1.0) / 2.0, 0.0, 1.0) if finished else None
    records = []
    for i, (spec, seed) in enumerate(zip(specs, seeds)):
        pid = _prompt_id(spec)
        stacks = []
        for k in capture_steps:
            maps = np.stack(
                [layer[i].T.reshape(cfg.n_token_slots, cfg.feat, cfg.feat) for layer in captured[k]]
            )
            stacks.append(
                AttentionStack(
                    prompt_id=pid,
                    seed=seed,
                    step=k,
                    total_steps=t_total,
                    block_ids=tuple(range(cfg.attn_layers)),
                    maps=maps.astype(np.float32),
                    token_mask=mask[i],
                    normalized=False,
                )
            )
        labels = ()
        if score and finished:
            labels = (QualityLabel("programmatic", score_image(images[i], spec), "programmatic"),)
        rec = TrajectoryRecord(
            prompt_id=pid,
            prompt_tokens=spec.tokens,
            prompt_text=spec.text(),
            seed=seed,
            total_steps=t_total,
            capture_step=max(capture_steps) if capture_steps else 0,
            stacks=tuple(stacks),
            final_image=images[i] if finished else None,
            labels=labels,
            scene=spec.to_json(),
        )
        rec.validate()
        records.append(rec)
    return records


def toy_sample(
    model: ToyModel,
    prompt: SceneSpec,
    seed: int,
    total_steps: int | None = None,
    capture_steps=(),
    score: bool = True,
) -> TrajectoryRecord:
    """Single-record convenience wrapper over ``sample_trajectories``."""
    return sample_trajectories(model, [prompt], [seed], capture_steps, total_steps, score)[0]


class ToyGenerator:
    """Workflow-facing adapter: partial/full trajectory generation.

    Partial stacks are normalized on the way out so they can feed the
    probe and the dispersion statistics directly.
    """

    def __init__(self, model: ToyModel):
        self.model = model
        self.total_steps = model.config.total_steps

    def _normalize_record(self, record: TrajectoryRecord) -> TrajectoryRecord:
        from ..stackio import normalize_stack

        stacks = tuple(normalize_stack(s) for s in record.stacks)
        return TrajectoryRecord(
            prompt_id=record.prompt_id,
            prompt_tokens=record.prompt_tokens,
            prompt_text=record.prompt_text,
            seed=record.seed,
            total_steps=record.total_steps,
            capture_step=record.capture_step,
            stacks=stacks,
            final_image=record.final_image,
            labels=record.labels,
            scene=record.scene,
        )

    def partial(self, prompt: SceneSpec, seed: int, t0: int) -> TrajectoryRecord:
        return self.partial_batch(prompt, [seed], t0)[0]

    def partial_batch(self, prompt: SceneSpec, seeds, t0: int) -> list[TrajectoryRecord]:
        records = sample_trajectories(
            self.model, [prompt] * len(seeds), seeds, capture_steps=[t0], stop_after=t0
        )
        return [self._normalize_record(r) for r in records]

    def full(self, prompt: SceneSpec, seed: int) -> TrajectoryRecord:
        return toy_sample(self.model, prompt, seed)


def save_model(model: ToyModel, path: str | Path) -> None:
    checkpoint.save_tensors(path, model.config.to_json(), model.tensors)


def load_model(path: str | Path) -> ToyModel:
    config_json, tensors = checkpoint.load_tensors(path)
    if config_json.get("kind") != CHECKPOINT_KIND:
        raise CompatibilityError(f"{path}: not a toy-diffusion checkpoint")
    return ToyModel(ToyDiffusionConfig.from_json(config_json), tensors)
