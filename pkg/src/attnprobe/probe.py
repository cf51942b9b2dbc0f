"""The learned quality probe: a small conv net over attention stacks.

The stack's (block, token-slot) axes are flattened into input channels;
spatial structure is preserved. Each down block is a stride-2 conv plus
residual conv layers, conditioned on a sinusoidal timestep embedding that
is projected and added per block. The output layer standardizes features,
global-average-pools, and maps to one unbounded scalar.

Gradients are hand-derived and checked against finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, nn
from .dataset import QualityLabel
from .errors import CompatibilityError, TrainingError
from .stackio import AttentionStack

CHECKPOINT_KIND = "quality-probe"


@dataclass(frozen=True)
class ProbeConfig:
    n_blocks: int
    n_token_slots: int
    height: int
    width: int
    widths: tuple[int, ...] = (32, 64, 128)
    res_layers: int = 2
    emb_dim: int = 64
    pooling: str = "gap"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    oversample_factor: int = 3
    low_score_quantile: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("need at least one down block")
        if self.emb_dim % 2 or self.emb_dim < 2:
            raise ValueError("emb_dim must be even and >= 2")
        if self.oversample_factor < 1:
            raise ValueError("oversample_factor must be >= 1")
        if not 0 <= self.low_score_quantile < 1:
            raise ValueError("low_score_quantile must lie in [0, 1)")
        if self.pooling != "gap":
            raise ValueError("only global average pooling is supported")
        if min(self.n_blocks, self.n_token_slots, self.height, self.width) < 1:
            raise ValueError("input dims must be positive")

    @property
    def in_channels(self) -> int:
        return self.n_blocks * self.n_token_slots

    def input_shape(self) -> tuple[int, int, int, int]:
        return (self.n_blocks, self.n_token_slots, self.height, self.width)

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["kind"] = CHECKPOINT_KIND
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ProbeConfig":
        d = dict(d)
        d.pop("kind", None)
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    def fingerprint(self) -> bytes:
        return checkpoint.config_fingerprint(self.to_json())


@dataclass
class ProbeParams:
    config: ProbeConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = set(expected) ^ set(self.tensors)
            raise ValueError(f"parameter names do not match config: {sorted(missing)}")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")
            if not np.isfinite(self.tensors[name]).all():
                raise ValueError(f"{name}: non-finite values")


def timestep_embed(t: int, total_steps: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of t/T: [sin(w_i t/T), cos(w_i t/T)].

    Frequencies are geometric from 1 to 1e4 across dim/2 slots.
    """
    if dim % 2 or dim < 2:
        raise ValueError("embedding dim must be even and >= 2")
    if not 1 <= t <= total_steps:
        raise ValueError(f"step {t} outside [1, {total_steps}]")
    return _embed_fracs(np.asarray([t / total_steps]), dim)[0]


def _embed_freqs(dim: int) -> np.ndarray:
    half = dim // 2
    if half == 1:
        return np.ones(1)
    return np.geomspace(1.0, 1e4, half)


def _embed_fracs(fracs: np.ndarray, dim: int) -> np.ndarray:
    ang = np.outer(fracs, _embed_freqs(dim))
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def param_shapes(config: ProbeConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = config.in_channels
    for i, c_out in enumerate(config.widths):
        shapes[f"down{i}.conv.w"] = (c_out, c_in, 3, 3)
        shapes[f"down{i}.conv.b"] = (c_out,)
        shapes[f"down{i}.temb.w"] = (c_out, config.emb_dim)
        shapes[f"down{i}.temb.b"] = (c_out,)
        for j in range(config.res_layers):
            shapes[f"down{i}.res{j}.conv1.w"] = (c_out, c_out, 3, 3)
            shapes[f"down{i}.res{j}.conv1.b"] = (c_out,)
            shapes[f"down{i}.res{j}.conv2.w"] = (c_out, c_out, 3, 3)
            shapes[f"down{i}.res{j}.conv2.b"] = (c_out,)
        c_in = c_out
    c = config.widths[-1]
    shapes["out.gamma"] = (c,)
    shapes["out.beta"] = (c,)
    shapes["out.head.w"] = (c,)
    shapes["out.head.b"] = (1,)
    return shapes


def init_params(config: ProbeConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or name == "out.beta":
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif name == "out.gamma":
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name == "out.head.w":
            tensors[name] = (0.1 * rng.standard_normal(shape) / np.sqrt(shape[0])).astype(dtype)
        elif name.endswith("temb.w"):
            tensors[name] = (rng.standard_normal(shape) / np.sqrt(shape[1])).astype(dtype)
        else:  # conv kernels, He init
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return tensors


def stack_to_input(stack: AttentionStack, config: ProbeConfig) -> np.ndarray:
    """Flatten a stack to [C_in, H, W], zeroing padded token slots.

    Slices are rescaled by H*W (uniform attention maps to 1.0) so the
    network sees O(1) activations instead of O(1/(H*W)) probabilities.
    """
    if stack.maps.shape != config.input_shape():
        raise ValueError(
            f"stack shape {stack.maps.shape} does not match probe input {config.input_shape()}"
        )
    if not stack.normalized:
        raise ValueError("probe consumes normalized stacks")
    x = np.array(stack.maps, dtype=np.float32) * np.float32(config.height * config.width)
    x[:, ~stack.token_mask] = 0.0
    return x.reshape(config.in_channels, config.height, config.width)


def forward_batch(
    tensors: dict[str, np.ndarray],
    config: ProbeConfig,
    x: np.ndarray,
    t_frac: np.ndarray,
    want_cache: bool = False,
):
    """Forward pass over a batch; returns (q_hat [B], cache or None)."""
    emb = _embed_fracs(np.asarray(t_frac, dtype=np.float64), config.emb_dim).astype(x.dtype)
    h = x
    blocks = []
    for i in range(len(config.widths)):
        x_in = h
        pre = nn.conv2d(x_in, tensors[f"down{i}.conv.w"], tensors[f"down{i}.conv.b"], stride=2, pad=1)
        tb = emb @ tensors[f"down{i}.temb.w"].T + tensors[f"down{i}.temb.b"]
        pre = pre + tb[:, :, None, None]
        h = nn.silu(pre)
        res = []
        for j in range(config.res_layers):
            h_in = h
            a1 = nn.silu(h_in)
            c1 = nn.conv2d(a1, tensors[f"down{i}.res{j}.conv1.w"], tensors[f"down{i}.res{j}.conv1.b"], 1, 1)
            a2 = nn.silu(c1)
            c2 = nn.conv2d(a2, tensors[f"down{i}.res{j}.conv2.w"], tensors[f"down{i}.res{j}.conv2.b"], 1, 1)
            h = h_in + c2
            res.append((h_in, a1, c1, a2))
        blocks.append((x_in, pre, res))
    normed, norm_cache = nn.feature_norm(h, tensors["out.gamma"], tensors["out.beta"])
    pooled = normed.mean(axis=(2, 3))
    q = pooled @ tensors["out.head.w"] + tensors["out.head.b"][0]
    if not want_cache:
        return q, None
    return q, (emb, blocks, h, norm_cache, pooled)


def backward_batch(
    tensors: dict[str, np.ndarray],
    config: ProbeConfig,
    cache,
    gq: np.ndarray,
) -> dict[str, np.ndarray]:
    emb, blocks, h_last, norm_cache, pooled = cache
    grads: dict[str, np.ndarray] = {}
    grads["out.head.w"] = gq @ pooled
    grads["out.head.b"] = np.asarray([gq.sum()], dtype=gq.dtype)
    gpooled = gq[:, None] * tensors["out.head.w"][None, :]
    hw = h_last.shape[2] * h_last.shape[3]
    gnormed = np.broadcast_to(gpooled[:, :, None, None] / hw, h_last.shape).astype(gq.dtype)
    gh, ggamma, gbeta = nn.feature_norm_grads(gnormed, tensors["out.gamma"], norm_cache)
    grads["out.gamma"] = ggamma
    grads["out.beta"] = gbeta
    for i in reversed(range(len(config.widths))):
        x_in, pre, res = blocks[i]
        for j in reversed(range(config.res_layers)):
            h_in, a1, c1, a2 = res[j]
            gc2 = gh
            ga2, gw2, gb2 = nn.conv2d_grads(a2, tensors[f"down{i}.res{j}.conv2.w"], gc2, 1, 1)
            grads[f"down{i}.res{j}.conv2.w"] = gw2
            grads[f"down{i}.res{j}.conv2.b"] = gb2
            gc1 = ga2 * nn.silu_grad(c1)
            ga1, gw1, gb1 = nn.conv2d_grads(a1, tensors[f"down{i}.res{j}.conv1.w"], gc1, 1, 1)
            grads[f"down{i}.res{j}.conv1.w"] = gw1
            grads[f"down{i}.res{j}.conv1.b"] = gb1
            gh = gh + ga1 * nn.silu_grad(h_in)
        gpre = gh * nn.silu_grad(pre)
        gtb = gpre.sum(axis=(2, 3))
        grads[f"down{i}.temb.w"] = gtb.T @ emb
        grads[f"down{i}.temb.b"] = gtb.sum(axis=0)
        gx, gw, gb = nn.conv2d_grads(x_in, tensors[f"down{i}.conv.w"], gpre, 2, 1)
        grads[f"down{i}.conv.w"] = gw
        grads[f"down{i}.conv.b"] = gb
        gh = gx
    return grads


def loss_and_grads(
    tensors: dict[str, np.ndarray],
    config: ProbeConfig,
    x: np.ndarray,
    t_frac: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over the batch and its parameter gradients."""
    q, cache = forward_batch(tensors, config, x, t_frac, want_cache=True)
    err = q - targets
    loss = float((err * err).mean())
    gq = (2.0 / q.size) * err
    return loss, backward_batch(tensors, config, cache, gq)


def probe_forward(params: ProbeParams, stack: AttentionStack, t: int | None = None) -> float:
    """Predicted quality for one stack (padded slots are zeroed first)."""
    cfg = params.config
    x = stack_to_input(stack, cfg)[None]
    step = stack.step if t is None else t
    if not 1 <= step <= stack.total_steps:
        raise ValueError(f"step {step} outside [1, {stack.total_steps}]")
    q, _ = forward_batch(params.tensors, cfg, x, np.asarray([step / stack.total_steps]))
    return float(q[0])


class ProbeScorer:
    """Callable scorer wrapping trained parameters; supports batching."""

    def __init__(self, params: ProbeParams, batch_size: int = 64):
        params.validate()
        self.params = params
        self.batch_size = batch_size

    def __call__(self, stack: AttentionStack) -> float:
        return probe_forward(self.params, stack)

    def score_batch(self, stacks) -> np.ndarray:
        cfg = self.params.config
        stacks = list(stacks)
        out = np.empty(len(stacks))
        for lo in range(0, len(stacks), self.batch_size):
            chunk = stacks[lo : lo + self.batch_size]
            x = np.stack([stack_to_input(s, cfg) for s in chunk])
            t_frac = np.asarray([s.step / s.total_steps for s in chunk])
            q, _ = forward_batch(self.params.tensors, cfg, x, t_frac)
            out[lo : lo + len(chunk)] = q
        return out


def _label_value(label) -> float:
    return label.value if isinstance(label, QualityLabel) else float(label)


def train_probe(
    train_set,
    config: ProbeConfig,
    log_every: int = 0,
) -> tuple[ProbeParams, list[float]]:
    """MSE-train the probe; returns final params and per-epoch mean loss.

    ``train_set`` is a sequence of (AttentionStack, label) pairs where the
    label is a float or a QualityLabel; QualityLabels must agree on the
    metric name. Samples below the low-score quantile appear
    ``oversample_factor`` times in every epoch's sampling pool.
    """
    pairs = list(train_set)
    if not pairs:
        raise ValueError("empty training set")
    names = {lab.metric_name for _, lab in pairs if isinstance(lab, QualityLabel)}
    if len(names) > 1:
        raise ValueError(f"mixed label metric names: {sorted(names)}")
    x = np.stack([stack_to_input(s, config) for s, _ in pairs])
    y = np.asarray([_label_value(lab) for _, lab in pairs], dtype=np.float32)
    t_frac = np.asarray([s.step / s.total_steps for s, _ in pairs])

    rng = np.random.default_rng(config.seed)
    tensors = init_params(config, rng, dtype=np.float32)
    tensors["out.head.b"][:] = y.mean()  # start predictions centered on the labels
    state = nn.AdamState(tensors)

    pool = np.arange(len(pairs))
    if config.oversample_factor > 1 and config.low_score_quantile > 0:
        thr = np.quantile(y, config.low_score_quantile)
        low = np.flatnonzero(y < thr)
        pool = np.concatenate([pool] + [low] * (config.oversample_factor - 1))

    history: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(pool)
        sse = 0.0
        for lo in range(0, order.size, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            loss, grads = loss_and_grads(
                tensors, config, x[idx], t_frac[idx], y[idx].astype(np.float32)
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at update {step}", iteration=step)
            nn.adam_step(tensors, grads, state, lr=config.lr)
            sse += loss * idx.size
            step += 1
        history.append(sse / order.size)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}/{config.epochs}  mse={history[-1]:.6f}")
    return ProbeParams(config, tensors), history


def save_checkpoint(params: ProbeParams, path: str | Path) -> None:
    params.validate()
    checkpoint.save_tensors(path, params.config.to_json(), params.tensors)


def load_checkpoint(path: str | Path, expected_config: ProbeConfig | None = None) -> ProbeParams:
    config_json, tensors = checkpoint.load_tensors(path)
    if config_json.get("kind") != CHECKPOINT_KIND:
        raise CompatibilityError(f"{path}: not a probe checkpoint ({config_json.get('kind')!r})")
    config = ProbeConfig.from_json(config_json)
    if expected_config is not None and expected_config.fingerprint() != config.fingerprint():
        raise CompatibilityError(f"{path}: checkpoint config does not match the expected config")
    params = ProbeParams(config, tensors)
    params.validate()
    return params
