"""Attention stacks and their bit-exact on-disk format (``.atnp``).

File layout (all integers little-endian):

    bytes 0..3    magic ``ATNP``
    byte  4       format version (1)
    bytes 5..7    reserved (zero)
    bytes 8..23   u32 n_blocks, n_tokens, height, width
    bytes 24..    float32 payload, [block, token, h, w] row-major

Token mask and run metadata live in the dataset manifest, not in the
binary; ``read_stack`` accepts them as keyword overrides.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncationError

MAGIC = b"ATNP"
VERSION = 1
_HEADER = struct.Struct("<4sB3x4I")

NORMALIZATION_TOL = 1e-5


@dataclass(frozen=True)
class AttentionStack:
    """Early-step cross-attention maps for one generation.

    ``maps`` has shape [n_blocks, n_token_slots, H, W]; slot ``i`` is a real
    prompt token iff ``token_mask[i]``. ``step`` is 1-based with step 1 the
    most-noisy denoising step.
    """

    prompt_id: str
    seed: int
    step: int
    total_steps: int
    block_ids: tuple[int, ...]
    maps: np.ndarray
    token_mask: np.ndarray
    normalized: bool

    def __post_init__(self):
        object.__setattr__(self, "maps", np.asarray(self.maps, dtype=np.float32))
        object.__setattr__(self, "token_mask", np.asarray(self.token_mask, dtype=bool))
        object.__setattr__(self, "block_ids", tuple(int(b) for b in self.block_ids))
        self.maps.flags.writeable = False
        self.token_mask.flags.writeable = False

    @property
    def n_blocks(self) -> int:
        return self.maps.shape[0]

    @property
    def n_token_slots(self) -> int:
        return self.maps.shape[1]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.maps.shape[2], self.maps.shape[3]

    def n_real_tokens(self) -> int:
        return int(self.token_mask.sum())

    def validate(self) -> None:
        """Raise ValueError on any violated structural invariant."""
        if self.maps.ndim != 4:
            raise ValueError(f"maps must be 4-D, got shape {self.maps.shape}")
        if self.token_mask.shape != (self.maps.shape[1],):
            raise ValueError("token_mask length must equal the token-slot count")
        if not np.isfinite(self.maps).all():
            raise ValueError("maps contain non-finite values")
        if (self.maps < 0).any():
            raise ValueError("maps contain negative values")
        if not 1 <= self.step <= self.total_steps:
            raise ValueError(f"step {self.step} outside [1, {self.total_steps}]")
        if len(self.block_ids) != self.maps.shape[0]:
            raise ValueError("block_ids length must equal n_blocks")
        if any(a >= b for a, b in zip(self.block_ids, self.block_ids[1:])):
            raise ValueError("block_ids must be strictly increasing")
        if self.normalized:
            sums = self.maps.sum(axis=(2, 3), dtype=np.float64)
            real = sums[:, self.token_mask]
            if real.size and np.abs(real - 1.0).max() > NORMALIZATION_TOL:
                raise ValueError("normalized stack has a real-token slice not summing to 1")
            padded = self.maps[:, ~self.token_mask]
            if padded.size and padded.max() > 0:
                raise ValueError("normalized stack has nonzero padded slices")


def normalize_stack(stack: AttentionStack) -> AttentionStack:
    """Rescale every real-token slice into a spatial distribution.

    All-zero slices become the uniform distribution (the maximal-entropy
    "no information" reading); padded slices are zeroed. Value-idempotent:
    renormalizing an already-normalized stack changes nothing beyond
    float32 rounding.
    """
    maps = np.asarray(stack.maps, dtype=np.float64)
    if (maps < 0).any():
        raise ValueError("cannot normalize maps with negative entries")
    out = np.zeros_like(maps)
    hw = maps.shape[2] * maps.shape[3]
    sums = maps.sum(axis=(2, 3), keepdims=True)
    for slot in range(maps.shape[1]):
        if not stack.token_mask[slot]:
            continue
        for blk in range(maps.shape[0]):
            s = sums[blk, slot, 0, 0]
            if s > 0:
                out[blk, slot] = maps[blk, slot] / s
            else:
                out[blk, slot] = 1.0 / hw
    return replace(stack, maps=out.astype(np.float32), normalized=True)


def write_stack(stack: AttentionStack, path: str | Path) -> None:
    """Serialize a validated stack; ``read(write(x))`` is bit-identical."""
    stack.validate()
    nb, nt, h, w = stack.maps.shape
    payload = np.ascontiguousarray(stack.maps, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, nb, nt, h, w))
        f.write(payload)


def read_stack(path: str | Path, **meta) -> AttentionStack:
    """Read an ``.atnp`` file; metadata comes from ``meta`` or defaults.

    Defaults: prompt_id "", seed 0, step/total_steps 1, block_ids 0..n-1,
    all token slots real, normalized False.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, nb, nt, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = nb * nt * h * w * 4
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise TruncationError(
            f"{path}: header promises {expected} payload bytes, found {actual}"
        )
    maps = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(nb, nt, h, w)
    return AttentionStack(
        prompt_id=meta.get("prompt_id", ""),
        seed=meta.get("seed", 0),
        step=meta.get("step", 1),
        total_steps=meta.get("total_steps", meta.get("step", 1)),
        block_ids=meta.get("block_ids", tuple(range(nb))),
        maps=maps,
        token_mask=meta.get("token_mask", np.ones(nt, dtype=bool)),
        normalized=meta.get("normalized", False),
    )
