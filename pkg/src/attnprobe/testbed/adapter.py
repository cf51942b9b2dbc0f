"""Capture-adapter contract for hooking real external generators.

No adapter for a production model ships here; this module pins down the
interface an adapter must satisfy so its output can flow through the rest
of the toolkit unchanged.

An adapter wraps one text-to-image generator and, for a (prompt, seed)
pair, yields AttentionStacks that satisfy every ``stackio`` invariant:

- ``maps`` indexed [block, token_slot, H, W], nonnegative and finite,
  post-softmax attention probabilities averaged over heads;
- ``token_mask`` marking which slots hold real prompt tokens, padded
  slots all-zero;
- ``step``/``total_steps`` using 1-based denoising-step indices where
  step 1 is the most-noisy step;
- ``block_ids`` naming the captured layers, strictly increasing.

Block selection conventions:

- UNet backbones: the final 10 encoder blocks.
- DiT backbones: 10 consecutive blocks from the middle of the stack. For
  joint-sequence architectures whose fused self-attention mixes text and
  image tokens, slice out the text-to-image sub-block (image-position
  queries attending to text-token keys) before head-averaging.
- The in-repo toy model: all of its cross-attention layers.

Adapters are free to choose tokenizer handling (function words, padding)
but must document the choice and keep the slot count fixed per dataset.
"""

from __future__ import annotations

from typing import Protocol, Sequence, runtime_checkable

from ..stackio import AttentionStack


@runtime_checkable
class CaptureAdapter(Protocol):
    """Interface an external-generator adapter must provide."""

    def capture(self, prompt: str, seed: int, steps: Sequence[int]) -> list[AttentionStack]:
        """Run the first max(steps) denoising steps, returning one stack per step."""
        ...

    def total_steps(self) -> int:
        """Length of the sampler's schedule (T)."""
        ...
