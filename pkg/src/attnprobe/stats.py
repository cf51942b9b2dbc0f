"""Closed-form dispersion statistics over normalized attention maps.

These quantify the "diffuse and fragmented" failure signature directly and
double as a training-free baseline: the negated ``dispersion_score`` of a
stack is itself a quality predictor to compare the learned probe against.
"""

from __future__ import annotations

import numpy as np

from .stackio import NORMALIZATION_TOL, AttentionStack


def _check_normalized(map2d: np.ndarray) -> np.ndarray:
    m = np.asarray(map2d, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {m.shape}")
    if (m < 0).any():
        raise ValueError("map has negative entries")
    total = m.sum()
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"map is not normalized (sum={total:.6g})")
    return m


def spatial_entropy(map2d: np.ndarray) -> float:
    """Shannon entropy in nats, with 0*ln(0) = 0; range [0, ln(H*W)]."""
    m = _check_normalized(map2d)
    p = m[m > 0]
    return float(-(p * np.log(p)).sum())


def peak_mass(map2d: np.ndarray, k: int) -> float:
    """Total mass of the k largest cells."""
    m = _check_normalized(map2d)
    if not 1 <= k <= m.size:
        raise ValueError(f"k={k} outside [1, {m.size}]")
    flat = m.ravel()
    return float(np.partition(flat, m.size - k)[m.size - k :].sum())


def fragmentation(map2d: np.ndarray, threshold_fraction: float = 0.5) -> int:
    """Number of 4-connected components among cells above a fraction of max."""
    m = _check_normalized(map2d)
    if not 0 < threshold_fraction < 1:
        raise ValueError("threshold fraction must lie in (0, 1)")
    hot = m > threshold_fraction * m.max()
    h, w = hot.shape
    seen = np.zeros_like(hot)
    count = 0
    for i in range(h):
        for j in range(w):
            if not hot[i, j] or seen[i, j]:
                continue
            count += 1
            frontier = [(i, j)]
            seen[i, j] = True
            while frontier:
                y, x = frontier.pop()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and hot[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        frontier.append((ny, nx))
    return count


def dispersion_score(stack: AttentionStack) -> float:
    """Mean normalized entropy over (block, real token) slices; in [0, 1].

    Higher means more dispersed attention; ``-dispersion_score`` is the
    training-free quality predictor.
    """
    if not stack.normalized:
        raise ValueError("dispersion_score requires a normalized stack")
    real = np.flatnonzero(stack.token_mask)
    if real.size == 0:
        raise ValueError("stack has no real tokens")
    h, w = stack.spatial_shape
    if h * w == 1:
        return 0.0
    log_cells = np.log(h * w)
    total = 0.0
    for blk in range(stack.n_blocks):
        for slot in real:
            total += spatial_entropy(stack.maps[blk, slot]) / log_cells
    return float(total / (stack.n_blocks * real.size))


def dispersion_quality(stack: AttentionStack) -> float:
    """Negated dispersion, usable anywhere a probe scorer is expected."""
    return -dispersion_score(stack)
