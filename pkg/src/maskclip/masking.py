"""Random patch masking and token bookkeeping between student and decoder.

Patch indices are 1-based (1..N) so that they double as slots in the
length-(N+1) token sequence whose slot 0 is the cls token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, ops


@dataclass(frozen=True)
class MaskSpec:
    masked: np.ndarray  # sorted 1-based patch indices
    visible: np.ndarray  # sorted complement
    ratio: float

    @property
    def num_patches(self):
        return len(self.masked) + len(self.visible)


def mask_count(n, ratio):
    """round(ratio * n) with halves rounded up."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    return min(n, int(math.floor(ratio * n + 0.5)))


def sample_mask(n, ratio, rng) -> MaskSpec:
    k = mask_count(n, ratio)
    perm = rng.permutation(n) + 1
    masked = np.sort(perm[:k])
    visible = np.sort(perm[k:])
    return MaskSpec(masked, visible, k / n if n else 0.0)


def sample_masks(batch, n, ratio, rng):
    """Independent masks for a batch: (masked (B, |M|), visible (B, N-|M|)), 1-based."""
    k = mask_count(n, ratio)
    perms = np.stack([rng.permutation(n) for _ in range(batch)]) + 1
    return np.sort(perms[:, :k], axis=1), np.sort(perms[:, k:], axis=1)


def pack_visible(patches, visible):
    """Gather visible patches; returns (patches (B, V, D), positions (B, V)).

    ``patches`` is (B, N, D) or (N, D); ``visible`` is the matching (B, V) or
    (V,) array of 1-based indices. Relative order is preserved.
    """
    patches = np.asarray(patches)
    visible = np.asarray(visible)
    single = patches.ndim == 2
    if single:
        patches, visible = patches[None], visible[None]
    n = patches.shape[1]
    if visible.size and (visible.min() < 1 or visible.max() > n):
        raise IndexError(f"visible index out of range 1..{n}")
    b = np.arange(patches.shape[0])[:, None]
    packed = patches[b, visible - 1]
    if single:
        return packed[0], visible[0]
    return packed, visible


def scatter_back(packed, positions, n, fill=np.nan):
    """Place packed rows back at their 1-based positions; holes get ``fill``."""
    packed = np.asarray(packed)
    out = np.full((n,) + packed.shape[1:], fill, dtype=np.result_type(packed.dtype, np.float64))
    out[np.asarray(positions) - 1] = packed
    return out


def assemble_for_decoder(visible_feats, visible, mask_token, pos_embed):
    """Full (B, N+1, W) sequence: student features at visible slots, ``m`` at masked ones.

    ``visible_feats`` is the student output (B, V+1, W) with cls first;
    ``visible`` the (B, V) 1-based positions. The positional embedding of
    every slot, cls included, is added afterwards.
    """
    B, V1, W = visible_feats.shape
    visible = np.asarray(visible)
    N = pos_embed.shape[0] - 1
    if visible.shape != (B, V1 - 1):
        raise ValueError(f"visible positions {visible.shape} do not match features {visible_feats.shape}")
    if mask_token.shape != (W,):
        raise ValueError(f"mask token {mask_token.shape} does not match width {W}")
    slots = np.concatenate([np.zeros((B, 1), dtype=np.intp), visible], axis=1)
    b = np.arange(B)[:, None]
    full = ops.scatter(visible_feats, (b, slots), (B, N + 1, W))
    is_masked = np.ones((B, N + 1, 1), dtype=visible_feats.dtype)
    is_masked[b, slots] = 0.0
    if V1 - 1 < N:
        full = full + Tensor(is_masked) * mask_token
    return full + pos_embed
