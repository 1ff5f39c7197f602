"""Vision and text transformers plus the projection heads into the shared embedding space."""

from __future__ import annotations

import numpy as np

from . import corpus
from .config import TextConfig, VisionConfig
from .nn import Block, LayerNorm, Linear, Module, param, trunc_normal
from .numerics import Tensor, ops


class GeometryError(ValueError):
    pass


class VisionEncoder(Module):
    """ViT over flattened patches: linear patch embedding, cls token, learned positions.

    ``forward`` accepts any subset of patches together with their grid
    positions (1..N), so the same module serves the full-image pass and the
    visible-only student pass. The cls token always sits at slot 0.
    """

    def __init__(self, cfg: VisionConfig, rng, dtype=np.float64):
        self.cfg = cfg
        W = cfg.width
        self.patch_embed = Linear(cfg.patch_dim, W, rng, dtype=dtype)
        self.cls_token = param(trunc_normal(rng, (W,), dtype=dtype))
        self.pos_embed = param(trunc_normal(rng, (cfg.num_patches + 1, W), dtype=dtype))
        self.blocks = [Block(W, cfg.heads, cfg.mlp_ratio, rng, dtype=dtype) for _ in range(cfg.depth)]
        self.ln_final = LayerNorm(W, dtype=dtype)
        self._observers = []

    def observe(self, fn):
        """Register ``fn(n_tokens)`` to be called with the token count of every forward pass."""
        self._observers.append(fn)
        return fn

    def forward(self, patches, positions=None):
        """(B, K, 3P^2) patch vectors -> (B, K+1, width) features, cls first.

        ``positions`` is a (B, K) integer array of 1-based grid indices; it
        defaults to 1..N in order (the full image).
        """
        cfg = self.cfg
        x = np.asarray(patches, dtype=self.cls_token.dtype)
        if x.ndim != 3 or x.shape[-1] != cfg.patch_dim:
            raise GeometryError(f"expected (B, K, {cfg.patch_dim}) patches, got {x.shape}")
        B, K, _ = x.shape
        if positions is None:
            if K != cfg.num_patches:
                raise GeometryError(f"full-image pass needs {cfg.num_patches} patches, got {K}")
            pos = self.pos_embed[1:]
        else:
            positions = np.asarray(positions)
            if positions.shape != (B, K):
                raise GeometryError(f"positions {positions.shape} do not match patches {(B, K)}")
            if positions.size and (positions.min() < 1 or positions.max() > cfg.num_patches):
                raise IndexError(f"patch positions must lie in 1..{cfg.num_patches}")
            pos = ops.embedding(self.pos_embed, positions)
        for fn in self._observers:
            fn(K + 1)
        tokens = self.patch_embed(Tensor(x)) + pos
        cls = ops.broadcast_to((self.cls_token + self.pos_embed[0]).reshape(1, 1, -1), (B, 1, cfg.width))
        h = ops.concat([cls, tokens], axis=1)
        for blk in self.blocks:
            h = blk(h)
        return self.ln_final(h)

    def encode_images(self, images):
        """(B, H, W, 3) float images -> full-image features (B, N+1, width)."""
        images = np.asarray(images)
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise GeometryError(f"expected (B, {cfg.image_size}, {cfg.image_size}, 3) images, got {images.shape}")
        return self.forward(corpus.patchify(images, cfg.patch_size))


def causal_mask(length):
    return np.tril(np.ones((length, length), dtype=bool))


class TextEncoder(Module):
    def __init__(self, cfg: TextConfig, rng, dtype=np.float64):
        self.cfg = cfg
        V = cfg.vocab_size or corpus.vocab_size()
        W = cfg.width
        self.token_embed = param(trunc_normal(rng, (V, W), dtype=dtype))
        self.pos_embed = param(trunc_normal(rng, (cfg.context_length, W), dtype=dtype))
        self.blocks = [Block(W, cfg.heads, cfg.mlp_ratio, rng, dtype=dtype) for _ in range(cfg.depth)]
        self.ln_final = LayerNorm(W, dtype=dtype)
        self._keep = causal_mask(cfg.context_length) if cfg.causal else None

    def forward(self, ids, eos_positions):
        """Token ids (B, L) -> (all token features (B, L, W), eos features (B, W))."""
        ids = np.asarray(ids)
        eos_positions = np.asarray(eos_positions)
        B, L = ids.shape
        if L != self.cfg.context_length:
            raise GeometryError(f"expected context length {self.cfg.context_length}, got {L}")
        if eos_positions.shape != (B,):
            raise GeometryError("one eos position per sequence is required")
        if (ids[np.arange(B), eos_positions] != corpus.EOS_ID).any():
            raise ValueError("sequence is missing its eos token at eos_position")
        h = ops.embedding(self.token_embed, ids) + self.pos_embed
        for blk in self.blocks:
            h = blk(h, keep=self._keep)
        feats = self.ln_final(h)
        return feats, feats[np.arange(B), eos_positions]

    def encode_texts(self, texts):
        ids, eos = corpus.tokenize_batch(texts, self.cfg.context_length)
        return self.forward(ids, eos)


class ProjectionHead(Module):
    """Single bias-free linear map width -> embed_dim."""

    def __init__(self, width, embed_dim, rng, dtype=np.float64):
        self.proj = Linear(width, embed_dim, rng, bias=False, dtype=dtype)

    def forward(self, x):
        return self.proj(x)


def global_image_embedding(feats, head):
    """Mean of the N patch tokens (cls excluded), projected and L2-normalised."""
    return ops.l2_normalize(head(feats[:, 1:].mean(axis=1)))


def global_text_embedding(eos_feats, head):
    return ops.l2_normalize(head(eos_feats))


def dense_image_embeddings(feats, head):
    """Per-patch projected, unit-norm embeddings (B, N, embed_dim) for dense evaluation."""
    return ops.l2_normalize(head(feats[:, 1:]))
