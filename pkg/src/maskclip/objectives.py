"""Contrastive pair, pixel-reconstruction arm, and the combined pretraining model."""

from __future__ import annotations

import math

import numpy as np

from . import corpus
from .config import TrainConfig
from .distillation import Decoder, decode_predict, distill_loss, freeze, copy_into, teacher_targets
from .encoders import (
    ProjectionHead,
    TextEncoder,
    VisionEncoder,
    global_image_embedding,
    global_text_embedding,
)
from .masking import sample_masks
from .nn import Linear, Module, init_rng, param, trunc_normal
from .numerics import Tensor, ops

TEMPERATURE_MIN = 0.01
TEMPERATURE_MAX = 100.0
PIXEL_NORM_EPS = 1e-6


class UnitNormError(ValueError):
    pass


def contrastive_loss(e_img, e_txt, log_temperature):
    """Symmetric InfoNCE over a batch of paired unit embeddings.

    Returns ``(L_I, L_T)``: image-to-text and text-to-image cross-entropies
    with logits ``e_img @ e_txt.T / sigma``, ``sigma = exp(log_temperature)``.
    """
    if e_img.shape != e_txt.shape or e_img.ndim != 2:
        raise ValueError(f"embedding batches must match: {e_img.shape} vs {e_txt.shape}")
    B = e_img.shape[0]
    if B == 0:
        raise ValueError("contrastive loss needs at least one pair")
    for name, e in (("image", e_img), ("text", e_txt)):
        norms = np.sqrt((e.data * e.data).sum(axis=1))
        if np.abs(norms - 1.0).max() > 1e-4:
            raise UnitNormError(f"{name} embeddings are not unit-norm (max deviation {np.abs(norms - 1).max():.3g})")
    logits = (e_img @ e_txt.T) * ops.exp(-log_temperature)
    diag = (np.arange(B), np.arange(B))
    loss_i = -ops.log_softmax(logits, axis=1)[diag].mean()
    loss_t = -ops.log_softmax(logits, axis=0)[diag].mean()
    return loss_i, loss_t


def normalized_pixel_targets(patches, eps=PIXEL_NORM_EPS):
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mu) / np.sqrt(var + eps)


def pixel_reconstruction_loss(pred, patches, masked):
    """MSE on masked patches against per-patch normalised pixels.

    ``pred`` is (B, N, 3P^2) (patch slots only), ``patches`` the raw (B, N,
    3P^2) pixels and ``masked`` the (B, |M|) 1-based patch indices.
    """
    patches = np.asarray(patches)
    if pred.shape != patches.shape:
        raise ValueError(f"prediction {pred.shape} does not match patches {patches.shape}")
    masked = np.asarray(masked)
    if masked.ndim == 1:
        masked = masked[None]
    if masked.size == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    b = np.arange(masked.shape[0])[:, None]
    target = normalized_pixel_targets(patches)[b, masked - 1].astype(pred.dtype)
    diff = pred[b, masked - 1] - target
    return (diff * diff).mean()


def clamp_temperature(log_temperature: Tensor) -> None:
    np.clip(log_temperature.data, math.log(TEMPERATURE_MIN), math.log(TEMPERATURE_MAX),
            out=log_temperature.data)


class MaskCLIP(Module):
    """Dual encoder plus the auxiliary branch selected by ``cfg.objective``.

    Components are only allocated for the arm that uses them: ``clip`` has no
    decoder, mask token or teacher; ``clip_pixel`` adds a decoder and pixel
    head; ``maskclip`` adds a decoder and the frozen EMA teacher.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        dtype = np.dtype(cfg.precision)
        seed = cfg.seed
        m = cfg.model
        v = m.vision
        self.visual = VisionEncoder(v, init_rng(seed, "visual"), dtype=dtype)
        self.text = TextEncoder(m.text, init_rng(seed, "text"), dtype=dtype)
        self.image_head = ProjectionHead(v.width, m.embed_dim, init_rng(seed, "image_head"), dtype=dtype)
        self.text_head = ProjectionHead(m.text.width, m.embed_dim, init_rng(seed, "text_head"), dtype=dtype)
        self.log_temperature = param(np.array(math.log(m.init_temperature), dtype=dtype))
        self.decoder = None
        self.mask_token = None
        self.pixel_head = None
        self.teacher = None
        if cfg.objective in ("clip_pixel", "maskclip"):
            self.decoder = Decoder(v.width, v.heads, v.mlp_ratio, m.decoder_depth,
                                   init_rng(seed, "decoder"), dtype=dtype)
            self.mask_token = param(trunc_normal(init_rng(seed, "mask_token"), (v.width,), dtype=dtype))
        if cfg.objective == "clip_pixel":
            self.pixel_head = Linear(v.width, v.patch_dim, init_rng(seed, "pixel_head"), dtype=dtype)
        if cfg.objective == "maskclip":
            self.teacher = freeze(VisionEncoder(v, init_rng(seed, "visual"), dtype=dtype))
            copy_into(self.visual, self.teacher)

    @property
    def dtype(self):
        return self.log_temperature.dtype

    @property
    def temperature(self):
        return float(np.exp(self.log_temperature.data).reshape(-1)[0])

    def embed_images(self, images):
        feats = self.visual.encode_images(np.asarray(images, dtype=self.dtype))
        return global_image_embedding(feats, self.image_head)

    def embed_texts(self, texts):
        _, eos = self.text.encode_texts(texts)
        return global_text_embedding(eos, self.text_head)

    def losses(self, images, ids, eos, mask_rng):
        """All loss terms for one batch, as a dict of scalar Tensors including ``total``."""
        cfg = self.cfg
        v = cfg.model.vision
        images = np.asarray(images, dtype=self.dtype)
        patches = corpus.patchify(images, v.patch_size)
        feats = self.visual(patches)
        e_img = global_image_embedding(feats, self.image_head)
        _, eos_feats = self.text(ids, eos)
        e_txt = global_text_embedding(eos_feats, self.text_head)
        loss_i, loss_t = contrastive_loss(e_img, e_txt, self.log_temperature)
        out = {"L_I": loss_i, "L_T": loss_t}
        total = loss_i + loss_t
        if cfg.objective != "clip":
            masked, visible = sample_masks(len(images), v.num_patches, cfg.mask_ratio, mask_rng)
            pred = decode_predict(self.visual, self.decoder, patches, visible, self.mask_token)
            if cfg.objective == "maskclip":
                targets = teacher_targets(self.teacher, patches, normalize=cfg.normalize_targets)
                aux = distill_loss(pred, targets, masked, cfg.beta)
                out["L_Dist"] = aux
            else:
                pix = self.pixel_head(pred[:, 1:])
                aux = pixel_reconstruction_loss(pix, patches, masked)
                out["L_Pix"] = aux
            total = total + cfg.lambda_dist * aux
        out["total"] = total
        return out


def combined_loss(model: MaskCLIP, images, ids, eos, mask_rng):
    return model.losses(images, ids, eos, mask_rng)["total"]
