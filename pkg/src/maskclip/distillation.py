"""Mean-teacher maintenance, teacher targets, the feature decoder and the masked distillation loss."""

from __future__ import annotations

import numpy as np

from .masking import assemble_for_decoder, pack_visible
from .nn import Block, LayerNorm, Module
from .numerics import Tensor, no_grad, ops


def alpha_at(step, total_steps, start=0.999, end=0.9999):
    """EMA weight for the update with 0-based index ``step``; linear from start to end."""
    if total_steps <= 1:
        return end
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return start + (end - start) * t


def ema_update(student: Module, teacher: Module, alpha: float) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, parameter by parameter, in place."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    s = dict(student.named_parameters())
    t = dict(teacher.named_parameters())
    if s.keys() != t.keys():
        raise KeyError("student and teacher parameter trees differ")
    for name, tp in t.items():
        sp = s[name]
        if sp.shape != tp.shape:
            raise ValueError(f"{name}: student {sp.shape} vs teacher {tp.shape}")
        tp.data[...] = alpha * tp.data + (1.0 - alpha) * sp.data


def freeze(module: Module) -> Module:
    for p in module.parameters():
        p.requires_grad = False
        p.grad = None
    return module


def copy_into(src: Module, dst: Module) -> None:
    dst.load_state_dict(src.state_dict())


def teacher_targets(teacher, patches, normalize=False):
    """Full-image teacher features (B, N+1, W), detached from every tape."""
    with no_grad():
        feats = teacher(patches)
    out = feats.data
    if normalize:
        mu = out.mean(axis=-1, keepdims=True)
        var = out.var(axis=-1, keepdims=True)
        out = (out - mu) / np.sqrt(var + 1e-6)
    return Tensor(out)


class Decoder(Module):
    """Transformer block(s) plus final layer norm over the assembled full-length sequence."""

    def __init__(self, width, heads, mlp_ratio, depth, rng, dtype=np.float64):
        self.blocks = [Block(width, heads, mlp_ratio, rng, dtype=dtype) for _ in range(depth)]
        self.ln_final = LayerNorm(width, dtype=dtype)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.ln_final(x)


def decode_predict(student, decoder, patches, visible, mask_token):
    """Student sees only visible patches; decoder predicts all N+1 slots."""
    packed, positions = pack_visible(patches, visible)
    feats = student(packed, positions)
    full = assemble_for_decoder(feats, positions, mask_token, student.pos_embed)
    return decoder(full)


def distill_loss(pred, targets, masked, beta=2.0):
    """Mean smooth-L1 between predictions and stop-gradient targets on masked slots.

    Averages over the feature axis, the masked set and the batch. An empty
    mask yields exactly 0.
    """
    if pred.shape[-1] != targets.shape[-1]:
        raise ValueError(f"width mismatch: predictions {pred.shape} vs targets {targets.shape}")
    masked = np.asarray(masked)
    if masked.ndim == 1:
        masked = masked[None]
    if masked.size == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    b = np.arange(masked.shape[0])[:, None]
    p = pred[b, masked]
    t = ops.stop_gradient(targets)[b, masked]
    return ops.smooth_l1(p, t, beta).mean()
