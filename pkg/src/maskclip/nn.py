"""Minimal module system and transformer layers on top of the numerics tape."""

from __future__ import annotations

import zlib

import numpy as np

from .numerics import Tensor, ops


def init_rng(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream per (seed, component name).

    Components draw from their own stream so that adding or removing one
    component (e.g. the decoder) leaves every other initialisation unchanged.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def trunc_normal(rng, shape, std=0.02, dtype=np.float64):
    """Normal(0, std) truncated at two standard deviations (resampled, not clipped)."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(dtype)


def param(data):
    return Tensor(np.ascontiguousarray(data), requires_grad=True)


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable(self):
        return [(k, p) for k, p in self.named_parameters() if p.requires_grad]

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for k, p in own.items():
            src = np.asarray(state[k])
            if src.shape != p.shape:
                raise ValueError(f"{k}: shape {src.shape} != {p.shape}")
            p.data[...] = src

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float64):
        self.weight = param(trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.bias = param(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, width, dtype=np.float64):
        self.weight = param(np.ones(width, dtype=dtype))
        self.bias = param(np.zeros(width, dtype=dtype))

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias)


class Attention(Module):
    """Multi-head self-attention with query and value biases.

    A key bias only shifts every score in a row by the same amount, which the
    softmax cancels, so it is left out.
    """

    def __init__(self, width, heads, rng, dtype=np.float64):
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng, bias=False, dtype=dtype)
        self.q_bias = param(np.zeros(width, dtype=dtype))
        self.v_bias = param(np.zeros(width, dtype=dtype))
        self._k_zero = Tensor(np.zeros(width, dtype=dtype))
        self.proj = Linear(width, width, rng, dtype=dtype)

    def forward(self, x, keep=None):
        B, T, W = x.shape
        H = self.heads
        D = W // H
        bias = ops.concat([self.q_bias, self._k_zero, self.v_bias])
        qkv = (self.qkv(x) + bias).reshape(B, T, 3, H, D).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ ops.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(D))
        attn = ops.softmax(scores, axis=-1, keep=keep)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, W)
        return self.proj(out)


class MLP(Module):
    def __init__(self, width, hidden, rng, dtype=np.float64):
        self.fc1 = Linear(width, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, width, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, width, heads, mlp_ratio, rng, dtype=np.float64):
        self.ln1 = LayerNorm(width, dtype=dtype)
        self.attn = Attention(width, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(width, dtype=dtype)
        self.mlp = MLP(width, width * mlp_ratio, rng, dtype=dtype)

    def forward(self, x, keep=None):
        x = x + self.attn(self.ln1(x), keep=keep)
        return x + self.mlp(self.ln2(x))
