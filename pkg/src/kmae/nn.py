"""Transformer building blocks on top of :mod:`kmae.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


def trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Module:
    """Parameter container; parameters and submodules are plain attributes."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(arr):
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype=np.float32, std=0.02):
        self.weight = _param(trunc_normal(rng, (d_in, d_out), std, dtype))
        self.bias = _param(np.zeros(d_out, dtype=dtype))

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32, eps=1e-5):
        self.gain = _param(np.ones(d, dtype=dtype))
        self.bias = _param(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def multi_head_attention(x: Tensor, wq, bq, wk, bk, wv, bv, wo, bo, heads: int) -> Tensor:
    """Scaled dot-product self-attention over the rows of ``x`` [s, d]."""
    s, d = x.shape
    if d % heads:
        raise ConfigError(f"embedding dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return t.reshape(s, heads, dh).transpose(1, 0, 2)

    q = split(T.matmul(x, wq) + bq)
    k = split(T.matmul(x, wk) + bk)
    v = split(T.matmul(x, wv) + bv)
    scores = T.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    att = T.softmax_rows(scores)
    ctx = T.matmul(att, v).transpose(1, 0, 2).reshape(s, d)
    return T.matmul(ctx, wo) + bo


class Attention(Module):
    def __init__(self, rng, d, heads, dtype=np.float32):
        if d % heads:
            raise ConfigError(f"embedding dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, d, d, dtype)
        self.k = Linear(rng, d, d, dtype)
        self.v = Linear(rng, d, d, dtype)
        self.out = Linear(rng, d, d, dtype)

    def __call__(self, x):
        return multi_head_attention(
            x,
            self.q.weight, self.q.bias,
            self.k.weight, self.k.bias,
            self.v.weight, self.v.bias,
            self.out.weight, self.out.bias,
            self.heads,
        )


class MLP(Module):
    def __init__(self, rng, d, hidden, dtype=np.float32):
        self.fc1 = Linear(rng, d, hidden, dtype)
        self.fc2 = Linear(rng, hidden, d, dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng, d, heads, mlp_ratio=4, dtype=np.float32):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = Attention(rng, d, heads, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.mlp = MLP(rng, d, mlp_ratio * d, dtype)

    def __call__(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, padding=0, dtype=np.float32):
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = _param((rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype))
        self.bias = _param(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ResidualBlock(Module):
    """Basic two-conv residual block with a projection shortcut when shapes change."""

    def __init__(self, rng, c_in, c_out, stride=1, dtype=np.float32):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride, 1, dtype)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1, 1, dtype)
        self.conv2.weight.data *= 0.5
        self.shortcut = Conv2d(rng, c_in, c_out, 1, stride, 0, dtype) if (stride != 1 or c_in != c_out) else None

    def __call__(self, x):
        h = self.conv2(T.relu(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return T.relu(h + skip)
