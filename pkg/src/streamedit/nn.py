"""Neural building blocks assembled from the tensor primitives.

Linear layers, multi-head self/cross attention with shared projections,
pre-norm transformer blocks with additive conditioning, and the embedding
tables (prompt rows with a dedicated null row 0, sinusoidal time MLP, and a
small FFN over centered 2-d grid offsets used for both patch positions and
memory initialization).
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import (Tensor, add, concat, gelu, layernorm, matmul, mul,
                       reshape, scale, softmax, split, transpose)

INIT_STD = 0.02


def gaussian_param(rng, shape, std=INIT_STD):
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones_param(shape):
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Linear:
    """y = x W^T + b with weight [out, in]."""

    def __init__(self, in_dim, out_dim, rng=None, zero_init=False, trainable=True):
        if zero_init or rng is None:
            self.weight = zeros_param((out_dim, in_dim))
        else:
            self.weight = gaussian_param(rng, (out_dim, in_dim))
        self.bias = zeros_param((out_dim,))
        self.trainable = trainable

    def __call__(self, x):
        return add(matmul(x, transpose(self.weight)), self.bias)

    def named_parameters(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class FFN2:
    """Two linear layers with a GELU between them."""

    def __init__(self, in_dim, hidden, out_dim, rng=None, zero_out=False):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng, zero_init=zero_out)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))

    def named_parameters(self, prefix):
        out = self.fc1.named_parameters(f"{prefix}.fc1")
        out.update(self.fc2.named_parameters(f"{prefix}.fc2"))
        return out


class MultiHeadAttention:
    """Shared q/k/v/out projections over one token sequence or a kv cache."""

    def __init__(self, dim, heads, rng=None, zero_out=True):
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng, zero_init=zero_out)

    def _heads(self, x):
        return split(x, [self.head_dim] * self.heads, axis=-1)

    def attend_kv(self, q_tokens, k, v):
        """Attention of q_tokens against precomputed projected keys/values."""
        if q_tokens.shape[-1] != self.dim:
            raise ad.ShapeMismatchError(
                f"attention: token width {q_tokens.shape[-1]} != model dim {self.dim}")
        q = self.q_proj(q_tokens)
        inv_sqrt = 1.0 / math.sqrt(self.head_dim)
        outs = []
        for qh, kh, vh in zip(self._heads(q), self._heads(k), self._heads(v)):
            scores = scale(matmul(qh, transpose(kh)), inv_sqrt)
            outs.append(matmul(softmax(scores), vh))
        return self.out_proj(concat(outs, axis=-1))

    def attend(self, q_tokens, kv_tokens):
        return self.attend_kv(q_tokens, self.k_proj(kv_tokens), self.v_proj(kv_tokens))

    def __call__(self, tokens):
        return self.attend(tokens, tokens)

    def named_parameters(self, prefix):
        out = {}
        for name, lin in (("q", self.q_proj), ("k", self.k_proj),
                          ("v", self.v_proj), ("out", self.out_proj)):
            out.update(lin.named_parameters(f"{prefix}.{name}"))
        return out


class LayerNormParams:
    def __init__(self, dim):
        self.gamma = ones_param((dim,))
        self.beta = zeros_param((dim,))

    def __call__(self, x):
        return add(mul(layernorm(x), self.gamma), self.beta)

    def named_parameters(self, prefix):
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


class TransformerBlock:
    """Pre-norm residual block; conditioning vector added before the attn norm.

    With the attention and FFN output projections zero-initialized the block
    is exactly the identity map.
    """

    def __init__(self, dim, heads, rng, ffn_mult=4):
        self.attn = MultiHeadAttention(dim, heads, rng, zero_out=True)
        self.norm1 = LayerNormParams(dim)
        self.norm2 = LayerNormParams(dim)
        self.ffn = FFN2(dim, ffn_mult * dim, dim, rng, zero_out=True)

    def __call__(self, tokens, cond):
        h = self.norm1(add(tokens, cond))
        x1 = add(tokens, self.attn(h))
        return add(x1, self.ffn(self.norm2(x1)))

    def named_parameters(self, prefix):
        out = self.attn.named_parameters(f"{prefix}.attn")
        out.update(self.norm1.named_parameters(f"{prefix}.norm1"))
        out.update(self.norm2.named_parameters(f"{prefix}.norm2"))
        out.update(self.ffn.named_parameters(f"{prefix}.ffn"))
        return out


def pos2d(i, j, h, w):
    """Grid offset relative to the map center, as a [2] tensor."""
    if not (0 <= i < h and 0 <= j < w):
        raise IndexError(f"grid position ({i},{j}) outside {h}x{w}")
    return Tensor(np.array([i - h / 2.0, j - w / 2.0], dtype=np.float32))


def grid_offsets(h, w):
    """All h*w centered offsets, raster order, as an [h*w, 2] array."""
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([ii - h / 2.0, jj - w / 2.0], axis=-1).reshape(h * w, 2).astype(np.float32)


def sinusoidal_encoding(t, dim):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


class EmbeddingTables:
    """Prompt rows (row 0 is the null prompt), time MLP, and patch positions."""

    NULL_PROMPT = 0

    def __init__(self, vocab_size, dim, rng):
        self.vocab_size = vocab_size
        self.dim = dim
        self.prompt_table = gaussian_param(rng, (vocab_size, dim))
        self.time_mlp = FFN2(dim, dim, dim, rng)
        self.pos_ffn = FFN2(2, dim, dim, rng)

    def prompt_embedding(self, index):
        if index is None:
            index = self.NULL_PROMPT
        if not 0 <= index < self.vocab_size:
            raise IndexError(f"prompt index {index} outside vocabulary of {self.vocab_size}")
        row = split(self.prompt_table, [1] * self.vocab_size, axis=0)[index]
        return reshape(row, (self.dim,))

    def time_embedding(self, t, total_steps):
        if not 1 <= t <= total_steps:
            raise IndexError(f"time step {t} outside 1..{total_steps}")
        enc = Tensor(sinusoidal_encoding(float(t), self.dim).reshape(1, -1))
        return reshape(self.time_mlp(enc), (self.dim,))

    def position_embedding(self, h, w):
        """[h*w, d] embedding of the centered grid offsets."""
        return self.pos_ffn(Tensor(grid_offsets(h, w)))

    def named_parameters(self, prefix):
        out = {f"{prefix}.prompt_table": self.prompt_table}
        out.update(self.time_mlp.named_parameters(f"{prefix}.time_mlp"))
        out.update(self.pos_ffn.named_parameters(f"{prefix}.pos_ffn"))
        return out
