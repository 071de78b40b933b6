"""Compact spatial temporal memory with recurrent joint attention, plus the
four baseline temporal strategies used for comparison.

The memory is a fixed h*w grid of d-wide tokens initialized from a shared
base embedding plus an FFN of the centered grid offset. Each streaming frame
runs one joint self-attention over [frame tokens; memory tokens]; the frame
rows flow onward and the memory rows become the next state, so total state
never grows with stream length.

Baselines (window KV cache, temporal channel shift, sliding raw-frame
window, causal linear attention with running sums) share the same per-site
attention projections read-only and keep their own bounded caches.
"""

from __future__ import annotations

import numpy as np

from . import svdt
from .autodiff import (Tensor, add, concat, elu1, matmul, mul, observers_suspended,
                       recip, split, transpose)
from .nn import FFN2, MultiHeadAttention, gaussian_param, grid_offsets


class SpatialTemporalMemory:
    """Grid memory state: [h*w, d] tokens, shape constant for a stream's life."""

    __slots__ = ("state", "h", "w")

    def __init__(self, state, h, w):
        if state.shape != (h * w, state.shape[-1]):
            raise ValueError(f"memory state {state.shape} is not {h}x{w} tokens")
        self.state = state
        self.h = h
        self.w = w

    def detach_copy(self):
        return SpatialTemporalMemory(self.state.detach(), self.h, self.w)

    def size(self):
        return self.state.data.size

    def to_arrays(self):
        return {"state": self.state.data}


class MemoryParams:
    """Per-insertion-site learnables: base embedding, init FFN, attention."""

    def __init__(self, dim, heads, rng, h, w):
        self.dim = dim
        self.h = h
        self.w = w
        self.w0 = gaussian_param(rng, (dim,))
        self.init_ffn = FFN2(2, dim, dim, rng)
        self.attn = MultiHeadAttention(dim, heads, rng, zero_out=True)

    def named_parameters(self, prefix):
        out = {f"{prefix}.w0": self.w0}
        out.update(self.init_ffn.named_parameters(f"{prefix}.init_ffn"))
        out.update(self.attn.named_parameters(f"{prefix}.attn"))
        return out


def memory_init(params, h, w):
    """Fresh memory: every cell is w0 + FFN(centered grid offset)."""
    if h < 1 or w < 1:
        raise ValueError(f"grid dims must be positive, got {h}x{w}")
    offsets = Tensor(grid_offsets(h, w))
    state = add(params.init_ffn(offsets), params.w0)
    return SpatialTemporalMemory(state, h, w)


def memory_attention(frame_tokens, mem, params):
    """Joint self-attention over [frame; memory]; split back into both parts.

    Returns the raw attention rows: (frame part [p, d], next memory). How the
    caller folds them in (residual vs replacement) is the insertion policy.
    """
    if frame_tokens.shape[-1] != mem.state.shape[-1]:
        raise ValueError(
            f"frame width {frame_tokens.shape[-1]} != memory width {mem.state.shape[-1]}")
    p = frame_tokens.shape[0]
    joint = concat([frame_tokens, mem.state], axis=0)
    out = params.attn(joint)
    frame_part, mem_part = split(out, [p, mem.h * mem.w], axis=0)
    return frame_part, SpatialTemporalMemory(mem_part, mem.h, mem.w)


def propagate_across_clips(mem):
    """Hand the value across a clip boundary; gradient flow is severed."""
    return mem.detach_copy()


class MemoryBank:
    """Per-stream map from (layer, step slot, branch) to a state object.

    Counts recurrence updates per key so tests can probe that every branch
    advances exactly once per frame. Total size never depends on how many
    frames have been absorbed.
    """

    def __init__(self):
        self.entries = {}
        self.update_counts = {}

    def get_or_init(self, key, factory):
        if key not in self.entries:
            with observers_suspended():  # one-time setup, not per-frame cost
                self.entries[key] = factory()
            self.update_counts[key] = 0
        return self.entries[key]

    def update(self, key, state):
        self.entries[key] = state
        self.update_counts[key] = self.update_counts.get(key, 0) + 1

    def reset(self):
        self.entries.clear()
        self.update_counts.clear()

    def detach_all(self):
        for key, state in self.entries.items():
            if isinstance(state, SpatialTemporalMemory):
                self.entries[key] = propagate_across_clips(state)

    def state_size(self):
        return sum(state.size() for state in self.entries.values())

    # -- snapshots: SVDT container keyed "layer.step.branch[/part]" ---------

    def snapshot(self, path, extra=None):
        tensors = {}
        kinds = {}
        for (layer, step, branch), state in self.entries.items():
            base = f"{layer}.{step}.{branch}"
            kinds[base] = type(state).__name__
            arrays = state.to_arrays()
            for part, arr in arrays.items():
                name = base if part == "state" and len(arrays) == 1 else f"{base}/{part}"
                tensors[name] = arr
        meta = {"kind": "bank-snapshot", "keys": kinds,
                "counts": {f"{k[0]}.{k[1]}.{k[2]}": c for k, c in self.update_counts.items()}}
        if extra:
            meta.update(extra)
        svdt.write_named_tensors(path, tensors, header_extra=meta)

    @staticmethod
    def parse_key(name):
        layer, step, branch = name.split(".")
        return int(layer), int(step), branch


def bank_get_or_init(bank, key, params):
    """Existing state for the key, or a fresh grid memory recorded in the bank."""
    return bank.get_or_init(key, lambda: memory_init(params, params.h, params.w))


# ---------------------------------------------------------------------------
# Baseline temporal strategies
# ---------------------------------------------------------------------------

BASELINE_VARIANTS = ("window_kv", "temporal_shift", "sliding_window", "linear_attention")


class UninitializedStateError(RuntimeError):
    pass


class BaselineState:
    """Base for variant-specific bounded caches; step() consumes one frame."""

    variant = None

    def step(self, frame_tokens):
        raise NotImplementedError

    def size(self):
        raise NotImplementedError

    def to_arrays(self):
        raise NotImplementedError


class WindowKVState(BaselineState):
    """Attend over self plus the cached keys/values of the previous W frames."""

    variant = "window_kv"

    def __init__(self, attn, window=3):
        if attn is None:
            raise UninitializedStateError("window_kv needs attention parameters")
        self.attn = attn
        self.window = window
        self.cache = []  # list of (k, v) float32 arrays, oldest first

    def step(self, frame_tokens):
        k_cur = self.attn.k_proj(frame_tokens)
        v_cur = self.attn.v_proj(frame_tokens)
        ks = [Tensor(k) for k, _ in self.cache] + [k_cur]
        vs = [Tensor(v) for _, v in self.cache] + [v_cur]
        k_all = concat(ks, axis=0) if len(ks) > 1 else ks[0]
        v_all = concat(vs, axis=0) if len(vs) > 1 else vs[0]
        out = self.attn.attend_kv(frame_tokens, k_all, v_all)
        self.cache.append((k_cur.data.copy(), v_cur.data.copy()))
        if len(self.cache) > self.window:
            self.cache.pop(0)
        return add(frame_tokens, out)

    def size(self):
        return sum(k.size + v.size for k, v in self.cache)

    def to_arrays(self):
        out = {}
        for i, (k, v) in enumerate(self.cache):
            out[f"k{i}"] = k
            out[f"v{i}"] = v
        return out


class TemporalShiftState(BaselineState):
    """Replace the first ceil(d/8) channels with the previous frame's cache."""

    variant = "temporal_shift"

    def __init__(self, dim, fraction=8):
        self.dim = dim
        self.shift = -(-dim // fraction)  # ceil
        self.prev = None  # [p, shift] from the previous frame's input

    def step(self, frame_tokens):
        p, d = frame_tokens.shape
        if d != self.dim:
            raise ValueError(f"temporal_shift: token width {d} != {self.dim}")
        head, tail = split(frame_tokens, [self.shift, d - self.shift], axis=-1)
        if self.prev is None:
            carried = Tensor(np.zeros((p, self.shift), dtype=np.float32))
        else:
            carried = Tensor(self.prev)
        self.prev = head.data.copy()
        return concat([carried, tail], axis=-1)

    def size(self):
        return 0 if self.prev is None else self.prev.size

    def to_arrays(self):
        return {} if self.prev is None else {"prev": self.prev}


class SlidingWindowState(BaselineState):
    """Buffer the last W raw frames and recompute joint attention over them."""

    variant = "sliding_window"

    def __init__(self, attn, window=3):
        if attn is None:
            raise UninitializedStateError("sliding_window needs attention parameters")
        self.attn = attn
        self.window = window
        self.buffer = []  # raw token arrays, oldest first

    def step(self, frame_tokens):
        self.buffer.append(frame_tokens.data.copy())
        if len(self.buffer) > self.window:
            self.buffer.pop(0)
        frames = [Tensor(f) for f in self.buffer[:-1]] + [frame_tokens]
        joint = concat(frames, axis=0) if len(frames) > 1 else frames[0]
        out = self.attn.attend(joint, joint)
        p = frame_tokens.shape[0]
        cur = split(out, [out.shape[0] - p, p], axis=0)[1] if out.shape[0] > p else out
        return add(frame_tokens, cur)

    def size(self):
        return sum(f.size for f in self.buffer)

    def to_arrays(self):
        return {f"f{i}": f for i, f in enumerate(self.buffer)}


class LinearAttentionState(BaselineState):
    """Causal linear attention: phi(x)=elu(x)+1 with running phi(K)^T V sums."""

    variant = "linear_attention"

    def __init__(self, attn):
        if attn is None:
            raise UninitializedStateError("linear_attention needs attention parameters")
        self.attn = attn
        hd = attn.head_dim
        self.S = [np.zeros((hd, hd), dtype=np.float32) for _ in range(attn.heads)]
        self.z = [np.zeros((hd, 1), dtype=np.float32) for _ in range(attn.heads)]

    def step(self, frame_tokens):
        a = self.attn
        q = a.q_proj(frame_tokens)
        k = a.k_proj(frame_tokens)
        v = a.v_proj(frame_tokens)
        ones = Tensor(np.ones((frame_tokens.shape[0], 1), dtype=np.float32))
        outs = []
        for h, (qh, kh, vh) in enumerate(zip(a._heads(q), a._heads(k), a._heads(v))):
            phi_k = elu1(kh)
            s_new = add(Tensor(self.S[h]), matmul(transpose(phi_k), vh))
            z_new = add(Tensor(self.z[h]), matmul(transpose(phi_k), ones))
            self.S[h] = s_new.data.copy()
            self.z[h] = z_new.data.copy()
            phi_q = elu1(qh)
            num = matmul(phi_q, s_new)
            den = matmul(phi_q, z_new)
            outs.append(mul(num, recip(den)))
        out = a.out_proj(concat(outs, axis=-1))
        return add(frame_tokens, out)

    def size(self):
        return sum(s.size for s in self.S) + sum(z.size for z in self.z)

    def to_arrays(self):
        out = {}
        for h in range(len(self.S)):
            out[f"S{h}"] = self.S[h]
            out[f"z{h}"] = self.z[h]
        return out


def make_baseline_state(variant, attn=None, dim=None, window=3):
    if variant == "window_kv":
        return WindowKVState(attn, window=window)
    if variant == "temporal_shift":
        if dim is None:
            raise UninitializedStateError("temporal_shift needs the token width")
        return TemporalShiftState(dim)
    if variant == "sliding_window":
        return SlidingWindowState(attn, window=window)
    if variant == "linear_attention":
        return LinearAttentionState(attn)
    raise ValueError(f"unknown baseline variant {variant!r}")


def baseline_step(state, frame_tokens):
    """One causal update; returns (new frame tokens, the same mutated state)."""
    if not isinstance(state, BaselineState):
        raise UninitializedStateError("baseline state not initialized")
    return state.step(frame_tokens), state
