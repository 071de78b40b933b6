"""The online editing state machine: per-frame inversion, dual-memory CFG
denoising, strictly causal and constant-state.

Each frame is deterministically inverted up the step subset (its own memory
branch, null prompt), then denoised back down with a conditional and an
unconditional pass per step, combined by classifier-free guidance. Every
(layer, step slot, branch) triple owns an independent temporal state in the
session bank; branches never alias. Temporal strategy is pluggable: the grid
memory, the four bounded-cache baselines, or none.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import svdt
from .autodiff import Tensor
from .diffusion import cfg_combine, ddim_invert_step, ddim_step
from .memory import (BASELINE_VARIANTS, MemoryBank, SpatialTemporalMemory,
                     baseline_step, make_baseline_state)
from .metrics import FlopCounter

STRATEGIES = ("svdiff",) + BASELINE_VARIANTS + ("none",)


class SessionError(RuntimeError):
    pass


@dataclass
class FrameResult:
    frame: np.ndarray
    eps_norms: list = field(default_factory=list)
    flops: int = 0
    latency_s: float = 0.0
    state_size: int = 0


class EditSession:
    """One causal stream: frames go in one at a time, edits come out."""

    def __init__(self, model, sched, guidance, prompt, strategy="svdiff",
                 invert_with_memory=True, window=3):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
        if not 0 <= prompt < model.cfg.vocab_size:
            raise IndexError(f"prompt index {prompt} outside vocabulary")
        guidance.validate_against(sched)
        self.model = model
        self.sched = sched
        self.guidance = guidance
        self.prompt = int(prompt)
        self.strategy = strategy
        self.invert_with_memory = invert_with_memory
        self.window = window
        self.bank = MemoryBank()
        self.n = 0

    # -- temporal hooks ------------------------------------------------------

    def _hook(self, branch, slot):
        if self.strategy == "none":
            return None
        if self.strategy == "svdiff":
            return self.model.memory_hook(self.bank, branch, slot)
        variant = self.strategy

        def hook(layer, tokens):
            key = (layer, slot, branch)
            state = self.bank.get_or_init(key, lambda: make_baseline_state(
                variant, attn=self.model.mem[layer].attn,
                dim=self.model.cfg.dim, window=self.window))
            tokens, state = baseline_step(state, tokens)
            self.bank.update(key, state)
            return tokens

        return hook

    def _forward(self, x, t, prompt, branch, slot):
        hook = self._hook(branch, slot)
        if branch == "invert" and not self.invert_with_memory:
            hook = None
        return self.model.forward(x, t, prompt, hook)

    # -- frame processing ----------------------------------------------------

    def process_frame(self, frame):
        """Invert, guide, denoise one frame; advances every branch once."""
        want = (self.model.cfg.channels, self.model.cfg.image_size,
                self.model.cfg.image_size)
        arr = np.asarray(frame, dtype=np.float32)
        if arr.shape != want:
            raise ValueError(f"frame {self.n}: shape {arr.shape} != {want}")
        counter = FlopCounter()
        started = time.perf_counter()
        steps = self.guidance.steps
        eps_norms = []
        with counter.counting():
            x = Tensor(arr)
            prev = 0
            for slot, t in enumerate(steps):
                eps = self._forward(x, t, None, "invert", slot)
                x = ddim_invert_step(x, prev, t, eps, self.sched)
                prev = t
            for slot in range(len(steps) - 1, -1, -1):
                t = steps[slot]
                t_prev = steps[slot - 1] if slot > 0 else 0
                eps_c = self._forward(x, t, self.prompt, "cond", slot)
                eps_uc = self._forward(x, t, None, "uncond", slot)
                eps = cfg_combine(eps_c, eps_uc, self.guidance.lam)
                eps_norms.append(float(np.sqrt(np.mean(np.square(eps.data)))))
                x = ddim_step(x, t, t_prev, eps, self.sched)
        self.n += 1
        return FrameResult(frame=x.data.copy(), eps_norms=eps_norms,
                           flops=counter.total,
                           latency_s=time.perf_counter() - started,
                           state_size=self.bank.state_size())

    def process_stream(self, frames):
        return [self.process_frame(f) for f in frames]

    def reset(self):
        self.bank.reset()
        self.n = 0
        return self

    # -- checkpoint / resume of a live stream --------------------------------

    def snapshot(self, path):
        self.bank.snapshot(path, extra={
            "frame_counter": self.n, "strategy": self.strategy,
            "prompt": self.prompt, "lam": self.guidance.lam,
            "steps": self.guidance.steps, "window": self.window,
        })

    def restore(self, path):
        tensors, header = svdt.read_named_tensors(path)
        meta = header.get("meta", {})
        if meta.get("kind") != "bank-snapshot":
            raise svdt.MalformedFileError("not a bank snapshot")
        if meta.get("strategy") != self.strategy:
            raise SessionError(
                f"snapshot strategy {meta.get('strategy')!r} != session {self.strategy!r}")
        self.bank.reset()
        grouped = {}
        for name, arr in tensors.items():
            base, _, part = name.partition("/")
            grouped.setdefault(base, {})[part or "state"] = arr
        for base, parts in grouped.items():
            key = MemoryBank.parse_key(base)
            self.bank.entries[key] = self._rebuild_state(key, parts)
            self.bank.update_counts[key] = meta.get("counts", {}).get(base, 0)
        self.n = int(meta["frame_counter"])
        return self

    def _rebuild_state(self, key, parts):
        if self.strategy == "svdiff":
            cfg = self.model.cfg
            return SpatialTemporalMemory(Tensor(parts["state"]), cfg.mem_h, cfg.mem_w)
        layer = key[0]
        state = make_baseline_state(self.strategy, attn=self.model.mem[layer].attn,
                                    dim=self.model.cfg.dim, window=self.window)
        if self.strategy == "window_kv":
            i = 0
            while f"k{i}" in parts:
                state.cache.append((parts[f"k{i}"], parts[f"v{i}"]))
                i += 1
        elif self.strategy == "temporal_shift":
            state.prev = parts.get("prev")
        elif self.strategy == "sliding_window":
            i = 0
            while f"f{i}" in parts:
                state.buffer.append(parts[f"f{i}"])
                i += 1
        elif self.strategy == "linear_attention":
            for h in range(self.model.mem[layer].attn.heads):
                state.S[h] = parts[f"S{h}"]
                state.z[h] = parts[f"z{h}"]
        return state


def open_session(model, sched, guidance, prompt, strategy="svdiff", **kw):
    return EditSession(model, sched, guidance, prompt, strategy, **kw)


def process_frame(session, frame):
    return session.process_frame(frame)


def reset_session(session):
    return session.reset()
