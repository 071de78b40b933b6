"""Two-phase training.

Phase "base" trains the image denoiser on single frames with streaming off.
Phase "memory" freezes the base and trains only the memory set, walking long
videos clip by clip: one shared timestep per video iteration, a fresh bank
per video, full backprop within a clip, value-only memory hand-off across
clip boundaries. Each training step's randomness is a pure function of
(seed, step index), so resuming from a saved optimizer state is bit-exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, backward, scale, tape
from .diffusion import q_sample, recon_loss
from .memory import MemoryBank
from .model import denoise_forward, partition_parameters
from .rng import TRAIN_BASE, TRAIN_MEMORY, philox
from .video import split_into_clips


class DivergenceError(RuntimeError):
    """Loss became non-finite."""


class PhaseError(ValueError):
    """Training entry point called with the wrong phase configuration."""


@dataclass
class TrainConfig:
    phase: str = "base"  # "base" | "memory"
    lr: float = 1e-4
    steps: int = 200
    batch_size: int = 4
    clip_len: int = 8
    video_len: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    null_prompt_prob: float = 0.1
    t_subset: tuple = ()  # memory phase: restrict t to the inference steps

    def __post_init__(self):
        if self.phase not in ("base", "memory"):
            raise PhaseError(f"unknown phase {self.phase!r}")
        if self.lr < 0 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("hyperparameters must be positive (lr may be zero)")
        if self.clip_len < 1 or self.clip_len > self.video_len:
            raise ValueError("need 1 <= clip_len <= video_len")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    first_decile_mean: float = float("nan")
    last_decile_mean: float = float("nan")
    start_step: int = 0
    steps_run: int = 0

    def finish(self, started):
        self.wall_clock_s = time.perf_counter() - started
        k = max(1, len(self.losses) // 10)
        if self.losses:
            self.first_decile_mean = float(np.mean(self.losses[:k]))
            self.last_decile_mean = float(np.mean(self.losses[-k:]))
        return self


class Adam:
    """Plain Adam over a name->Tensor dict; float32 state, deterministic."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.count = 0

    def apply(self, grads):
        """grads: name -> float32 array (missing names are skipped)."""
        self.count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.count
        bc2 = 1.0 - b2 ** self.count
        for name, g in grads.items():
            p = self.params[name]
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            step = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = (p.data - step).astype(np.float32)

    def state_arrays(self):
        out = {}
        for n in self.params:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays, count):
        for n in self.params:
            self.m[n] = arrays[f"m.{n}"].astype(np.float32)
            self.v[n] = arrays[f"v.{n}"].astype(np.float32)
        self.count = count


def sample_timestep(rng, steps):
    """Uniform draw from the configured step subset."""
    steps = list(steps)
    if not steps:
        raise ValueError("step subset is empty")
    return int(steps[rng.integers(len(steps))])


def _check_finite(value, step):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at step {step}")


def _grad_arrays(grads, params):
    return {n: grads[p].data for n, p in params.items()}


def train_base(model, videos, sched, cfg, optimizer=None, start_step=0):
    """Single-frame noise-prediction training of the base parameter set.

    Memory parameters are untouched bit-exactly: streaming is off, and the
    optimizer only covers the base partition. Returns (report, optimizer).
    """
    if cfg.phase != "base":
        raise PhaseError("train_base needs phase='base'")
    base, _ = partition_parameters(model)
    opt = optimizer or Adam(base, cfg.lr, cfg.beta1, cfg.beta2)
    report = TrainReport(start_step=start_step)
    started = time.perf_counter()
    pool = [(vi, fi) for vi, v in enumerate(videos) for fi in range(v.num_frames)]
    for step in range(start_step, cfg.steps):
        rng = philox(cfg.seed, TRAIN_BASE, step)
        with tape():
            total = None
            for _ in range(cfg.batch_size):
                vi, fi = pool[rng.integers(len(pool))]
                video = videos[vi]
                prompt = video.prompt
                if rng.random() < cfg.null_prompt_prob:
                    prompt = 0
                t = int(rng.integers(1, sched.T + 1))
                frame = Tensor(video.frames[fi])
                eps = Tensor(rng.normal(size=frame.shape).astype(np.float32))
                x_t = q_sample(frame, t, eps, sched)
                eps_hat, _ = denoise_forward(model, x_t, t, prompt, None)
                term = recon_loss(eps, eps_hat)
                total = term if total is None else add(total, term)
            loss = scale(total, 1.0 / cfg.batch_size)
            _check_finite(loss.item(), step)
            grads = backward(loss, base.values())
        opt.apply(_grad_arrays(grads, base))
        report.losses.append(loss.item())
    report.steps_run = cfg.steps - start_step
    return report.finish(started), opt


def train_memory_segment_level(model, videos, sched, cfg, optimizer=None,
                               start_step=0):
    """Clip-by-clip recurrent training of the memory set on long videos.

    Per iteration: one video, one timestep shared by every frame, a fresh
    bank; each clip accumulates the per-frame noise loss and backpropagates,
    then the bank detaches for the next clip. Returns (report, optimizer).
    """
    if cfg.phase != "memory":
        raise PhaseError("train_memory_segment_level needs phase='memory'")
    if not cfg.t_subset:
        raise ValueError("memory phase requires a t_subset (streaming on)")
    t_subset = [int(t) for t in cfg.t_subset]
    base, memp = partition_parameters(model)
    if not memp:
        raise ValueError("model has no memory parameters")
    opt = optimizer or Adam(memp, cfg.lr, cfg.beta1, cfg.beta2)
    report = TrainReport(start_step=start_step)
    started = time.perf_counter()
    for step in range(start_step, cfg.steps):
        rng = philox(cfg.seed, TRAIN_MEMORY, step)
        video = videos[rng.integers(len(videos))]
        t = sample_timestep(rng, t_subset)
        slot = t_subset.index(t)
        prompt = video.prompt
        if rng.random() < cfg.null_prompt_prob:
            prompt = 0
        bank = MemoryBank()
        for clip in split_into_clips(video, cfg.clip_len):
            with tape():
                total = None
                for fi in range(clip.num_frames):
                    frame = Tensor(clip.frames[fi])
                    eps = Tensor(rng.normal(size=frame.shape).astype(np.float32))
                    x_t = q_sample(frame, t, eps, sched)
                    eps_hat, _ = denoise_forward(model, x_t, t, prompt, bank,
                                                 "cond", slot)
                    term = recon_loss(eps, eps_hat)
                    total = term if total is None else add(total, term)
                loss = scale(total, 1.0 / clip.num_frames)
                _check_finite(loss.item(), step)
                grads = backward(loss, memp.values())
            opt.apply(_grad_arrays(grads, memp))
            bank.detach_all()
            report.losses.append(loss.item())
    report.steps_run = cfg.steps - start_step
    return report.finish(started), opt
