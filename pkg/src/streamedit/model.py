"""The streaming noise-prediction model.

Frames are patch-tokenized, conditioned additively on (time embedding +
prompt embedding), run through a stack of transformer blocks, and projected
back to frame layout by a zero-initialized head. A temporal hook may be
installed after each block; the grid-memory hook performs the recurrent
joint attention and writes the updated memory back into the caller's bank.
In the default residual mode both the frame rows and the memory rows are
folded in residually, so a zero-initialized insertion is exactly inert;
replacement mode applies the raw concat-split update instead.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import svdt
from .autodiff import Tensor, add, permute
from .memory import MemoryParams, SpatialTemporalMemory, bank_get_or_init, memory_attention
from .nn import EmbeddingTables, Linear, TransformerBlock
from .rng import INIT, philox
from .video import PROMPTS


@dataclass
class DenoiserConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    dim: int = 64
    layers: int = 4
    heads: int = 4
    total_steps: int = 100
    mem_h: int = 8
    mem_w: int = 8
    vocab_size: int = len(PROMPTS)
    ffn_mult: int = 4
    memory_residual: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 2 != 0:
            raise ValueError("dim must be even for the sinusoidal encoding")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.channels * self.patch_size * self.patch_size


def _patch_permutations(cfg):
    """Flat index maps between [C,H,W] layout and [p, C*ps*ps] patch layout."""
    c, hw, ps, g = cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid
    img = np.arange(c * hw * hw).reshape(c, hw, hw)
    to_patches = np.empty((cfg.num_patches, cfg.patch_dim), dtype=np.int64)
    for gy in range(g):
        for gx in range(g):
            block = img[:, gy * ps:(gy + 1) * ps, gx * ps:(gx + 1) * ps]
            to_patches[gy * g + gx] = block.reshape(-1)
    to_patches = to_patches.reshape(-1)
    to_image = np.argsort(to_patches)
    return to_patches, to_image


class Denoiser:
    """Patch transformer predicting the noise content of a noisy frame."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        rng = philox(seed, INIT)
        self.patch_embed = Linear(cfg.patch_dim, cfg.dim, rng)
        self.embeds = EmbeddingTables(cfg.vocab_size, cfg.dim, rng)
        self.blocks = [TransformerBlock(cfg.dim, cfg.heads, rng, cfg.ffn_mult)
                       for _ in range(cfg.layers)]
        self.mem = [MemoryParams(cfg.dim, cfg.heads, rng, cfg.mem_h, cfg.mem_w)
                    for _ in range(cfg.layers)]
        # zero-initialized output head: a fresh model predicts exactly zero
        # noise, which keeps the invert/denoise round trip exact at init
        self.unpatch = Linear(cfg.dim, cfg.patch_dim, rng, zero_init=True)
        self._to_patches, self._to_image = _patch_permutations(cfg)

    # -- parameters ----------------------------------------------------------

    def named_parameters(self):
        out = self.patch_embed.named_parameters("patch_embed")
        out.update(self.embeds.named_parameters("embeds"))
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_parameters(f"blocks.{i}"))
        for i, mp in enumerate(self.mem):
            out.update(mp.named_parameters(f"mem.{i}"))
        out.update(self.unpatch.named_parameters("unpatch"))
        return out

    def memory_parameter_names(self):
        return [n for n in self.named_parameters() if n.startswith("mem.")]

    # -- forward -------------------------------------------------------------

    def _expect_frame(self, x):
        want = (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)
        if x.shape != want:
            raise ValueError(f"frame shape {x.shape} != {want}")

    def patchify(self, frame):
        """[C,H,W] -> [p, d] tokens: linear patch embed + learned 2-d position."""
        self._expect_frame(frame)
        patches = permute(frame, self._to_patches,
                          (self.cfg.num_patches, self.cfg.patch_dim))
        tokens = self.patch_embed(patches)
        return add(tokens, self.embeds.position_embedding(self.cfg.grid, self.cfg.grid))

    def unpatchify(self, tokens):
        out = self.unpatch(tokens)
        return permute(out, self._to_image,
                       (self.cfg.channels, self.cfg.image_size, self.cfg.image_size))

    def conditioning(self, t, prompt):
        return add(self.embeds.time_embedding(t, self.cfg.total_steps),
                   self.embeds.prompt_embedding(prompt))

    def forward(self, x_t, t, prompt=None, hook=None):
        """Predicted noise with x_t's shape; ``hook(layer, tokens)`` runs after
        each block when streaming is on."""
        tokens = self.patchify(x_t)
        cond = self.conditioning(t, prompt)
        for layer, blk in enumerate(self.blocks):
            tokens = blk(tokens, cond)
            if hook is not None:
                tokens = hook(layer, tokens)
        return self.unpatchify(tokens)

    def features(self, frame, t=1, depth=None):
        """Mid-stack token mean: the deterministic feature map used by metrics."""
        if depth is None:
            depth = max(1, self.cfg.layers // 2)
        tokens = self.patchify(Tensor(np.asarray(frame, dtype=np.float32)))
        cond = self.conditioning(t, None)
        for blk in self.blocks[:depth]:
            tokens = blk(tokens, cond)
        return tokens.data.mean(axis=0)

    def memory_hook(self, bank, branch, step_slot):
        """Temporal hook running the grid-memory recurrence against ``bank``."""
        residual = self.cfg.memory_residual

        def hook(layer, tokens):
            key = (layer, step_slot, branch)
            mem = bank_get_or_init(bank, key, self.mem[layer])
            frame_part, mem_part = memory_attention(tokens, mem, self.mem[layer])
            if residual:
                tokens = add(tokens, frame_part)
                new_state = add(mem.state, mem_part.state)
                new_mem = SpatialTemporalMemory(new_state, mem.h, mem.w)
            else:
                tokens = frame_part
                new_mem = mem_part
            bank.update(key, new_mem)
            return tokens

        return hook


def denoise_forward(model, x_t, t, prompt, bank, branch="cond", step_slot=0):
    """One model pass; with a bank, each layer's memory advances one frame.

    Returns (eps_hat, bank). ``bank=None`` is the pure image denoiser.
    """
    hook = None if bank is None else model.memory_hook(bank, branch, step_slot)
    eps_hat = model.forward(x_t, t, prompt, hook)
    return eps_hat, bank


def partition_parameters(model):
    """Disjoint, exhaustive (base, memory) split of the parameter dict."""
    params = model.named_parameters()
    memory = {n: p for n, p in params.items() if n.startswith("mem.")}
    base = {n: p for n, p in params.items() if not n.startswith("mem.")}
    return base, memory


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model, path, extra=None):
    params = model.named_parameters()
    _, mem_names = partition_parameters(model)
    meta = {"kind": "denoiser-checkpoint", "config": asdict(model.cfg)}
    if extra:
        meta.update(extra)
    svdt.write_named_tensors(
        path, {n: p.data for n, p in params.items()},
        trainable={n: True for n in params}, header_extra=meta)


def load_checkpoint(path):
    tensors, header = svdt.read_named_tensors(path)
    meta = header.get("meta", {})
    if meta.get("kind") != "denoiser-checkpoint":
        raise svdt.MalformedFileError("not a denoiser checkpoint")
    cfg = DenoiserConfig(**meta["config"])
    model = Denoiser(cfg, seed=0)
    params = model.named_parameters()
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise svdt.MalformedFileError(
            f"checkpoint tensor names mismatch (missing {sorted(missing)[:3]}, "
            f"extra {sorted(extra)[:3]})")
    for name, arr in tensors.items():
        if params[name].data.shape != arr.shape:
            raise svdt.MalformedFileError(f"shape mismatch for {name}")
        params[name].data = arr.astype(np.float32)
    return model, meta
