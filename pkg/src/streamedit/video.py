"""Deterministic moving-shape videos with ground-truth masks and prompts.

Each video is one colored shape (square or disk) bouncing over a flat
background. The prompt vocabulary is the closed set of color commands with
index 0 reserved for the null prompt; a video's source prompt names its
shape color, and an edit prompt names the requested target color. Masks mark
the exact painted pixels, so mask-region mean color equals the source color
by construction (before optional pixel noise).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import svdt
from .rng import DATA, philox

PROMPTS = ["", "red", "green", "blue", "yellow", "magenta", "cyan", "orange"]

COLOR_VALUES = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}

BACKGROUND = (0.1, 0.1, 0.1)


def prompt_index(name):
    if name not in PROMPTS:
        raise ValueError(f"unknown prompt {name!r}; vocabulary is {PROMPTS}")
    return PROMPTS.index(name)


@dataclass
class VideoSpec:
    frames: int = 32
    image_size: int = 32
    kind: str = "square"  # or "disk"
    velocity: tuple = (1.0, 0.7)
    color: str = "red"
    seed: int = 0
    noise_sigma: float = 0.0
    radius: int = 0  # 0 = image_size // 5

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("a video needs at least one frame")
        if self.kind not in ("square", "disk"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.color not in COLOR_VALUES:
            raise ValueError(f"unknown color {self.color!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")

    @property
    def shape_radius(self):
        return self.radius if self.radius > 0 else max(2, self.image_size // 5)


@dataclass
class LabeledVideo:
    frames: np.ndarray  # [N, C, H, W] float32 in [0, 1] (plus optional noise)
    masks: np.ndarray   # [N, H, W] float32 {0, 1}
    prompt: int
    centers: np.ndarray  # [N, 2] float32 (row, col)

    @property
    def num_frames(self):
        return self.frames.shape[0]


def _paint(size, kind, cy, cx, r, color):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    else:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    frame = np.empty((3, size, size), dtype=np.float32)
    for c in range(3):
        frame[c] = BACKGROUND[c]
        frame[c][mask] = color[c]
    return frame, mask.astype(np.float32)


def generate_video(spec):
    """Render the full labeled video; bit-identical for the same spec."""
    rng = philox(spec.seed, DATA)
    size = spec.image_size
    r = spec.shape_radius
    lo, hi = r + 1.0, size - r - 2.0
    if hi <= lo:
        raise ValueError(f"shape radius {r} does not fit a {size}px canvas")
    cy = rng.uniform(lo, hi)
    cx = rng.uniform(lo, hi)
    vy, vx = float(spec.velocity[0]), float(spec.velocity[1])
    color = COLOR_VALUES[spec.color]

    frames = np.empty((spec.frames, 3, size, size), dtype=np.float32)
    masks = np.empty((spec.frames, size, size), dtype=np.float32)
    centers = np.empty((spec.frames, 2), dtype=np.float32)
    for n in range(spec.frames):
        frame, mask = _paint(size, spec.kind, cy, cx, r, color)
        frames[n] = frame
        masks[n] = mask
        centers[n] = (cy, cx)
        cy, vy = _bounce(cy + vy, vy, lo, hi)
        cx, vx = _bounce(cx + vx, vx, lo, hi)
    if spec.noise_sigma > 0:
        frames = frames + rng.normal(0.0, spec.noise_sigma,
                                     size=frames.shape).astype(np.float32)
    return LabeledVideo(frames, masks, prompt_index(spec.color), centers)


def _bounce(pos, vel, lo, hi):
    if pos < lo:
        return 2 * lo - pos, -vel
    if pos > hi:
        return 2 * hi - pos, -vel
    return pos, vel


def split_into_clips(video, clip_len):
    """Consecutive clips of clip_len frames (last one may be shorter)."""
    if clip_len < 1:
        raise ValueError("clip length must be >= 1")
    clips = []
    for start in range(0, video.num_frames, clip_len):
        end = min(start + clip_len, video.num_frames)
        clips.append(LabeledVideo(video.frames[start:end], video.masks[start:end],
                                  video.prompt, video.centers[start:end]))
    return clips


# -- dataset directory: manifest.json + one SVDT file per video/mask stack ---

def write_dataset(videos, specs, path):
    os.makedirs(path, exist_ok=True)
    entries = []
    for i, (video, spec) in enumerate(zip(videos, specs)):
        vfile, mfile = f"video_{i:04d}.svdt", f"mask_{i:04d}.svdt"
        svdt.write_tensor(os.path.join(path, vfile), video.frames)
        svdt.write_tensor(os.path.join(path, mfile), video.masks)
        entries.append({
            "video": vfile, "mask": mfile, "prompt": video.prompt,
            "centers": video.centers.tolist(), "spec": asdict(spec),
        })
    manifest = {"format": "shape-video-dataset", "version": 1,
                "prompts": PROMPTS, "videos": entries}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)


def read_dataset(path):
    """Returns (list of LabeledVideo, list of VideoSpec)."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != "shape-video-dataset":
        raise svdt.MalformedFileError("not a shape-video dataset manifest")
    videos, specs = [], []
    for entry in manifest["videos"]:
        if not 0 <= entry["prompt"] < len(PROMPTS):
            raise svdt.MalformedFileError(
                f"prompt index {entry['prompt']} outside vocabulary")
        frames = svdt.read_tensor(os.path.join(path, entry["video"]))
        masks = svdt.read_tensor(os.path.join(path, entry["mask"]))
        spec = VideoSpec(**{**entry["spec"],
                            "velocity": tuple(entry["spec"]["velocity"])})
        videos.append(LabeledVideo(frames, masks, entry["prompt"],
                                   np.asarray(entry["centers"], dtype=np.float32)))
        specs.append(spec)
    return videos, specs


def make_specs(num_videos, video_len, image_size=32, seed=0, noise_sigma=0.0,
               speed=1.0, colors=None, kinds=("square", "disk")):
    """Deterministic spec list cycling colors and shapes from one seed."""
    colors = list(colors) if colors else [c for c in PROMPTS[1:]]
    rng = philox(seed, DATA, step=1)
    specs = []
    for i in range(num_videos):
        ang = rng.uniform(0, 2 * np.pi)
        vel = (float(np.round(speed * np.sin(ang), 3)),
               float(np.round(speed * np.cos(ang), 3)))
        specs.append(VideoSpec(
            frames=video_len, image_size=image_size,
            kind=kinds[i % len(kinds)], velocity=vel,
            color=colors[i % len(colors)],
            seed=int(rng.integers(0, 2 ** 31)), noise_sigma=noise_sigma))
    return specs
