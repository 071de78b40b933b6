"""Deterministic evaluation proxies and exact efficiency accounting.

Temporal consistency is the mean cosine similarity of per-frame features
(adjacent pairs and all unordered pairs); the default feature map is the
frozen base model's mid-stack token mean at a small fixed step. Edit
accuracy compares the mask-region mean color against the requested target,
with a background-deviation companion. FLOPs are analytic, counted per
primitive from shapes (matmul 2mnk; softmax 5n; layernorm 8n; gelu 8n;
elementwise 1n; data movement free), so counts are exact and compositional.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import observe
from .video import BACKGROUND


class NonFiniteMetricError(ValueError):
    pass


class SingleFrameError(ValueError):
    pass


def _elementwise(shapes, out_shape, attrs):
    return int(np.prod(out_shape))


_COSTS = {
    "matmul": lambda shapes, out, attrs: 2 * shapes[0][0] * shapes[0][1] * shapes[1][1],
    "softmax": lambda shapes, out, attrs: 5 * int(np.prod(out)),
    "layernorm": lambda shapes, out, attrs: 8 * int(np.prod(out)),
    "gelu": lambda shapes, out, attrs: 8 * int(np.prod(out)),
    "add": _elementwise,
    "mul": _elementwise,
    "scale": _elementwise,
    "mean_square": lambda shapes, out, attrs: int(np.prod(shapes[0])),
    "elu1": _elementwise,
    "recip": _elementwise,
    # pure data movement
    "concat": lambda shapes, out, attrs: 0,
    "split": lambda shapes, out, attrs: 0,
    "transpose": lambda shapes, out, attrs: 0,
    "permute": lambda shapes, out, attrs: 0,
}


def primitive_cost(kind, in_shapes, out_shape, attrs=None):
    return _COSTS[kind](in_shapes, out_shape, attrs)


class FlopCounter:
    """Accumulates analytic costs of every primitive applied while counting."""

    def __init__(self):
        self.total = 0
        self.by_kind = {}

    def __call__(self, kind, in_shapes, out_shape, attrs):
        cost = primitive_cost(kind, in_shapes, out_shape, attrs)
        self.total += cost
        self.by_kind[kind] = self.by_kind.get(kind, 0) + cost

    def counting(self):
        return observe(self)


def count_flops(fn):
    """Run fn under a fresh counter; returns (result, total flops)."""
    counter = FlopCounter()
    with counter.counting():
        result = fn()
    return result, counter.total


def temporal_consistency(frames, extractor):
    """(adjacent-pair mean, all-pair mean) cosine similarity of frame features."""
    if len(frames) < 2:
        raise SingleFrameError("temporal consistency needs at least two frames")
    feats = np.stack([np.asarray(extractor(f), dtype=np.float64) for f in frames])
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0):
        raise NonFiniteMetricError("zero-norm feature vector")
    unit = feats / norms[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    n = len(frames)
    adjacent = float(np.mean([sims[i, i + 1] for i in range(n - 1)]))
    iu = np.triu_indices(n, k=1)
    allpairs = float(np.mean(sims[iu]))
    return adjacent, allpairs


def make_base_extractor(model, t=1):
    """Deterministic feature map from the frozen base model's mid stack."""
    return lambda frame: model.features(frame, t=t)


def edit_accuracy(frames, masks, target_color, background=BACKGROUND):
    """(edit_err, bg_err): mask-region mean color vs target, and background
    deviation from the source background color; both are per-channel L1/3
    averaged over frames."""
    frames = np.asarray(frames, dtype=np.float32)
    masks = np.asarray(masks, dtype=np.float32)
    if frames.shape[0] != masks.shape[0] or frames.shape[2:] != masks.shape[1:]:
        raise ValueError(f"masks {masks.shape} do not align with frames {frames.shape}")
    target = np.asarray(target_color, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    edit_errs, bg_errs = [], []
    for n in range(frames.shape[0]):
        m = masks[n] > 0.5
        if not m.any():
            raise ValueError(f"empty mask at frame {n}")
        mean_color = frames[n][:, m].mean(axis=1)
        edit_errs.append(np.abs(mean_color - target).mean())
        outside = frames[n][:, ~m]
        bg_errs.append(np.abs(outside - bg[:, None]).mean())
    return float(np.mean(edit_errs)), float(np.mean(bg_errs))


def source_edit_err(source_color, target_color):
    """Closed-form edit error of leaving the source untouched."""
    a = np.asarray(source_color, dtype=np.float64)
    b = np.asarray(target_color, dtype=np.float64)
    return float(np.abs(a - b).mean())


def measure_state_size(session):
    """Total cached reals held by the session's temporal state."""
    return session.bank.state_size()


@dataclass
class MetricsReport:
    strategy: str = ""
    video: str = ""
    seed: int = 0
    tem_con_adjacent: float = float("nan")
    tem_con_allpairs: float = float("nan")
    edit_err: float = float("nan")
    bg_err: float = float("nan")
    flops_per_frame: list = field(default_factory=list)
    state_size_per_frame: list = field(default_factory=list)
    wall_clock_per_frame: list = field(default_factory=list)

    def validate(self):
        for name in ("tem_con_adjacent", "tem_con_allpairs", "edit_err", "bg_err"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise NonFiniteMetricError(f"{name} is not finite: {v}")
        if not -1.0 <= self.tem_con_adjacent <= 1.0:
            raise NonFiniteMetricError("adjacent cosine outside [-1, 1]")
        if not -1.0 <= self.tem_con_allpairs <= 1.0:
            raise NonFiniteMetricError("all-pair cosine outside [-1, 1]")
        if self.edit_err < 0 or self.bg_err < 0:
            raise NonFiniteMetricError("errors must be >= 0")
        for seq in (self.flops_per_frame, self.state_size_per_frame,
                    self.wall_clock_per_frame):
            if any(not np.isfinite(x) for x in seq):
                raise NonFiniteMetricError("non-finite per-frame value")
        return self


SCHEMA_VERSION = 1


def report_from_results(results, frames, masks, target_color, extractor,
                        strategy="", video="", seed=0):
    """Assemble a MetricsReport from per-frame results of a finished stream."""
    adjacent, allpairs = temporal_consistency([r.frame for r in results], extractor)
    edit_err, bg_err = edit_accuracy(np.stack([r.frame for r in results]), masks,
                                     target_color)
    return MetricsReport(
        strategy=strategy, video=video, seed=seed,
        tem_con_adjacent=adjacent, tem_con_allpairs=allpairs,
        edit_err=edit_err, bg_err=bg_err,
        flops_per_frame=[r.flops for r in results],
        state_size_per_frame=[r.state_size for r in results],
        wall_clock_per_frame=[r.latency_s for r in results],
    ).validate()


def emit_report(report, path, fmt="json"):
    report.validate()
    if fmt == "json":
        payload = {"schema_version": SCHEMA_VERSION, **asdict(report)}
        with open(path, "w") as f:
            json.dump(payload, f, sort_keys=True, indent=1)
    elif fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "flops", "state_size", "wall_clock_s"])
            for i in range(len(report.flops_per_frame)):
                writer.writerow([i, report.flops_per_frame[i],
                                 report.state_size_per_frame[i],
                                 report.wall_clock_per_frame[i]])
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def parse_report(path):
    with open(path) as f:
        payload = json.load(f)
    if payload.pop("schema_version", None) != SCHEMA_VERSION:
        raise ValueError("unknown report schema version")
    return MetricsReport(**payload)
