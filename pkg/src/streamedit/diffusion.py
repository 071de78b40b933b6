"""Diffusion process math: schedule, noising, x0 prediction, loss, CFG, DDIM.

The closed-form noising uses the cumulative signal coefficient, and the x0
prediction inverts it with the same cumulative coefficient so the pair is an
exact algebraic inverse. The reverse/inversion steps are deterministic
(eta = 0) and mutually inverse for a fixed predicted noise; step 0 is the
clean endpoint with cumulative coefficient 1.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, mean_square, scale, sub


class StepOrderError(ValueError):
    pass


class NoiseSchedule:
    """Per-step signal scales and their cumulative products, steps 1..T."""

    def __init__(self, alphas):
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.ndim != 1 or alphas.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(alphas <= 0) or np.any(alphas >= 1):
            raise ValueError("per-step alpha values must lie in (0, 1)")
        self.alphas = alphas
        self.alpha_bars = np.cumprod(alphas)
        self.T = alphas.size

    def alpha_bar(self, t):
        """Cumulative product at step t; step 0 is defined as 1 (clean data)."""
        if not 0 <= t <= self.T:
            raise IndexError(f"step {t} outside 0..{self.T}")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def build_schedule(T, beta_start=1e-4, beta_end=0.02):
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(1.0 - betas)


class GuidanceConfig:
    """CFG coefficient and the ordered few-step subset used for sampling."""

    def __init__(self, lam=1.0, steps=(33, 66, 100)):
        steps = [int(s) for s in steps]
        if lam < 0:
            raise ValueError("guidance coefficient must be >= 0")
        if not steps:
            raise ValueError("step subset must be non-empty")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"step subset must be strictly increasing, got {steps}")
        if steps[0] < 1:
            raise ValueError("steps start at 1")
        self.lam = float(lam)
        self.steps = steps

    def validate_against(self, sched):
        if self.steps[-1] > sched.T:
            raise ValueError(f"step {self.steps[-1]} exceeds schedule length {sched.T}")


def _check_shapes(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {a.shape} != {b.shape}")


def q_sample(x0, t, eps, sched):
    """Noisy latent at step t from clean data and a noise draw."""
    _check_shapes(x0, eps, "q_sample")
    if not 1 <= t <= sched.T:
        raise IndexError(f"step {t} outside 1..{sched.T}")
    ab = sched.alpha_bar(t)
    return add(scale(x0, np.sqrt(ab)), scale(eps, np.sqrt(1.0 - ab)))


def predict_x0(xt, t, eps_hat, sched):
    """Clean-data estimate from a noisy latent and predicted noise."""
    _check_shapes(xt, eps_hat, "predict_x0")
    if not 1 <= t <= sched.T:
        raise IndexError(f"step {t} outside 1..{sched.T}")
    ab = sched.alpha_bar(t)
    return scale(sub(xt, scale(eps_hat, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))


def recon_loss(eps_true, eps_pred):
    """Mean squared difference over all elements; differentiable."""
    _check_shapes(eps_true, eps_pred, "recon_loss")
    return mean_square(sub(eps_pred, eps_true))


def cfg_combine(eps_c, eps_uc, lam):
    """(1 + lam) * conditional - lam * unconditional."""
    _check_shapes(eps_c, eps_uc, "cfg_combine")
    if lam < 0:
        raise ValueError("guidance coefficient must be >= 0")
    if lam == 0.0:
        return eps_c
    return sub(scale(eps_c, 1.0 + lam), scale(eps_uc, lam))


def ddim_step(xt, t, t_prev, eps_hat, sched):
    """Deterministic reverse step t -> t_prev; t_prev=0 returns the x0 estimate."""
    if not t_prev < t:
        raise StepOrderError(f"reverse step needs t_prev < t, got {t_prev} >= {t}")
    x0_hat = predict_x0(xt, t, eps_hat, sched)
    ab_prev = sched.alpha_bar(t_prev)
    if t_prev == 0:
        return x0_hat
    return add(scale(x0_hat, np.sqrt(ab_prev)), scale(eps_hat, np.sqrt(1.0 - ab_prev)))


def ddim_invert_step(xt_prev, t_prev, t, eps_hat, sched):
    """Exact algebraic inverse of ddim_step for the same eps_hat."""
    if not t_prev < t:
        raise StepOrderError(f"inversion needs t_prev < t, got {t_prev} >= {t}")
    _check_shapes(xt_prev, eps_hat, "ddim_invert_step")
    ab_prev = sched.alpha_bar(t_prev)
    ab = sched.alpha_bar(t)
    x0_hat = scale(sub(xt_prev, scale(eps_hat, np.sqrt(1.0 - ab_prev))),
                   1.0 / np.sqrt(ab_prev))
    return add(scale(x0_hat, np.sqrt(ab)), scale(eps_hat, np.sqrt(1.0 - ab)))
