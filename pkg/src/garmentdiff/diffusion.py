"""DDPM mathematics: schedule, forward noising, noise-prediction loss, sampling.

Steps are 1-based: ``t`` runs over ``1..T`` and ``sched.alpha_bar[t - 1]`` is
the product of ``alpha_1..alpha_t``.  Denoisers are any callable
``f(c, y_t, t, cond_image=None)`` returning a tensor shaped like ``y_t``.

Two reverse updates are available:

``"paper-literal"``
    ``y_{t-1} = (y_t - sqrt(1 - alpha_t) f) / sqrt(alpha_t)``, deterministic.
``"standard-ddpm"`` (default)
    ``y_{t-1} = (y_t - beta_t / sqrt(1 - alpha_bar_t) f) / sqrt(alpha_t)
    + sqrt(beta_t) z`` with ``z ~ N(0, I)`` for ``t > 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .bake import DisplacementTexture
from .errors import StructuralError, ValidationError

MODES = ("standard-ddpm", "paper-literal")
CLAMP = 3.0


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self):
        return len(self.beta)

    def check(self):
        if not (np.all(self.beta > 0) and np.all(self.beta < 1)):
            raise ValidationError("beta must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValidationError("alpha_bar must be strictly decreasing")
        if np.max(np.abs(self.alpha_bar - np.cumprod(self.alpha))) > 1e-12:
            raise ValidationError("alpha_bar is not the running product of alpha")
        return self

    def to_dict(self):
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def make_schedule(T=100, beta_start=1e-3, beta_end=0.2):
    """Linear beta schedule with its cumulative alpha products.

    The defaults are the usual 1e-4 -> 0.02 endpoints rescaled by 1000 / T for
    a 100-step chain, which drives ``alpha_bar_T`` to about 5e-5 so that
    sampling can start from pure noise.  The unscaled endpoints leave
    ``alpha_bar_T`` near 0.37 at T = 100.
    """
    if int(T) != T or T < 1:
        raise ValidationError("T must be a positive integer")
    if not (0 < beta_start <= beta_end < 1):
        raise ValidationError("need 0 < beta_start <= beta_end < 1")
    T = int(T)
    if beta_start == beta_end:
        # closed form, so (1 - b) ** t holds bit for bit
        beta = np.full(T, float(beta_start))
        alpha = 1.0 - beta
        alpha_bar = np.array([(1.0 - float(beta_start)) ** t for t in range(1, T + 1)])
        return NoiseSchedule(beta, alpha, alpha_bar).check()
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for i, a in enumerate(alpha):
        acc *= a
        alpha_bar[i] = acc
    return NoiseSchedule(beta, alpha, alpha_bar).check()


def _check_step(t, sched):
    t_arr = torch.as_tensor(t)
    if torch.any(t_arr < 1) or torch.any(t_arr > sched.T):
        raise ValidationError(f"step must lie in 1..{sched.T}")


def _per_sample(values, t, like):
    """Gather schedule entries for 1-based steps ``t`` and broadcast like ``like``."""
    v = torch.as_tensor(values, dtype=like.dtype)[torch.as_tensor(t).long() - 1]
    return v.reshape(-1, *([1] * (like.ndim - 1))) if v.ndim else v


def forward_noise(y0, t, eps, sched):
    """``sqrt(alpha_bar_t) y0 + sqrt(1 - alpha_bar_t) eps`` elementwise."""
    if tuple(y0.shape) != tuple(eps.shape):
        raise StructuralError(f"noise shape {tuple(eps.shape)} differs from data {tuple(y0.shape)}")
    _check_step(t, sched)
    if isinstance(y0, np.ndarray):
        ab = sched.alpha_bar[np.asarray(t) - 1]
        ab = np.reshape(ab, (-1,) + (1,) * (y0.ndim - 1)) if np.ndim(ab) else ab
        return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps
    ab = _per_sample(sched.alpha_bar, t, y0)
    return torch.sqrt(ab) * y0 + torch.sqrt(1.0 - ab) * eps


def training_loss(f, y0, c, rng, sched, cond_image=None):
    """Monte-Carlo noise-prediction loss, mean over batch and texels.

    Draws ``eps ~ N(0, I)`` and ``t ~ U{1..T}`` per sample from the torch
    generator ``rng``.  Call ``.backward()`` on the result for gradients.
    """
    eps = torch.randn(y0.shape, generator=rng, dtype=y0.dtype)
    t = torch.randint(1, sched.T + 1, (y0.shape[0],), generator=rng)
    y_t = forward_noise(y0, t, eps, sched)
    pred = f(c, y_t, t, cond_image) if cond_image is not None else f(c, y_t, t)
    if tuple(pred.shape) != tuple(y0.shape):
        raise StructuralError(f"denoiser returned {tuple(pred.shape)}, expected {tuple(y0.shape)}")
    return torch.mean((eps - pred) ** 2)


def reverse_step(f, y_t, c, t, sched, rng, mode="standard-ddpm", cond_image=None):
    """One reverse update from step ``t`` to ``t - 1``."""
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; expected one of {MODES}")
    t = int(t)
    _check_step(t, sched)
    steps = torch.full((y_t.shape[0],), t, dtype=torch.long)
    with torch.no_grad():
        pred = f(c, y_t, steps, cond_image) if cond_image is not None else f(c, y_t, steps)
    alpha = float(sched.alpha[t - 1])
    if mode == "paper-literal":
        return (y_t - np.sqrt(1.0 - alpha) * pred) / np.sqrt(alpha)
    beta = float(sched.beta[t - 1])
    coef = beta / np.sqrt(1.0 - float(sched.alpha_bar[t - 1]))
    mean = (y_t - coef * pred) / np.sqrt(alpha)
    if t == 1:
        return mean
    z = torch.randn(y_t.shape, generator=rng, dtype=y_t.dtype)
    return mean + np.sqrt(beta) * z


def sample_normalized(f, c, shape, sched, rng, mode="standard-ddpm", cond_image=None, clamp=CLAMP):
    """Run the full reverse chain from ``y_T ~ N(0, I)``; returns model units."""
    y = torch.randn(tuple(shape), generator=rng, dtype=torch.float32)
    for t in range(sched.T, 0, -1):
        y = reverse_step(f, y, c, t, sched, rng, mode, cond_image)
    y = torch.nan_to_num(y, nan=0.0, posinf=clamp, neginf=-clamp)
    return torch.clamp(y, -clamp, clamp)


def sample(f, c, sched, rng, mask, normalization, mode="standard-ddpm", cond_image=None, clamp=CLAMP):
    """Sample one texture per condition row, denormalised and masked."""
    c = torch.as_tensor(c, dtype=torch.float32)
    if c.ndim == 1:
        c = c[None]
    h, w = mask.shape
    y = sample_normalized(f, c, (c.shape[0], 3, h, w), sched, rng, mode, cond_image, clamp)
    return [
        DisplacementTexture.from_normalized(arr, mask, normalization)
        for arr in y.double().numpy()
    ]
