"""Diffusion-side machinery: schedule, forward noising, guidance, denoisers.

Latents are float arrays of shape ``(H', W', C)``. Denoisers predict the noise
that was mixed into a noised latent ``z_t = alpha_t * z + sigma_t * eps``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Protocol, runtime_checkable

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine variance-preserving schedule, ``alpha_t = cos(pi t / 2)``."""

    t_min: float = 0.02
    t_max: float = 0.98

    def __post_init__(self):
        if not 0.0 < self.t_min < self.t_max < 1.0:
            raise ValueError("need 0 < t_min < t_max < 1")


def alpha_sigma(schedule: NoiseSchedule, t: float) -> tuple[float, float]:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestep {t} outside [0, 1]")
    angle = 0.5 * math.pi * t
    return math.cos(angle), math.sin(angle)


def add_noise(z, eps, t: float, schedule: NoiseSchedule):
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {eps.shape}")
    a, s = alpha_sigma(schedule, t)
    return a * z + s * eps


def progressive_timestep(iteration: int, max_iter: int, t_min: float, t_max: float) -> float:
    """Linearly annealed timestep, ``t_max`` at iteration 0 down to ``t_min``."""
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    if iteration == max_iter:  # exact endpoint; the affine form rounds off t_min
        return float(t_min)
    return t_max - (t_max - t_min) * iteration / max_iter


def cfg_combine(eps_uncond, eps_cond, guidance: float):
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch {eps_uncond.shape} vs {eps_cond.shape}")
    if guidance == 0.0:
        return eps_uncond.copy()
    if guidance == 1.0:
        return eps_cond.copy()
    return eps_uncond + guidance * (eps_cond - eps_uncond)


@dataclass
class Condition:
    """Inpainting condition at latent resolution.

    ``mask`` is true where content must be synthesized; ``context_latent`` is
    the latent of the masked view and is zero under the mask.
    """

    mask: np.ndarray
    context_latent: np.ndarray
    concept: str = ""

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.context_latent = np.asarray(self.context_latent, dtype=np.float64)
        if self.context_latent.shape[:2] != self.mask.shape:
            raise ValueError("mask and context_latent disagree in spatial shape")
        if np.any(self.context_latent[self.mask] != 0.0):
            raise ValueError("context_latent must be zero under the mask")

    @classmethod
    def from_latent(cls, latent, mask, concept: str = "") -> "Condition":
        ctx = np.where(np.asarray(mask, dtype=bool)[..., None], 0.0, latent)
        return cls(mask, ctx, concept)


@runtime_checkable
class Denoiser(Protocol):
    def predict(self, z_t, t: float, condition: Condition, conditional: bool = True) -> np.ndarray:
        ...


def gaussian_oracle_predict(mu, s: float, z_t, t: float, schedule: NoiseSchedule):
    """Optimal noise prediction when data ~ N(mu, s^2 I).

    Equals ``-sigma_t * grad log p_t(z_t)`` for the noised marginal.
    """
    if s < 0:
        raise ValueError("s must be non-negative")
    a, sig = alpha_sigma(schedule, t)
    z_t = np.asarray(z_t, dtype=np.float64)
    return sig * (z_t - a * np.asarray(mu, dtype=np.float64)) / (a * a * s * s + sig * sig)


class GaussianOracleDenoiser:
    """Closed-form denoiser for a Gaussian data model.

    With ``mu=None`` the conditional branch centres on the condition's context
    latent and the unconditional branch on zero. The prediction at a pixel
    depends only on that pixel.
    """

    def __init__(self, mu=None, s: float = 0.1, schedule: NoiseSchedule | None = None):
        self.mu = None if mu is None else np.asarray(mu, dtype=np.float64)
        self.s = float(s)
        self.schedule = schedule or NoiseSchedule()

    def predict(self, z_t, t, condition=None, conditional=True):
        z_t = np.asarray(z_t, dtype=np.float64)
        if self.mu is not None:
            mu = self.mu
        elif conditional and condition is not None:
            mu = condition.context_latent
        else:
            mu = np.zeros_like(z_t)
        return gaussian_oracle_predict(mu, self.s, z_t, t, self.schedule)


@lru_cache(maxsize=32)
def _fill_weights(h: int, w: int, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    p = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    d2 = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1)
    W = np.zeros_like(d2)
    near = (d2 > 0) & (d2 <= radius * radius)
    W[near] = 1.0 / d2[near]
    W.setflags(write=False)
    return W


def blur_fill(context, mask, radius: float = 8.0) -> np.ndarray:
    """Fill masked cells with the inverse-squared-distance average of unmasked ones.

    Only unmasked cells within ``radius`` contribute; a masked cell with no
    such neighbour gets the mean over all unmasked cells. Unmasked cells keep
    their context value.
    """
    context = np.asarray(context, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        raise ValueError("mask covers the whole latent: no context to fill from")
    h, w, c = context.shape
    W = _fill_weights(h, w, float(radius))
    valid = (~mask).ravel().astype(np.float64)
    flat = context.reshape(-1, c)
    num = W @ (flat * valid[:, None])
    den = W @ valid
    out = flat.copy()
    m = mask.ravel()
    far = m & (den <= 0.0)
    near = m & (den > 0.0)
    out[near] = num[near] / den[near, None]
    if far.any():
        out[far] = flat[~m].mean(axis=0)
    return out.reshape(h, w, c)


class ContextPullDenoiser:
    """Toy inpainting prior that pulls masked cells toward blurred context.

    The conditional branch targets ``blur_fill(context, mask)``; the
    unconditional branch ignores the condition and targets the per-channel
    spatial mean of ``z_t / alpha_t``. Either way the prediction is the noise
    consistent with that target: ``(z_t - alpha_t * target) / sigma_t``.
    """

    def __init__(self, radius: float = 8.0, schedule: NoiseSchedule | None = None):
        self.radius = float(radius)
        self.schedule = schedule or NoiseSchedule()

    def predict(self, z_t, t, condition=None, conditional=True):
        z_t = np.asarray(z_t, dtype=np.float64)
        a, s = alpha_sigma(self.schedule, t)
        if s == 0.0:
            raise ValueError("context-pull prediction undefined at t = 0")
        if conditional:
            if condition is None:
                raise ValueError("conditional prediction needs a condition")
            target = blur_fill(condition.context_latent, condition.mask, self.radius)
        else:
            target = np.broadcast_to(z_t.mean(axis=(0, 1)) / a, z_t.shape)
        return (z_t - a * target) / s


class GuidedDenoiser:
    """Classifier-free guidance wrapper: the conditional branch returns the
    guided combination, the unconditional branch passes through."""

    def __init__(self, base: Denoiser, guidance: float = 7.5):
        self.base = base
        self.guidance = float(guidance)

    def predict(self, z_t, t, condition=None, conditional=True):
        uncond = self.base.predict(z_t, t, condition, conditional=False)
        if not conditional:
            return uncond
        if self.guidance == 0.0:
            return uncond
        cond = self.base.predict(z_t, t, condition, conditional=True)
        return cfg_combine(uncond, cond, self.guidance)


_REGISTRY: dict[str, Callable[..., Denoiser]] = {
    "gaussian-oracle": GaussianOracleDenoiser,
    "context-pull": ContextPullDenoiser,
}


def register_denoiser(name: str, factory: Callable[..., Denoiser]) -> None:
    _REGISTRY[name] = factory


def make_denoiser(name: str, **kwargs) -> Denoiser:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown denoiser {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(**kwargs)


def available_denoisers() -> list[str]:
    return sorted(_REGISTRY)
