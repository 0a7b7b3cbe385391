"""RBF kernel machinery and score-distillation latent gradients.

A batch of latents is either a list of equally shaped arrays or one stacked
array with the batch on axis 0. Distances are always over the flattened
latent values.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .noise import NoiseSchedule, alpha_sigma

BANDWIDTH_FLOOR = 1e-8

WeightFn = Callable[[float], float]


def _stack(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        arr = np.asarray(batch, dtype=np.float64)
    else:
        items = [np.asarray(z, dtype=np.float64) for z in batch]
        if not items:
            raise ValueError("empty batch")
        shape = items[0].shape
        if any(z.shape != shape for z in items):
            raise ValueError("latents in one batch must share a shape")
        arr = np.stack(items)
    if arr.shape[0] == 0:
        raise ValueError("empty batch")
    return arr


def _pair(z, z2):
    z = np.asarray(z, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z.shape != z2.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z2.shape}")
    return z, z2


def rbf(z, z2, h: float) -> float:
    """``exp(-||z - z2||^2 / h)``."""
    z, z2 = _pair(z, z2)
    d = z - z2
    return math.exp(-float(np.dot(d.ravel(), d.ravel())) / h)


def rbf_grad(z, z2, h: float) -> np.ndarray:
    """Gradient of ``rbf(z, z2, h)`` with respect to its first argument ``z``."""
    z, z2 = _pair(z, z2)
    return -(2.0 / h) * (z - z2) * rbf(z, z2, h)


def _exact_sq_dists(Z: np.ndarray) -> np.ndarray:
    n = Z.shape[0]
    D = np.zeros((n, n))
    for i in range(n):
        diff = Z[i + 1:] - Z[i]
        d = np.einsum("ij,ij->i", diff, diff)
        D[i, i + 1:] = d
        D[i + 1:, i] = d
    return D


def kernel_matrix(batch, h: float) -> np.ndarray:
    Z = _stack(batch)
    Z = Z.reshape(Z.shape[0], -1)
    K = np.exp(-_exact_sq_dists(Z) / h)
    np.fill_diagonal(K, 1.0)
    return K


def median_bandwidth(batch) -> float:
    """SVGD median heuristic over all N^2 ordered pairs (diagonal included)."""
    Z = _stack(batch)
    n = Z.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least two latents")
    D = _exact_sq_dists(Z.reshape(n, -1))
    h = float(np.median(D)) / math.log(n + 1)
    return max(h, BANDWIDTH_FLOOR)


def sigma_squared_weight(schedule: NoiseSchedule | None = None) -> WeightFn:
    schedule = schedule or NoiseSchedule()

    def w(t: float) -> float:
        return alpha_sigma(schedule, t)[1] ** 2

    return w


def constant_weight(t: float) -> float:
    return 1.0


def make_weight(name: str, schedule: NoiseSchedule | None = None) -> WeightFn:
    if name == "sigma2":
        return sigma_squared_weight(schedule)
    if name == "constant":
        return constant_weight
    raise ValueError(f"unknown weighting {name!r}; expected 'sigma2' or 'constant'")


def sds_latent_grad(eps_pred, eps, t: float, w: WeightFn) -> np.ndarray:
    eps_pred, eps = _pair(eps_pred, eps)
    return w(t) * (eps_pred - eps)


def repulsion_field(noised, h: float, K: np.ndarray | None = None) -> np.ndarray:
    """``out[i] = sum_j grad_{z_j} k(z_j, z_i)``, stacked on axis 0.

    Each term points from ``z_j`` toward ``z_i``, so moving ``z_i`` along
    ``out[i]`` takes it away from its neighbours.
    """
    Z = _stack(noised)
    if K is None:
        K = kernel_matrix(Z, h)
    flat = Z.reshape(Z.shape[0], -1)
    # sum_j -(2/h)(z_j - z_i) K_ji = (2/h) (z_i * rowsum_i - sum_j K_ij z_j)
    out = (2.0 / h) * (flat * K.sum(axis=1)[:, None] - K @ flat)
    return out.reshape(Z.shape)


def cds_latent_grads(noised, eps_preds, eps, t: float, w: WeightFn, h: float,
                     residual_masks=None, repulsion: bool = True,
                     K: np.ndarray | None = None) -> np.ndarray:
    """Collaborative latent-space descent gradients for N views.

    ``g_i = (w(t)/N) * sum_j [ K_ji (eps_pred_j - eps_j) ] - (w(t)/N) * R_i``
    where ``R = repulsion_field(noised, h)``. Stepping ``z_i -= lr * g_i``
    attracts views toward kernel-weighted denoising directions and pushes
    nearby views apart. ``residual_masks`` (N, H', W') zero each residual
    outside its mask before mixing; the trainer masks the final gradients.
    """
    Z = _stack(noised)
    P = _stack(eps_preds)
    E = _stack(eps)
    if not (Z.shape == P.shape == E.shape):
        raise ValueError("noised latents, predictions and noise must share a shape")
    n = Z.shape[0]
    if K is None:
        K = kernel_matrix(Z, h)
    if K.shape != (n, n):
        raise ValueError("kernel matrix does not match batch size")
    R = P - E
    if residual_masks is not None:
        m = np.asarray(residual_masks, dtype=bool)
        if m.shape != Z.shape[:3]:
            raise ValueError("residual masks must be (N, H', W')")
        R = R * m[..., None]
    scale = w(t) / n
    flatR = R.reshape(n, -1)
    g = K.T @ flatR
    if repulsion and n > 1:
        g = g - repulsion_field(Z, h, K).reshape(n, -1)
    return (scale * g).reshape(Z.shape)


def kernel_weighted_prediction(K, eps_preds, normalize: bool) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    P = _stack(eps_preds)
    n = P.shape[0]
    if K.shape != (n, n):
        raise ValueError(f"kernel matrix {K.shape} does not match {n} predictions")
    denom = K.sum(axis=1) if normalize else np.full(n, float(n))
    out = (K @ P.reshape(n, -1)) / denom[:, None]
    return out.reshape(P.shape)
