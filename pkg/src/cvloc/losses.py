"""Training objective: smoothed cross-entropy on the output heat map plus a
temperature-scaled contrastive loss on the bottleneck matching map, combined
as ``total = output + beta * bottleneck``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, DimensionError


@dataclass
class LossConfig:
    beta: float = 1e4
    tau: float = 0.1
    sigma_px: float = 4.0

    def validate(self):
        if self.beta < 0:
            raise ConfigError(f"loss beta must be >= 0, got {self.beta}")
        if self.tau <= 0:
            raise ConfigError(f"loss tau must be > 0, got {self.tau}")
        if self.sigma_px < 0:
            raise ConfigError(f"loss sigma_px must be >= 0, got {self.sigma_px}")


@dataclass
class TargetMap:
    """Smoothed ground-truth distribution over the L x L output grid."""

    t: np.ndarray
    gt_pixel: tuple  # integer cell (u, v) containing the ground truth


@dataclass
class PositivenessWeights:
    """Per-bottleneck-cell positive mass: max-pooled, renormalized target."""

    w: np.ndarray
    ij_pos: tuple


def gaussian_target(gt, L: int, sigma_px: float) -> TargetMap:
    """Gaussian-smoothed one-hot map for a ground-truth location.

    `gt` is a continuous (u, v) position in pixel units; the map is evaluated
    at cell centers, truncated at the grid border and renormalized. With
    sigma 0 this degenerates to the one-hot encoding of the containing cell.
    """
    u, v = float(gt[0]), float(gt[1])
    if not (0.0 <= u < L and 0.0 <= v < L):
        raise DataError(f"ground truth {gt} outside [0, {L})^2")
    cell = (min(int(u), L - 1), min(int(v), L - 1))
    if sigma_px == 0.0:
        t = np.zeros((L, L), dtype=np.float32)
        t[cell] = 1.0
        return TargetMap(t=t, gt_pixel=cell)
    centers = np.arange(L, dtype=np.float64) + 0.5
    d2 = (centers[:, None] - u) ** 2 + (centers[None, :] - v) ** 2
    t = np.exp(-d2 / (2.0 * sigma_px * sigma_px))
    # Nudge the containing cell so argmax is unambiguous when gt sits on a border.
    t[cell] *= 1.0 + 1e-9
    t /= t.sum()
    return TargetMap(t=t.astype(np.float32), gt_pixel=cell)


def output_loss(logits: Tensor, target: TargetMap) -> Tensor:
    """Cross-entropy between the flat softmax of `logits` and the target map,
    computed through log-sum-exp."""
    if logits.shape != target.t.shape:
        raise DimensionError(f"logits {logits.shape} vs target {target.t.shape}")
    lse = ad.logsumexp(logits)
    return lse - ad.t_sum(ad.mul(logits, Tensor(target.t)))


def positiveness_weights(target: TargetMap, N: int) -> PositivenessWeights:
    L = target.t.shape[0]
    if L % N:
        raise ConfigError(f"output side {L} not divisible by bottleneck side {N}")
    s = L // N
    w = target.t.reshape(N, s, N, s).max(axis=(1, 3)).astype(np.float64)
    w /= w.sum()
    ij = np.unravel_index(int(w.argmax()), w.shape)
    return PositivenessWeights(w=w.astype(np.float32), ij_pos=(int(ij[0]), int(ij[1])))


def infonce_cell(M: Tensor, ij, tau: float) -> Tensor:
    """Contrastive loss of one positive cell against all cells of the matching
    map: -log softmax(M/tau) at `ij`."""
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    scaled = ad.mul(M, 1.0 / tau)
    return ad.logsumexp(scaled) - ad.slice_index(ad.slice_index(scaled, ij[0]), ij[1])


def bottleneck_loss(M: Tensor, w: PositivenessWeights, tau: float) -> Tensor:
    """Positiveness-weighted sum of the per-cell contrastive losses.

    All cells share one log-sum-exp, so the weighted sum collapses to
    lse * sum(w) - sum(w * M / tau); with one-hot weights this is exactly
    `infonce_cell` at that cell.
    """
    if M.shape != w.w.shape:
        raise DimensionError(f"matching map {M.shape} vs weights {w.w.shape}")
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    scaled = ad.mul(M, 1.0 / tau)
    lse = ad.logsumexp(scaled)
    return ad.mul(lse, float(w.w.sum())) - ad.t_sum(ad.mul(scaled, Tensor(w.w)))


def total_loss(logits: Tensor, M: Tensor, target: TargetMap, config: LossConfig) -> Tensor:
    out = output_loss(logits, target)
    if config.beta == 0.0:
        return out
    w = positiveness_weights(target, M.shape[0])
    return out + ad.mul(bottleneck_loss(M, w, config.tau), config.beta)
