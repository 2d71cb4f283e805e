"""Adversarial objectives.

Probabilities are clamped to [1e-7, 1 - 1e-7] before any log.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

CLAMP = 1e-7


@dataclass
class BatchDistanceStats:
    mean_dist_s: Tensor      # (O,) row-pooled, then averaged over images
    mean_dist_x: Tensor
    source: str              # "real" or "generated"


def batch_distance_stats(pooled_s, pooled_x, source: str) -> BatchDistanceStats:
    pooled_s, pooled_x = ad.as_tensor(pooled_s), ad.as_tensor(pooled_x)
    if pooled_s.shape[0] < 1:
        raise ContractError("statistics need at least one image")
    return BatchDistanceStats(ad.mean(pooled_s, axis=0), ad.mean(pooled_x, axis=0), source)


def _prob(x) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 0:
        x = ad.reshape(x, (1,))
    if np.any(x.data < 0) or np.any(x.data > 1) or np.any(np.isnan(x.data)):
        raise ContractError("probabilities must lie in [0, 1]")
    return ad.clamp(x, CLAMP, 1.0 - CLAMP)


def _nll(p: Tensor) -> Tensor:
    return -ad.log(p)


def _nll_not(p: Tensor) -> Tensor:
    return -ad.log(1.0 - p)


def discriminator_loss(d_real, d_gen, d_fake) -> Tensor:
    """-log D(real) - log(1 - D(generated)) - log(1 - D(mismatched)), batch mean."""
    r, g, f = _prob(d_real), _prob(d_gen), _prob(d_fake)
    return ad.mean(_nll(r)) + ad.mean(_nll_not(g)) + ad.mean(_nll_not(f))


def generator_loss(d_gen, stats_gen: BatchDistanceStats, stats_real: BatchDistanceStats,
                   feature_matching: bool = True) -> Tensor:
    """-log D(generated) plus L2 gaps between batch-mean distance features."""
    g = _prob(d_gen)
    loss = ad.mean(_nll(g))
    if not feature_matching:
        return loss
    for a, b in ((stats_gen.mean_dist_s, stats_real.mean_dist_s),
                 (stats_gen.mean_dist_x, stats_real.mean_dist_x)):
        if a.shape != b.shape:
            raise ContractError(f"statistics shapes differ: {a.shape} vs {b.shape}")
        loss = loss + ad.l2_norm(a - b)
    return loss


def pretrain_discriminator_loss(d_matched, d_mismatched) -> Tensor:
    """-log D(matched) - log(1 - D(mismatched)), batch mean."""
    m, x = _prob(d_matched), _prob(d_mismatched)
    return ad.mean(_nll(m)) + ad.mean(_nll_not(x))
