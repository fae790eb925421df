"""Early domain alignment losses on pooled private-encoder features."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from protoxfer.errors import ConfigError, DataError

EPS = 1e-7
DEFAULT_KERNEL_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)

# incremented whenever a probability is clamped away from {0, 1}
numeric_warnings: Counter = Counter()


class EstimatorDegeneracyError(DataError):
    pass


@dataclass(frozen=True)
class KernelBank:
    """Gaussian kernels ``k(x, y) = exp(-||x - y||^2 / bandwidth)``."""

    bandwidths: tuple[float, ...]

    def __post_init__(self):
        bws = tuple(float(b) for b in self.bandwidths)
        if not bws:
            raise ConfigError("kernel bank must contain at least one bandwidth")
        if any(not b > 0 for b in bws):
            raise ConfigError(f"bandwidths must be positive, got {bws}")
        object.__setattr__(self, "bandwidths", bws)


def adversarial_eda_loss(domain_probs: torch.Tensor, domain_labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of the domain classifier over the combined batch."""
    probs = domain_probs.reshape(-1)
    labels = domain_labels.reshape(-1).to(probs.dtype)
    if probs.shape != labels.shape:
        raise ConfigError(f"probs {tuple(probs.shape)} and labels {tuple(labels.shape)} differ")
    out_of_range = (probs < EPS) | (probs > 1 - EPS)
    n_clamped = int(out_of_range.sum())
    if n_clamped:
        numeric_warnings["eda_prob_clamped"] += n_clamped
        probs = probs.clamp(EPS, 1 - EPS)
    ll = labels * torch.log(probs) + (1 - labels) * torch.log1p(-probs)
    return -ll.mean()


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    diff = a.unsqueeze(1) - b.unsqueeze(0)
    return (diff * diff).sum(-1)


def median_heuristic_bandwidths(pooled_features: torch.Tensor,
                                scales: Sequence[float] = DEFAULT_KERNEL_SCALES) -> KernelBank:
    x = pooled_features.detach().reshape(len(pooled_features), -1).double()
    if len(x) < 2:
        raise EstimatorDegeneracyError("median heuristic needs at least 2 samples")
    d2 = _sq_dists(x, x)
    iu = torch.triu_indices(len(x), len(x), offset=1)
    pairs = d2[iu[0], iu[1]]
    m = float(np.median(pairs.numpy()))
    if m == 0.0:
        m = 1.0
    return KernelBank(tuple(m * float(s) for s in scales))


def mkmmd(target_pooled: torch.Tensor, aux_pooled: torch.Tensor, kernels: KernelBank) -> torch.Tensor:
    """Multi-kernel squared MMD between two batches (biased V-statistic).

    Identical batches give exactly zero. The value is differentiable with
    respect to both inputs; the bandwidths are treated as constants.
    """
    x = target_pooled.reshape(len(target_pooled), -1)
    y = aux_pooled.reshape(len(aux_pooled), -1)
    if x.shape[1] != y.shape[1]:
        raise ConfigError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    if len(x) < 2 or len(y) < 2:
        raise EstimatorDegeneracyError(
            f"mkmmd needs >= 2 samples per side, got {len(x)} and {len(y)}"
        )
    dxx, dyy, dxy = _sq_dists(x, x), _sq_dists(y, y), _sq_dists(x, y)
    total = x.new_zeros(())
    for bw in kernels.bandwidths:
        total = total + (torch.exp(-dxx / bw).mean() + torch.exp(-dyy / bw).mean()
                         - 2 * torch.exp(-dxy / bw).mean())
    return total
