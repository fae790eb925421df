"""Prototype-based consistency scoring and supervised contrastive alignment."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch

from protoxfer.errors import ConfigError, DataError, NumericError

psa_warnings: Counter = Counter()


class _NoPositive:
    """Result of ``supcon_loss`` for an anchor with no same-label partner."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NO_POSITIVE"

    def __bool__(self):
        return False


NO_POSITIVE = _NoPositive()


@dataclass(frozen=True)
class PrototypeTable:
    P: torch.Tensor
    class_counts: torch.Tensor
    epoch_stamp: int = 0

    @property
    def num_classes(self) -> int:
        return self.P.shape[0]

    @property
    def defined(self) -> torch.Tensor:
        return self.class_counts > 0

    def require_complete(self) -> None:
        missing = (~self.defined).nonzero().flatten().tolist()
        if missing:
            raise DataError(f"prototype undefined for class(es) {missing}: no target samples")


@dataclass(frozen=True)
class ConsistencyRecord:
    assignment: torch.Tensor
    eta: float
    sample_id: str


@torch.no_grad()
def compute_prototypes(features_f: torch.Tensor, labels: torch.Tensor, num_classes: int,
                       epoch: int = 0) -> PrototypeTable:
    """Per-class mean of target features. Rows of empty classes are zero and flagged undefined."""
    if features_f.dim() != 2 or len(features_f) != len(labels):
        raise ConfigError("features must be (N, d) with one label per row")
    labels = labels.long()
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    feats = features_f.detach()
    counts = torch.bincount(labels, minlength=num_classes)
    sums = feats.new_zeros((num_classes, feats.shape[1])).index_add_(0, labels, feats)
    denom = counts.clamp(min=1).to(feats.dtype).unsqueeze(1)
    return PrototypeTable(sums / denom, counts, int(epoch))


def soft_assign(f_aux: torch.Tensor, prototypes: PrototypeTable) -> torch.Tensor:
    """Softmax over negative (unsquared) Euclidean distances to each prototype.

    Accepts a single d-vector or an (N, d) batch.
    """
    prototypes.require_complete()
    single = f_aux.dim() == 1
    f = f_aux.detach().reshape(1, -1) if single else f_aux.detach()
    P = prototypes.P.to(f.dtype)
    if f.shape[1] != P.shape[1]:
        raise ConfigError(f"feature dim {f.shape[1]} != prototype dim {P.shape[1]}")
    diff = f.unsqueeze(1) - P.unsqueeze(0)
    dist = (diff * diff).sum(-1).sqrt()
    U = torch.softmax(-dist, dim=1)
    return U[0] if single else U


def consistency_score(U: torch.Tensor, label) -> torch.Tensor:
    """Probability mass the assignment puts on the sample's own label."""
    if U.dim() == 1:
        return U[int(label)]
    label = torch.as_tensor(label, device=U.device).long().reshape(-1, 1)
    return U.gather(1, label).squeeze(1)


def filter_mask(etas: torch.Tensor, sigma: float) -> torch.Tensor:
    if not 0.0 <= sigma <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {sigma}")
    return torch.as_tensor(etas) >= sigma


def consistency_records(U: torch.Tensor, labels: torch.Tensor,
                        sample_ids: Sequence[str]) -> list[ConsistencyRecord]:
    etas = consistency_score(U, labels)
    return [ConsistencyRecord(U[i], float(etas[i]), sid) for i, sid in enumerate(sample_ids)]


def _cosine_matrix(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=1)
    if (norms == 0).any():
        bad = (norms == 0).nonzero().flatten().tolist()
        raise NumericError(f"zero-norm projection vector(s) at index {bad}")
    zn = z / norms.unsqueeze(1)
    return zn @ zn.T


def supcon_per_anchor(z_all: torch.Tensor, labels: torch.Tensor,
                      temperature: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Contrastive loss of every anchor in the batch.

    Returns ``(losses, valid)``; ``losses[i]`` is zero where ``valid[i]`` is
    False (the anchor has no positive).
    """
    n = len(z_all)
    labels = labels.reshape(-1)
    logits = _cosine_matrix(z_all) / temperature
    eye = torch.eye(n, dtype=torch.bool, device=z_all.device)
    others = ~eye
    pos = (labels.unsqueeze(0) == labels.unsqueeze(1)) & others
    n_pos = pos.sum(1)
    valid = n_pos > 0
    neg_inf = torch.finfo(logits.dtype).min
    log_denom = torch.logsumexp(logits.masked_fill(eye, neg_inf), dim=1)
    log_num = torch.logsumexp(logits.masked_fill(~pos, neg_inf), dim=1)
    losses = log_denom - log_num + torch.log(n_pos.clamp(min=1).to(logits.dtype))
    return torch.where(valid, losses, torch.zeros_like(losses)), valid


def supcon_loss(anchor_index: int, z_all: torch.Tensor, labels: torch.Tensor,
                temperature: float = 1.0):
    """Loss of a single anchor, or ``NO_POSITIVE`` if no other sample shares its label."""
    losses, valid = supcon_per_anchor(z_all, labels, temperature)
    if not bool(valid[anchor_index]):
        return NO_POSITIVE
    return losses[anchor_index]


def psa_loss(z_target: torch.Tensor, y_target: torch.Tensor, z_aux: torch.Tensor,
             y_aux: torch.Tensor, etas: torch.Tensor, sigma_align: float,
             temperature: float = 1.0) -> torch.Tensor:
    """Average contrastive loss over the target batch and the trusted auxiliary samples."""
    keep = filter_mask(etas.detach(), sigma_align).to(z_aux.device)
    z = torch.cat([z_target, z_aux[keep]], dim=0)
    y = torch.cat([y_target.reshape(-1), y_aux.reshape(-1)[keep]], dim=0)
    losses, valid = supcon_per_anchor(z, y, temperature)
    n_valid = int(valid.sum())
    if n_valid == 0:
        psa_warnings["all_anchors_without_positive"] += 1
        return z.sum() * 0.0
    return losses.sum() / n_valid


def write_diagnostics(path, sample_ids: Sequence[str], etas: Sequence[float],
                      sigma_align: float, sigma_clf: float) -> None:
    """One row per auxiliary sample: id, eta and whether each filter kept it."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "eta", "filtered_align", "filtered_clf"])
        for sid, eta in zip(sample_ids, etas):
            w.writerow([sid, repr(float(eta)), eta >= sigma_align, eta >= sigma_clf])

