"""Classification losses, the combined objective, and the two-domain training loop."""

from __future__ import annotations

import csv
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from protoxfer import eda, psa
from protoxfer.data import AugmentPolicy, DatasetManifest, augment, balanced_indices, materialize
from protoxfer.errors import ConfigError, DataError, NumericError
from protoxfer.model import BackboneConfig, DomainTag, DualBranchNet, InputKind, save_checkpoint

log = logging.getLogger(__name__)

EDA_VARIANTS = ("adversarial", "mkmmd", "off")
HISTORY_COLUMNS = (
    "epoch", "L_clf", "L_eda", "L_psa", "total", "n_aux_used_clf", "n_aux_used_align",
    "val_accuracy", "val_auc",
)


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.01
    gamma: float = 0.1
    sigma_align: float = 0.4
    sigma_clf: float = 0.9
    warmup_epochs: int = 5
    total_epochs: int = 20
    batch_size_target: int = 128
    batch_size_aux: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    seed: int = 0
    eda_variant: str = "adversarial"
    kernel_scales: list[float] = field(default_factory=lambda: list(eda.DEFAULT_KERNEL_SCALES))
    temperature: float = 1.0
    # ablation switch: every auxiliary sample gets eta = 1 and prototypes are never built
    force_eta_one: bool = False
    balanced_aux: bool = True
    augment: bool = False
    dtype: str = "float32"
    deterministic: bool = True
    debug: bool = False
    checkpoint_path: Optional[str] = None
    checkpoint_every: int = 0
    diagnostics_dir: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("alpha", "beta", "gamma", "learning_rate", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("sigma_align", "sigma_clf"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.total_epochs < 1 or not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("need 0 <= warmup_epochs < total_epochs")
        if self.batch_size_target < 2 or self.batch_size_aux < 2:
            raise ConfigError("batch sizes must be >= 2")
        if self.eda_variant not in EDA_VARIANTS:
            raise ConfigError(f"eda_variant must be one of {EDA_VARIANTS}, got {self.eda_variant!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        eda.KernelBank(tuple(self.kernel_scales))

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- losses


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if logits.dim() != 2 or len(logits) != len(labels):
        raise ConfigError(f"logits {tuple(logits.shape)} do not match {len(labels)} labels")
    if len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"labels must lie in [0, {logits.shape[1]})")


def intra_clf_loss(target_logits: torch.Tensor, target_labels: torch.Tensor) -> torch.Tensor:
    _check_labels(target_logits, target_labels)
    return F.cross_entropy(target_logits, target_labels.long())


def inter_clf_loss(aux_logits: torch.Tensor, aux_labels: torch.Tensor, etas: torch.Tensor,
                   sigma_clf: float, gamma: float) -> torch.Tensor:
    """Consistency-weighted cross-entropy over auxiliary samples with eta >= sigma_clf.

    The gamma factor is included. Eta acts as a constant weight.
    """
    _check_labels(aux_logits, aux_labels)
    keep = psa.filter_mask(etas.detach(), sigma_clf)
    if gamma == 0 or not bool(keep.any()):
        return aux_logits.sum() * 0.0
    ce = F.cross_entropy(aux_logits[keep], aux_labels.long()[keep], reduction="none")
    w = etas.detach()[keep].to(ce.dtype)
    return gamma * (w * ce).sum() / int(keep.sum())


def total_loss(clf, eda_loss, psa_loss, config: TrainConfig, epoch: int):
    for name, value in (("L_clf", clf), ("L_eda", eda_loss), ("L_psa", psa_loss)):
        if not math.isfinite(float(value.detach() if torch.is_tensor(value) else value)):
            raise NumericError(f"component {name} is not finite")
    if epoch < config.warmup_epochs:
        psa_loss = psa_loss * 0.0
    return clf + config.alpha * eda_loss + config.beta * psa_loss


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: DualBranchNet
    history: list[dict]
    config: TrainConfig
    prototypes: Optional[psa.PrototypeTable] = None


@contextmanager
def _single_threaded(enabled: bool):
    if not enabled:
        yield
        return
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def default_backbone(X: torch.Tensor, num_classes: int) -> BackboneConfig:
    if X.dim() == 4:
        return BackboneConfig(input_kind=InputKind.IMAGE, input_dim=X.shape[1],
                              stage_sizes=[16, 32, 64, 128], num_classes=num_classes)
    return BackboneConfig(input_dim=X.shape[1], num_classes=num_classes)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled split of ``range(n)`` into ceil(n / batch_size) near-equal batches."""
    if n == 0:
        return []
    return np.array_split(rng.permutation(n), math.ceil(n / batch_size))


class _AuxStream:
    """Cycles through an epoch's auxiliary subset, reshuffling on wrap-around."""

    def __init__(self, pool: np.ndarray, rng: np.random.Generator):
        self.pool, self.rng = pool, rng
        self.order = rng.permutation(pool)
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        n = min(n, len(self.pool))
        if self.pos + n > len(self.order):
            self.order = self.rng.permutation(self.pool)
            self.pos = 0
        out = self.order[self.pos:self.pos + n]
        self.pos += n
        return out


def _as_tensors(ds, dtype, image_size):
    if ds is None:
        return None, None, []
    if isinstance(ds, DatasetManifest):
        X, y = materialize(ds, image_size)
        return X.to(dtype), y.long(), ds.ids
    X, y = ds[0], ds[1]
    ids = list(ds[2]) if len(ds) > 2 else [str(i) for i in range(len(X))]
    return torch.as_tensor(X).to(dtype), torch.as_tensor(y).long(), ids


def _augment_batch(X: torch.Tensor, rng: np.random.Generator, policy: AugmentPolicy) -> torch.Tensor:
    if X.dim() != 4:
        return X
    return torch.stack([augment(x, policy, rng) for x in X])


@torch.no_grad()
def refresh_prototypes(model: DualBranchNet, X: torch.Tensor, y: torch.Tensor, num_classes: int,
                       epoch: int, batch_size: int = 512) -> psa.PrototypeTable:
    was_training = model.training
    model.eval()
    feats = [model(X[i:i + batch_size], DomainTag.TARGET).f for i in range(0, len(X), batch_size)]
    model.train(was_training)
    return psa.compute_prototypes(torch.cat(feats), y, num_classes, epoch)


@torch.no_grad()
def predict_proba(model: DualBranchNet, X: torch.Tensor, domain=DomainTag.TARGET,
                  batch_size: int = 512) -> torch.Tensor:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = [torch.softmax(model(X[i:i + batch_size].to(dtype), domain).logits, dim=1)
           for i in range(0, len(X), batch_size)]
    model.train(was_training)
    return torch.cat(out) if out else torch.zeros(0)


def train(target_dataset, aux_dataset, config: TrainConfig,
          backbone: Optional[BackboneConfig] = None, val_dataset=None,
          model: Optional[DualBranchNet] = None,
          on_epoch_end: Optional[Callable[[int, DualBranchNet, dict], None]] = None,
          image_size: Optional[int] = None) -> TrainResult:
    """Train the two-branch model.

    Datasets are ``DatasetManifest`` objects or ``(X, y[, ids])`` tuples; the
    auxiliary dataset may be ``None`` or empty. Per epoch: refresh prototypes
    (after warm-up), walk ceil(N_t / batch_size_target) target batches, pair
    each with a batch from a class-balanced auxiliary subset, and take one
    AdamW step on the combined objective.
    """
    config.validate()
    dtype = config.torch_dtype
    Xt, yt, _ = _as_tensors(target_dataset, dtype, image_size)
    Xa, ya, aux_ids = _as_tensors(aux_dataset, dtype, image_size)
    Xv, yv, _ = _as_tensors(val_dataset, dtype, image_size)
    if Xt is None or len(Xt) < 2:
        raise DataError("target training set needs at least 2 samples")
    has_aux = Xa is not None and len(Xa) > 0

    if model is None:
        backbone = backbone or default_backbone(Xt, int(yt.max()) + 1)
        model = DualBranchNet(backbone, seed=config.seed)
    K = model.config.num_classes
    for name, y in (("target", yt), ("auxiliary", ya if has_aux else None)):
        if y is not None and len(y) and (y.min() < 0 or y.max() >= K):
            raise DataError(f"{name} labels exceed the model's {K} classes")
    if has_aux and Xa.shape[1:] != Xt.shape[1:]:
        raise DataError(f"target samples {tuple(Xt.shape[1:])} and auxiliary "
                        f"{tuple(Xa.shape[1:])} differ in shape")
    model = model.to(dtype)
    model.train()

    torch.manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    policy = AugmentPolicy() if config.augment else None
    labels_np = ya.numpy() if has_aux else None
    history: list[dict] = []
    table = None
    diag_dir = Path(config.diagnostics_dir) if config.diagnostics_dir else None
    if diag_dir:
        diag_dir.mkdir(parents=True, exist_ok=True)

    with _single_threaded(config.deterministic):
        for epoch in range(config.total_epochs):
            rng = np.random.default_rng([config.seed, 101, epoch])
            post_warmup = epoch >= config.warmup_epochs
            use_eta = has_aux and post_warmup and not config.force_eta_one
            use_psa = post_warmup and config.beta > 0
            table = refresh_prototypes(model, Xt, yt, K, epoch) if use_eta else None

            batches = epoch_batches(len(Xt), config.batch_size_target, rng)
            stream = None
            if has_aux:
                if config.balanced_aux:
                    pool = balanced_indices(labels_np, K, len(Xt), rng)
                else:
                    pool = np.arange(len(Xa))
                stream = _AuxStream(pool, rng)

            sums = dict.fromkeys(("L_clf", "L_eda", "L_psa", "total"), 0.0)
            n_clf = n_align = 0
            seen_eta: dict[str, float] = {}
            for b, tb in enumerate(batches):
                xb_t, yb_t = Xt[tb], yt[tb]
                if policy is not None:
                    xb_t = _augment_batch(xb_t, rng, policy)
                out_t = model(xb_t, DomainTag.TARGET, with_projection=use_psa)
                L_intra = intra_clf_loss(out_t.logits, yb_t)

                zero = out_t.logits.sum() * 0.0
                L_inter, L_eda, L_psa = zero, zero, zero
                if has_aux:
                    n_a = max(2, round(len(tb) * config.batch_size_aux / config.batch_size_target))
                    ab = stream.take(n_a)
                    xb_a, yb_a = Xa[ab], ya[ab]
                    if policy is not None:
                        xb_a = _augment_batch(xb_a, rng, policy)
                    out_a = model(xb_a, DomainTag.AUXILIARY, with_projection=use_psa)
                    if use_eta:
                        etas = psa.consistency_score(psa.soft_assign(out_a.f, table), yb_a)
                    else:
                        etas = torch.ones(len(ab), dtype=dtype)
                    etas = etas.detach()
                    for i, e in zip(ab.tolist(), etas.tolist()):
                        seen_eta[aux_ids[i]] = e
                    L_inter = inter_clf_loss(out_a.logits, yb_a, etas, config.sigma_clf, config.gamma)
                    kept_clf = psa.filter_mask(etas, config.sigma_clf)
                    n_clf += int(kept_clf.sum()) if config.gamma > 0 else 0

                    if config.alpha > 0 and config.eda_variant == "adversarial":
                        probs = model.domain_discriminate(
                            torch.cat([out_t.pooled_intermediate, out_a.pooled_intermediate]))
                        dlabels = torch.cat([torch.zeros(len(tb)), torch.ones(len(ab))]).to(dtype)
                        L_eda = eda.adversarial_eda_loss(probs, dlabels)
                    elif config.alpha > 0 and config.eda_variant == "mkmmd":
                        pooled = torch.cat([out_t.pooled_intermediate, out_a.pooled_intermediate])
                        bank = eda.median_heuristic_bandwidths(pooled, config.kernel_scales)
                        L_eda = eda.mkmmd(out_t.pooled_intermediate, out_a.pooled_intermediate, bank)

                    if use_psa:
                        kept_align = psa.filter_mask(etas, config.sigma_align)
                        n_align += int(kept_align.sum())
                        L_psa = psa.psa_loss(out_t.z, yb_t, out_a.z, yb_a, etas,
                                             config.sigma_align, config.temperature)
                    if config.debug:
                        _assert_filtering(etas, kept_clf, config)
                elif use_psa:
                    empty = out_t.z[:0]
                    L_psa = psa.psa_loss(out_t.z, yb_t, empty, yb_t[:0], torch.ones(0, dtype=dtype),
                                         config.sigma_align, config.temperature)

                L_clf = L_intra + L_inter
                try:
                    loss = total_loss(L_clf, L_eda, L_psa, config, epoch)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()

                c, e = L_clf.item(), L_eda.item()
                p = L_psa.item() if post_warmup else 0.0
                sums["L_clf"] += c
                sums["L_eda"] += e
                sums["L_psa"] += p
                # reported in double precision from the logged components
                sums["total"] += c + config.alpha * e + config.beta * p

            nb = len(batches)
            row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()},
                   "n_aux_used_clf": n_clf, "n_aux_used_align": n_align,
                   "val_accuracy": float("nan"), "val_auc": float("nan")}
            if Xv is not None and len(Xv):
                from protoxfer.metrics import compute_metrics

                rep = compute_metrics(predict_proba(model, Xv), yv)
                row["val_accuracy"] = rep.accuracy
                row["val_auc"] = rep.roc_auc if rep.roc_auc is not None else float("nan")
            history.append(row)
            log.info("epoch %d: %s", epoch, {k: row[k] for k in ("L_clf", "L_eda", "L_psa", "total")})

            if diag_dir and seen_eta:
                ids = sorted(seen_eta)
                psa.write_diagnostics(diag_dir / f"diagnostics_epoch{epoch:03d}.csv", ids,
                                      [seen_eta[i] for i in ids], config.sigma_align, config.sigma_clf)
            if config.checkpoint_path and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(config.checkpoint_path, model, epoch + 1, config.to_dict())
            if on_epoch_end is not None:
                on_epoch_end(epoch, model, row)

    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, model, config.total_epochs, config.to_dict())
    model.eval()
    return TrainResult(model, history, config, table)


def _assert_filtering(etas: torch.Tensor, kept_clf: torch.Tensor, config: TrainConfig) -> None:
    if not bool((etas[kept_clf] >= config.sigma_clf).all()):
        raise AssertionError("auxiliary sample below sigma_clf used for classification")
    if bool((etas < 0).any() or (etas > 1).any()):
        raise AssertionError("consistency score outside [0, 1]")


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c]))
                        for c in HISTORY_COLUMNS])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("epoch", "n_aux_used_clf", "n_aux_used_align") else float(v))
                    for k, v in r.items()})
    return out
