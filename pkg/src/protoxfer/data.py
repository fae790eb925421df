"""Two-domain datasets: synthetic generator, manifests, sampling, image ingestion, augmentation."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from protoxfer.errors import ConfigError, DataError
from protoxfer.model import DomainTag

log = logging.getLogger(__name__)

MANIFEST_MAGIC = "# protoxfer-manifest 1"
MANIFEST_COLUMNS = ("id", "label", "group", "locator", "fine_label")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class MismatchMode(str, enum.Enum):
    UNIFORM = "UNIFORM"
    BOUNDARY = "BOUNDARY"


@dataclass(frozen=True)
class Record:
    id: str
    label: int
    group: Optional[str] = None
    locator: Optional[str] = None
    payload: Optional[tuple[float, ...]] = None
    fine_label: Optional[int] = None


@dataclass(frozen=True)
class DatasetManifest:
    domain: DomainTag
    records: tuple[Record, ...]
    num_classes: int
    class_names: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "domain", DomainTag.parse(self.domain))
        object.__setattr__(self, "records", tuple(self.records))
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(str(k) for k in range(self.num_classes)))
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = [k for k, c in Counter(ids).items() if c > 1][:5]
            raise DataError(f"duplicate sample ids in manifest: {dup}")
        for r in self.records:
            if not 0 <= r.label < self.num_classes:
                raise DataError(f"record {r.id} has label {r.label} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.records)

    @property
    def histogram(self) -> list[int]:
        h = [0] * self.num_classes
        for r in self.records:
            h[r.label] += 1
        return h

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def provenance_hash(self) -> str:
        blob = json.dumps(self.provenance, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def subset(self, indices: Sequence[int], **meta) -> "DatasetManifest":
        return replace(self, records=tuple(self.records[i] for i in indices),
                       meta={**self.meta, **meta})


# --------------------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    """Gaussian-cluster benchmark; the auxiliary domain gets an affine shift and label flips.

    ``translation`` is either a magnitude (applied along a seeded random
    direction) or an explicit vector of length ``dim``. Rotation acts in a
    seeded random 2-plane.
    """

    K: int = 2
    dim: int = 16
    n_target: int = 800
    n_aux: int = 4000
    class_separation: float = 3.0
    rotation_deg: float = 25.0
    translation: Union[float, list[float]] = 1.0
    mismatch_rate: float = 0.3
    mismatch_mode: MismatchMode = MismatchMode.BOUNDARY
    seed: int = 0

    def __post_init__(self):
        self.mismatch_mode = MismatchMode(self.mismatch_mode)
        self.validate()

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.dim < self.K:
            raise ConfigError(f"dim ({self.dim}) must be >= K ({self.K}) to place a simplex")
        if self.n_target < self.K or self.n_aux < 0:
            raise ConfigError("n_target must be >= K and n_aux >= 0")
        if not 0.0 <= self.mismatch_rate <= 1.0:
            raise ConfigError("mismatch_rate must lie in [0, 1]")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be non-negative")
        if not isinstance(self.translation, (int, float)) and len(self.translation) != self.dim:
            raise ConfigError("translation vector must have length dim")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mismatch_mode"] = self.mismatch_mode.value
        return d

    @property
    def n_flips(self) -> int:
        # guard against 0.3 * 4000 landing just below an integer
        return int(math.floor(self.mismatch_rate * self.n_aux + 1e-9))


def cluster_means(spec: SyntheticSpec) -> np.ndarray:
    """Vertices of a regular simplex with pairwise distance ``class_separation``, seeded orientation."""
    rng = np.random.default_rng([spec.seed, 0])
    q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.K)))
    vertices = (np.eye(spec.K) - 1.0 / spec.K) * (spec.class_separation / math.sqrt(2.0))
    return vertices @ q.T


def domain_shift(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and translation vector applied to auxiliary features."""
    rng = np.random.default_rng([spec.seed, 1])
    plane, _ = np.linalg.qr(rng.standard_normal((spec.dim, 2)))
    u, v = plane[:, 0], plane[:, 1]
    th = math.radians(spec.rotation_deg)
    R = (np.eye(spec.dim) + (math.cos(th) - 1) * (np.outer(u, u) + np.outer(v, v))
         + math.sin(th) * (np.outer(v, u) - np.outer(u, v)))
    if isinstance(spec.translation, (int, float)):
        d = rng.standard_normal(spec.dim)
        t = d / np.linalg.norm(d) * float(spec.translation)
    else:
        t = np.asarray(spec.translation, dtype=np.float64)
    return R, t


def _margins(x: np.ndarray, y: np.ndarray, means: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.linalg.norm(x[:, None, :] - means[None, :, :], axis=2)
    own = d[np.arange(len(x)), y]
    others = d.copy()
    others[np.arange(len(x)), y] = np.inf
    runner_up = others.argmin(1)
    return others.min(1) - own, runner_up


def _balanced_labels(n: int, K: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % K)


def _vector_records(prefix: str, x: np.ndarray, y: np.ndarray, fine: np.ndarray) -> list[Record]:
    return [
        Record(id=f"{prefix}{i:05d}", label=int(y[i]), payload=tuple(float(v) for v in x[i]),
               fine_label=int(fine[i]))
        for i in range(len(x))
    ]


def generate_synthetic_domains(spec: SyntheticSpec) -> tuple[DatasetManifest, DatasetManifest]:
    spec.validate()
    means = cluster_means(spec)
    R, t = domain_shift(spec)

    rng_t = np.random.default_rng([spec.seed, 2])
    yt = _balanced_labels(spec.n_target, spec.K, rng_t)
    xt = means[yt] + rng_t.standard_normal((spec.n_target, spec.dim))

    rng_a = np.random.default_rng([spec.seed, 3])
    ya_clean = _balanced_labels(spec.n_aux, spec.K, rng_a)
    xa0 = means[ya_clean] + rng_a.standard_normal((spec.n_aux, spec.dim))
    xa = xa0 @ R.T + t

    ya = ya_clean.copy()
    n_flip = spec.n_flips
    if spec.n_aux and n_flip:
        margin, runner_up = _margins(xa0, ya_clean, means)
        if spec.mismatch_mode == MismatchMode.UNIFORM:
            flip = rng_a.choice(spec.n_aux, size=n_flip, replace=False)
        else:
            # distance to the nearest decision boundary, regardless of side
            flip = np.argsort(np.abs(margin), kind="stable")[:n_flip]
        if spec.K == 2:
            ya[flip] = 1 - ya_clean[flip]
        elif spec.mismatch_mode == MismatchMode.BOUNDARY:
            ya[flip] = runner_up[flip]
        else:
            shift = rng_a.integers(1, spec.K, size=n_flip)
            ya[flip] = (ya_clean[flip] + shift) % spec.K
    prov = {"generator": "synthetic", "spec": spec.to_dict()}
    target = DatasetManifest(DomainTag.TARGET, _vector_records("t", xt, yt, yt), spec.K,
                             provenance={**prov, "domain": "TARGET"})
    aux = DatasetManifest(DomainTag.AUXILIARY, _vector_records("a", xa, ya, ya_clean), spec.K,
                          provenance={**prov, "domain": "AUXILIARY"},
                          meta={"n_flipped": int((ya != ya_clean).sum())})
    return target, aux


# --------------------------------------------------------------------------- splitting / sampling


def split_manifest(manifest: DatasetManifest, train_ratio: float = 0.8,
                   seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Label-stratified, group-aware train/test split.

    Records sharing a ``group`` always land on the same side; records without
    a group are their own group.
    """
    if not 0.0 < train_ratio < 1.0:
        raise ConfigError("train_ratio must lie in (0, 1)")
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        groups.setdefault(r.group if r.group is not None else f"__id__{r.id}", []).append(i)
    by_label: dict[int, list[str]] = {}
    for g, idx in groups.items():
        by_label.setdefault(manifest.records[idx[0]].label, []).append(g)
    rng = np.random.default_rng([seed, 17])
    train_idx, test_idx = [], []
    for label in sorted(by_label):
        gs = sorted(by_label[label])
        order = rng.permutation(len(gs))
        n_train = int(round(len(gs) * train_ratio))
        for j, gi in enumerate(order):
            (train_idx if j < n_train else test_idx).extend(groups[gs[gi]])
    return (manifest.subset(sorted(train_idx), split="train"),
            manifest.subset(sorted(test_idx), split="test"))


def stratified_fraction(manifest: DatasetManifest, fraction: float, seed: int = 0) -> DatasetManifest:
    """Keep ``fraction`` of each class (at least one sample per non-empty class)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return manifest
    rng = np.random.default_rng([seed, 23])
    labels = manifest.labels
    keep = []
    for k in range(manifest.num_classes):
        idx = np.flatnonzero(labels == k)
        if len(idx):
            n = max(1, int(round(len(idx) * fraction)))
            keep.extend(rng.choice(idx, size=n, replace=False).tolist())
    return manifest.subset(sorted(keep), fraction=fraction)


def balanced_indices(labels: np.ndarray, num_classes: int, size: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-balanced sample; per-class counts differ by at most one."""
    per_class = [np.flatnonzero(labels == k) for k in range(num_classes)]
    empty = [k for k, idx in enumerate(per_class) if len(idx) == 0]
    if empty:
        raise DataError(f"auxiliary domain has no samples of class(es) {empty}")
    base, extra = divmod(size, num_classes)
    bonus = set(rng.permutation(num_classes)[:extra].tolist())
    out = []
    for k, idx in enumerate(per_class):
        n = base + (k in bonus)
        if n > len(idx):
            log.warning("class %d has %d samples, drawing %d with replacement", k, len(idx), n)
            out.append(rng.choice(idx, size=n, replace=True))
        else:
            out.append(rng.choice(idx, size=n, replace=False))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def balanced_aux_subset(aux: DatasetManifest, size: int, seed) -> DatasetManifest:
    """Class-balanced subset of the auxiliary pool; callers pass an epoch-derived seed.

    Classes too small for their share are drawn with replacement; repeated
    records get a ``~n`` id suffix so ids stay unique.
    """
    rng = np.random.default_rng(seed)
    idx = balanced_indices(aux.labels, aux.num_classes, size, rng)
    seen: Counter = Counter()
    records = []
    for i in idx.tolist():
        r = aux.records[i]
        seen[r.id] += 1
        records.append(r if seen[r.id] == 1 else replace(r, id=f"{r.id}~{seen[r.id] - 1}"))
    n_repeat = sum(c - 1 for c in seen.values())
    return replace(aux, records=tuple(records),
                   meta={**aux.meta, "balanced_size": size, "with_replacement": n_repeat})


# --------------------------------------------------------------------------- images


def ingest_image_folder(root, resize: int = 224) -> DatasetManifest:
    """Manifest for ``root/<class_name>/<images>``; class indices follow sorted folder names."""
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise DataError(f"{root} needs at least two class folders, found {len(class_dirs)}")
    records, skipped = [], 0
    for k, cdir in enumerate(class_dirs):
        n_before = len(records)
        for path in sorted(p for p in cdir.rglob("*") if p.is_file()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                skipped += 1
                continue
            try:
                with Image.open(path) as im:
                    im.verify()
            except (OSError, UnidentifiedImageError):
                skipped += 1
                continue
            rel = path.relative_to(root).as_posix()
            records.append(Record(id=rel, label=k, locator=str(path.resolve())))
        if len(records) == n_before:
            raise DataError(f"class folder {cdir.name!r} contains no readable images")
    if skipped:
        log.warning("skipped %d unreadable or non-image files under %s", skipped, root)
    return DatasetManifest(
        DomainTag.TARGET, tuple(records), len(class_dirs),
        class_names=tuple(p.name for p in class_dirs),
        provenance={"generator": "image_folder", "root": str(root.resolve()), "resize": resize},
        meta={"warnings": skipped, "resize": resize},
    )


def load_image(locator: str, size: int) -> torch.Tensor:
    from PIL import Image

    with Image.open(locator) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def materialize(manifest: DatasetManifest, image_size: Optional[int] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack all payloads into ``(X, y)`` tensors."""
    if not manifest.records:
        return torch.zeros(0), torch.zeros(0, dtype=torch.long)
    y = torch.as_tensor(manifest.labels)
    if manifest.records[0].payload is not None:
        X = torch.tensor(np.array([r.payload for r in manifest.records]), dtype=torch.float32)
    else:
        size = image_size or manifest.meta.get("resize", 224)
        X = torch.stack([load_image(r.locator, size) for r in manifest.records])
    return X, y


@dataclass
class AugmentPolicy:
    p_color_jitter: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    p_grayscale: float = 0.2
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    p_hflip: float = 0.5

    @classmethod
    def off(cls) -> "AugmentPolicy":
        return cls(0.0, 0.4, 0.4, 0.4, 0.0, 0.0, (0.1, 2.0), 0.0)


def augment(payload: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Color jitter, grayscale, Gaussian blur and horizontal flip on a (C, H, W) image.

    Vector payloads are returned unchanged.
    """
    from torchvision.transforms.v2 import functional as TF

    if payload.dim() != 3:
        return payload
    x = payload
    if rng.random() < policy.p_color_jitter:
        b = rng.uniform(1 - policy.brightness, 1 + policy.brightness)
        c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        s = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
        x = TF.adjust_brightness(x, float(b))
        x = TF.adjust_contrast(x, float(c))
        if x.shape[0] == 3:
            x = TF.adjust_saturation(x, float(s))
    if rng.random() < policy.p_grayscale and x.shape[0] == 3:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)
    if rng.random() < policy.p_blur:
        sigma = float(rng.uniform(*policy.blur_sigma))
        side = min(x.shape[-2:])
        k = min(2 * math.ceil(3 * sigma) + 1, side if side % 2 else side - 1)
        if k >= 3:
            x = TF.gaussian_blur(x, kernel_size=[k, k], sigma=[sigma, sigma])
    if rng.random() < policy.p_hflip:
        x = TF.horizontal_flip(x)
    return x


# --------------------------------------------------------------------------- manifest files


def _encode_locator(r: Record) -> str:
    if r.payload is not None:
        return "vec:" + " ".join(repr(v) for v in r.payload)
    return r.locator or ""


def write_manifest(manifest: DatasetManifest, path) -> None:
    header = {
        "domain": manifest.domain.name,
        "num_classes": manifest.num_classes,
        "class_names": list(manifest.class_names),
        "provenance": manifest.provenance,
        "provenance_hash": manifest.provenance_hash,
        "histogram": manifest.histogram,
        "meta": manifest.meta,
    }
    lines = [MANIFEST_MAGIC]
    for key, value in header.items():
        lines.append(f"# {key}: {json.dumps(value, sort_keys=True)}")
    lines.append("\t".join(MANIFEST_COLUMNS))
    for r in manifest.records:
        lines.append("\t".join([
            r.id, str(r.label), "" if r.group is None else r.group, _encode_locator(r),
            "" if r.fine_label is None else str(r.fine_label),
        ]))
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise DataError(f"{path} is not a protoxfer manifest")
    header, i = {}, 1
    while i < len(lines) and lines[i].startswith("# "):
        key, _, value = lines[i][2:].partition(": ")
        header[key] = json.loads(value)
        i += 1
    if i >= len(lines) or tuple(lines[i].split("\t")) != MANIFEST_COLUMNS:
        raise DataError(f"{path}: missing column header")
    records = []
    for line in lines[i + 1:]:
        if not line:
            continue
        rid, label, group, loc, fine = line.split("\t")
        payload, locator = None, None
        if loc.startswith("vec:"):
            payload = tuple(float(v) for v in loc[4:].split())
        else:
            locator = loc or None
        records.append(Record(rid, int(label), group or None, locator, payload,
                              int(fine) if fine else None))
    m = DatasetManifest(header["domain"], tuple(records), header["num_classes"],
                        tuple(header.get("class_names", ())), header.get("provenance", {}),
                        header.get("meta", {}))
    if "histogram" in header and header["histogram"] != m.histogram:
        raise DataError(f"{path}: header histogram {header['histogram']} != records {m.histogram}")
    return m
