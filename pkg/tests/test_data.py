import hashlib
from dataclasses import replace

import numpy as np
import pytest
import torch
from PIL import Image

from protoxfer import data as D
from protoxfer.eda import median_heuristic_bandwidths, mkmmd
from protoxfer.errors import ConfigError, DataError
from protoxfer.model import DomainTag


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _xy(m):
    return np.array([r.payload for r in m.records]), m.labels


def test_generator_byte_identical(tmp_path):
    spec = D.SyntheticSpec(n_target=100, n_aux=200)
    for name in ("a", "b"):
        t, a = D.generate_synthetic_domains(spec)
        D.write_manifest(t, tmp_path / f"t_{name}.tsv")
        D.write_manifest(a, tmp_path / f"a_{name}.tsv")
    assert _sha(tmp_path / "t_a.tsv") == _sha(tmp_path / "t_b.tsv")
    assert _sha(tmp_path / "a_a.tsv") == _sha(tmp_path / "a_b.tsv")
    t2, _ = D.generate_synthetic_domains(replace(spec, seed=1))
    D.write_manifest(t2, tmp_path / "t_c.tsv")
    assert _sha(tmp_path / "t_a.tsv") != _sha(tmp_path / "t_c.tsv")


def test_target_labels_are_generating_cluster():
    spec = D.SyntheticSpec(K=3, n_target=300, n_aux=300)
    t, _ = D.generate_synthetic_domains(spec)
    assert all(r.label == r.fine_label for r in t.records)
    x, y = _xy(t)
    means = D.cluster_means(spec)
    # the empirical cluster means sit close to the generating means
    for k in range(3):
        assert np.linalg.norm(x[y == k].mean(0) - means[k]) < 0.6
    assert t.histogram == [100, 100, 100]


def test_cluster_geometry():
    spec = D.SyntheticSpec(K=4, dim=6, class_separation=2.5)
    m = D.cluster_means(spec)
    d = np.linalg.norm(m[:, None] - m[None], axis=2)
    assert np.allclose(d[~np.eye(4, dtype=bool)], 2.5)


def test_uniform_full_mismatch_inverts_labels():
    spec = D.SyntheticSpec(n_target=20, n_aux=200, mismatch_rate=1.0, mismatch_mode="UNIFORM")
    _, a = D.generate_synthetic_domains(spec)
    assert all(r.label == 1 - r.fine_label for r in a.records)


def test_boundary_flips_in_lowest_margin_tercile():
    spec = D.SyntheticSpec()
    _, a = D.generate_synthetic_domains(spec)
    flipped = np.array([r.label != r.fine_label for r in a.records])
    assert flipped.sum() == int(0.3 * 4000) == 1200 == a.meta["n_flipped"]
    # undo the affine shift and measure distance to the two-class decision boundary
    R, t = D.domain_shift(spec)
    x0 = (_xy(a)[0] - t) @ R
    means = D.cluster_means(spec)
    margin = np.abs(np.linalg.norm(x0 - means[0], axis=1) - np.linalg.norm(x0 - means[1], axis=1))
    rank = np.argsort(np.argsort(margin, kind="stable"), kind="stable")
    assert (rank[flipped] < 4000 / 3).all()
    assert margin[flipped].max() <= margin[~flipped].min()


def test_identity_shift_domains_match():
    spec = D.SyntheticSpec(rotation_deg=0.0, translation=0.0, mismatch_rate=0.0)
    t, a = D.generate_synthetic_domains(spec)
    X = torch.tensor(_xy(t)[0], dtype=torch.float64)
    Y = torch.tensor(_xy(a)[0][:800], dtype=torch.float64)
    same = mkmmd(X, Y, median_heuristic_bandwidths(torch.cat([X, Y]))).item()
    assert abs(same) < 0.02
    _, a2 = D.generate_synthetic_domains(D.SyntheticSpec(mismatch_rate=0.0))
    Y2 = torch.tensor(_xy(a2)[0][:800], dtype=torch.float64)
    shifted = mkmmd(X, Y2, median_heuristic_bandwidths(torch.cat([X, Y2]))).item()
    assert shifted > 5 * same


def test_flip_count_floor():
    assert D.SyntheticSpec(n_aux=1001, mismatch_rate=0.3).n_flips == 300
    assert D.SyntheticSpec(n_aux=4000, mismatch_rate=0.3).n_flips == 1200


def test_spec_validation():
    with pytest.raises(ConfigError):
        D.SyntheticSpec(mismatch_rate=1.5)
    with pytest.raises(ConfigError):
        D.SyntheticSpec(K=5, dim=3)


# ---------------------------------------------------------------- sampling

def _aux(per_class, K=2):
    recs = [D.Record(id=f"r{k}_{i}", label=k, payload=(float(i),)) for k in range(K) for i in range(per_class[k])]
    return D.DatasetManifest(DomainTag.AUXILIARY, tuple(recs), K)


def test_balanced_exact():
    sub = D.balanced_aux_subset(_aux([100, 100]), 100, seed=0)
    assert sub.histogram == [50, 50]


def test_balanced_odd_size():
    sub = D.balanced_aux_subset(_aux([40, 40, 40], K=3), 100, seed=1)
    h = sub.histogram
    assert sum(h) == 100 and max(h) - min(h) <= 1


def test_balanced_deterministic():
    a = D.balanced_aux_subset(_aux([60, 90]), 50, seed=3).ids
    b = D.balanced_aux_subset(_aux([60, 90]), 50, seed=3).ids
    assert a == b
    assert a != D.balanced_aux_subset(_aux([60, 90]), 50, seed=4).ids


def test_balanced_small_class_with_replacement():
    sub = D.balanced_aux_subset(_aux([3, 100]), 40, seed=0)
    assert sub.histogram == [20, 20]
    assert len(set(sub.ids)) == 40
    assert sub.meta["with_replacement"] == 17


def test_balanced_empty_class_is_error():
    with pytest.raises(DataError):
        D.balanced_aux_subset(_aux([0, 10]), 10, seed=0)


def test_split_disjoint_ratio_and_stratified():
    t, _ = D.generate_synthetic_domains(D.SyntheticSpec(n_target=800, n_aux=0))
    tr, te = D.split_manifest(t, 0.8, 0)
    assert not set(tr.ids) & set(te.ids)
    assert len(tr) == 640 and len(te) == 160
    assert tr.histogram == [320, 320]


def test_split_respects_groups():
    recs = tuple(D.Record(id=f"s{i}", label=i % 2, group=f"g{i // 4}", payload=(0.0,)) for i in range(80))
    m = D.DatasetManifest(DomainTag.TARGET, recs, 2)
    for seed in range(5):
        tr, te = D.split_manifest(m, 0.8, seed)
        g_tr = {r.group for r in tr.records}
        g_te = {r.group for r in te.records}
        assert not g_tr & g_te
        assert len(tr) + len(te) == 80


def test_stratified_fraction():
    t, _ = D.generate_synthetic_domains(D.SyntheticSpec(n_target=200, n_aux=0))
    assert D.stratified_fraction(t, 0.1, 0).histogram == [10, 10]
    assert D.stratified_fraction(t, 1.0, 0) is t


def test_manifest_validation():
    with pytest.raises(DataError):
        D.DatasetManifest(DomainTag.TARGET, (D.Record("a", 0), D.Record("a", 1)), 2)
    with pytest.raises(DataError):
        D.DatasetManifest(DomainTag.TARGET, (D.Record("a", 3),), 2)


# ---------------------------------------------------------------- images

def _png(path, color):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (12, 10), color).save(path)


@pytest.fixture
def image_root(tmp_path):
    root = tmp_path / "imgs"
    for i in range(3):
        _png(root / "abnormal" / f"a{i}.png", (200, 10 * i, 0))
    for i in range(5):
        _png(root / "normal" / f"n{i}.png", (0, 10 * i, 200))
    (root / "normal" / "sub").mkdir()
    (root / "normal" / "sub" / "notes.txt").write_text("not an image")
    (root / "abnormal" / "broken.png").write_bytes(b"garbage")
    return root


def test_ingest_image_folder(image_root, tmp_path):
    m = D.ingest_image_folder(image_root, 16)
    assert m.num_classes == 2 and m.class_names == ("abnormal", "normal")
    assert m.histogram == [3, 5]
    assert m.meta["warnings"] == 2
    D.write_manifest(m, tmp_path / "m1.tsv")
    D.write_manifest(D.ingest_image_folder(image_root, 16), tmp_path / "m2.tsv")
    assert _sha(tmp_path / "m1.tsv") == _sha(tmp_path / "m2.tsv")
    X, y = D.materialize(m, 16)
    assert X.shape == (8, 3, 16, 16) and y.tolist() == [0, 0, 0, 1, 1, 1, 1, 1]


def test_ingest_empty_class_is_error(tmp_path):
    _png(tmp_path / "r" / "a" / "x.png", (0, 0, 0))
    (tmp_path / "r" / "b").mkdir()
    with pytest.raises(DataError, match="'b'"):
        D.ingest_image_folder(tmp_path / "r")


def test_augment_identity_flip_and_determinism():
    img = torch.rand(3, 12, 10, generator=torch.Generator().manual_seed(0))
    rng = np.random.default_rng(0)
    assert torch.equal(D.augment(img, D.AugmentPolicy.off(), rng), img)
    flip = replace(D.AugmentPolicy.off(), p_hflip=1.0)
    once = D.augment(img, flip, rng)
    assert not torch.equal(once, img)
    assert torch.equal(D.augment(once, flip, rng), img)
    full = D.AugmentPolicy(p_color_jitter=1.0, p_grayscale=0.5, p_blur=1.0, p_hflip=0.5)
    a = D.augment(img, full, np.random.default_rng(7))
    b = D.augment(img, full, np.random.default_rng(7))
    assert torch.equal(a, b) and not torch.equal(a, img)
    vec = torch.randn(5)
    assert D.augment(vec, full, rng) is vec


# ---------------------------------------------------------------- manifest files

def test_manifest_round_trip(tmp_path):
    t, _ = D.generate_synthetic_domains(D.SyntheticSpec(n_target=30, n_aux=0))
    p = tmp_path / "t.tsv"
    D.write_manifest(t, p)
    back = D.read_manifest(p)
    assert back.records == t.records
    assert back.provenance_hash == t.provenance_hash
    lines = p.read_text().splitlines()
    assert lines[0] == "# protoxfer-manifest 1"
    assert "id\tlabel\tgroup\tlocator\tfine_label" in lines


def test_manifest_tampered_histogram(tmp_path):
    t, _ = D.generate_synthetic_domains(D.SyntheticSpec(n_target=30, n_aux=0))
    p = tmp_path / "t.tsv"
    D.write_manifest(t, p)
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DataError, match="histogram"):
        D.read_manifest(p)
    (tmp_path / "x.tsv").write_text("hello\n")
    with pytest.raises(DataError):
        D.read_manifest(tmp_path / "x.tsv")
