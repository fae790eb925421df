import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from protoxfer import psa
from protoxfer.errors import ConfigError, DataError, NumericError
from protoxfer.psa import (NO_POSITIVE, compute_prototypes, consistency_score, filter_mask, psa_loss,
                           soft_assign, supcon_loss, supcon_per_anchor)

from conftest import analytic_grad, numeric_grad, rel_error


# ---------------------------------------------------------------- naive oracles

def naive_supcon(z, labels, i, tau=1.0):
    z = [list(map(float, row)) for row in z]
    labels = [int(v) for v in labels]

    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    pos = [j for j in range(len(z)) if j != i and labels[j] == labels[i]]
    if not pos:
        return None
    denom = sum(math.exp(cos(z[i], z[q]) / tau) for q in range(len(z)) if q != i)
    num = sum(math.exp(cos(z[i], z[p]) / tau) for p in pos) / len(pos)
    return -math.log(num / denom)


def naive_psa(zt, yt, za, ya, etas, sigma, tau=1.0):
    z = list(zt) + [za[k] for k in range(len(za)) if etas[k] >= sigma]
    y = list(yt) + [ya[k] for k in range(len(za)) if etas[k] >= sigma]
    vals = [naive_supcon(z, y, i, tau) for i in range(len(z))]
    vals = [v for v in vals if v is not None]
    return sum(vals) / len(vals) if vals else 0.0


# ---------------------------------------------------------------- prototypes

def test_prototype_mean_of_two_points():
    t = compute_prototypes(torch.tensor([[0.0, 0.0], [2.0, 2.0]]), torch.tensor([0, 0]), 1)
    assert torch.equal(t.P[0], torch.tensor([1.0, 1.0]))


def test_single_sample_prototype_is_the_sample():
    f = torch.tensor([[0.3, -1.7], [5.0, 2.5]], dtype=torch.float64)
    t = compute_prototypes(f, torch.tensor([1, 0]), 2)
    assert torch.equal(t.P[1], f[0]) and torch.equal(t.P[0], f[1])


def test_prototypes_match_loop_oracle(rng):
    f = rng.standard_normal((300, 7))
    y = rng.integers(0, 3, 300)
    t = compute_prototypes(torch.tensor(f), torch.tensor(y), 3)
    for k in range(3):
        rows = [f[i] for i in range(300) if y[i] == k]
        loop = [sum(r[j] for r in rows) / len(rows) for j in range(7)]
        assert np.max(np.abs(t.P[k].numpy() - np.array(loop))) <= 1e-12
    assert t.class_counts.tolist() == [int((y == k).sum()) for k in range(3)]


def test_missing_class_is_undefined_and_rejected():
    t = compute_prototypes(torch.randn(4, 2), torch.tensor([0, 0, 2, 2]), 3)
    assert t.defined.tolist() == [True, False, True]
    with pytest.raises(DataError, match=r"\[1\]"):
        soft_assign(torch.randn(2), t)


# ---------------------------------------------------------------- soft assignment

def _table(P):
    P = torch.as_tensor(P, dtype=torch.float64)
    return psa.PrototypeTable(P, torch.ones(len(P), dtype=torch.long))


def test_equidistant_gives_half():
    U = soft_assign(torch.tensor([0.0, 1.0], dtype=torch.float64), _table([[-1.0, 1.0], [1.0, 1.0]]))
    assert torch.allclose(U, torch.tensor([0.5, 0.5], dtype=torch.float64), atol=1e-15)


def test_distance_ln3_gives_three_to_one():
    U = soft_assign(torch.zeros(2, dtype=torch.float64), _table([[0.0, 0.0], [math.log(3), 0.0]]))
    assert torch.allclose(U, torch.tensor([0.75, 0.25], dtype=torch.float64), atol=1e-12)


def test_soft_assign_k12_scalar_oracle(rng):
    P = rng.standard_normal((12, 5))
    f = rng.standard_normal(5)
    U = soft_assign(torch.tensor(f), _table(P)).numpy()
    d = [math.sqrt(sum((f[j] - P[k][j]) ** 2 for j in range(5))) for k in range(12)]
    e = [math.exp(-dk) for dk in d]
    oracle = [v / sum(e) for v in e]
    assert np.max(np.abs(U - np.array(oracle))) <= 1e-10


def test_batch_matches_single(rng):
    P = _table(rng.standard_normal((3, 4)))
    F = torch.tensor(rng.standard_normal((5, 4)))
    U = soft_assign(F, P)
    for i in range(5):
        assert torch.allclose(U[i], soft_assign(F[i], P), atol=1e-15)


# ---------------------------------------------------------------- consistency and filtering

def test_consistency_examples():
    assert consistency_score(torch.tensor([0.0, 1.0, 0.0]), 1).item() == 1.0
    assert consistency_score(torch.tensor([0.5, 0.5]), 0).item() == 0.5
    assert consistency_score(torch.tensor([0.75, 0.25]), 1).item() == 0.25
    batch = consistency_score(torch.tensor([[0.75, 0.25], [0.1, 0.9]], dtype=torch.float64), torch.tensor([1, 1]))
    assert batch.tolist() == [0.25, 0.9]


def test_filter_boundaries():
    etas = torch.tensor([0.39, 0.40, 0.41], dtype=torch.float64)
    assert filter_mask(etas, 0.4).tolist() == [False, True, True]
    assert filter_mask(etas, 0.0).all()
    assert filter_mask(torch.tensor([1.0, 0.999999]), 1.0).tolist() == [True, False]
    with pytest.raises(ConfigError):
        filter_mask(etas, 1.0 + 1e-9)
    with pytest.raises(ConfigError):
        filter_mask(etas, -0.1)


def test_consistency_records():
    U = torch.tensor([[0.75, 0.25], [0.2, 0.8]])
    recs = psa.consistency_records(U, torch.tensor([0, 0]), ["a", "b"])
    assert [r.sample_id for r in recs] == ["a", "b"]
    assert recs[0].eta == 0.75 and recs[1].eta == pytest.approx(0.2)


def test_write_diagnostics(tmp_path):
    p = tmp_path / "d.csv"
    psa.write_diagnostics(p, ["x", "y"], [0.5, 0.95], 0.4, 0.9)
    rows = list(csv.DictReader(open(p)))
    assert rows[0] == {"sample_id": "x", "eta": "0.5", "filtered_align": "True", "filtered_clf": "False"}
    assert rows[1]["filtered_clf"] == "True"


# ---------------------------------------------------------------- supervised contrastive loss

def test_one_anchor_one_positive_is_zero():
    z = torch.tensor([[1.0, 0.0], [0.6, 0.8]], dtype=torch.float64)
    assert supcon_loss(0, z, torch.tensor([3, 3])).item() == pytest.approx(0.0, abs=1e-15)


def test_positive_and_negative_example():
    z = torch.tensor([[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    got = supcon_loss(0, z, torch.tensor([0, 0, 1])).item()
    assert got == pytest.approx(-math.log(math.e / (math.e + math.exp(-1))), abs=1e-12)
    assert got == pytest.approx(0.1269, abs=1e-4)


def test_no_positive_sentinel():
    z = torch.randn(3, 4, dtype=torch.float64)
    assert supcon_loss(2, z, torch.tensor([0, 0, 1])) is NO_POSITIVE
    assert not NO_POSITIVE


def test_zero_norm_projection_raises():
    z = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(NumericError, match="1"):
        supcon_loss(0, z, torch.tensor([0, 0]))


@pytest.mark.parametrize("tau", [1.0, 0.3])
def test_supcon_matches_double_loop(rng, tau):
    for _ in range(50):
        n = int(rng.integers(2, 17))
        z = rng.standard_normal((n, 4))
        y = rng.integers(0, 3, n)
        losses, valid = supcon_per_anchor(torch.tensor(z), torch.tensor(y), tau)
        for i in range(n):
            ref = naive_supcon(z, y, i, tau)
            if ref is None:
                assert not valid[i]
            else:
                assert valid[i] and abs(losses[i].item() - ref) <= 1e-6


def test_supcon_gradient_batch6_proj4(rng):
    z0 = torch.tensor(rng.standard_normal((6, 4)))
    y = torch.tensor([0, 1, 0, 1, 1, 0])
    fn = lambda z: supcon_per_anchor(z, y)[0].sum()
    assert rel_error(analytic_grad(fn, z0), numeric_grad(fn, z0)) <= 1e-4


# ---------------------------------------------------------------- psa loss

def test_psa_matches_bruteforce_8_plus_8(rng):
    zt, za = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    yt, ya = rng.integers(0, 2, 8), rng.integers(0, 2, 8)
    etas = np.array([0.9, 0.1, 0.2, 0.5, 0.3, 0.1, 0.45, 0.0])
    assert (etas >= 0.4).sum() == 3
    got = psa_loss(torch.tensor(zt), torch.tensor(yt), torch.tensor(za), torch.tensor(ya),
                   torch.tensor(etas), 0.4).item()
    assert got == pytest.approx(naive_psa(zt, yt, za, ya, etas, 0.4), abs=1e-6)


def test_psa_matches_bruteforce_random(rng):
    for _ in range(50):
        nt, na = int(rng.integers(1, 9)), int(rng.integers(0, 9))
        zt, za = rng.standard_normal((nt, 3)), rng.standard_normal((na, 3))
        yt, ya = rng.integers(0, 3, nt), rng.integers(0, 3, na)
        etas, sigma = rng.uniform(0, 1, na), float(rng.uniform(0, 1))
        got = psa_loss(torch.tensor(zt), torch.tensor(yt), torch.tensor(za), torch.tensor(ya),
                       torch.tensor(etas), sigma).item()
        assert got == pytest.approx(naive_psa(zt, yt, za, ya, etas, sigma), abs=1e-6)


def test_psa_sigma_one_uses_target_only(rng):
    zt, za = torch.tensor(rng.standard_normal((6, 3))), torch.tensor(rng.standard_normal((5, 3)))
    yt, ya = torch.tensor([0, 1, 0, 1, 0, 1]), torch.tensor([0, 1, 0, 1, 0])
    etas = torch.tensor([0.99, 0.5, 0.2, 0.9999, 0.0], dtype=torch.float64)
    target_only = supcon_per_anchor(zt, yt)[0].mean().item()
    assert psa_loss(zt, yt, za, ya, etas, 1.0).item() == pytest.approx(target_only, abs=1e-12)


def test_psa_nothing_filtered_denominator(rng):
    zt, za = torch.tensor(rng.standard_normal((4, 3))), torch.tensor(rng.standard_normal((4, 3)))
    yt, ya = torch.tensor([0, 1, 0, 1]), torch.tensor([1, 0, 1, 0])
    got = psa_loss(zt, yt, za, ya, torch.ones(4, dtype=torch.float64), 0.0).item()
    losses, valid = supcon_per_anchor(torch.cat([zt, za]), torch.cat([yt, ya]))
    assert int(valid.sum()) == 8
    assert got == pytest.approx(losses.sum().item() / 8, abs=1e-12)


def test_psa_all_without_positive_is_zero_and_warns():
    before = psa.psa_warnings["all_anchors_without_positive"]
    z = torch.randn(2, 3, dtype=torch.float64)
    out = psa_loss(z, torch.tensor([0, 1]), z[:0], torch.tensor([], dtype=torch.long),
                   torch.ones(0, dtype=torch.float64), 0.4)
    assert out.item() == 0.0
    assert psa.psa_warnings["all_anchors_without_positive"] == before + 1


# ---------------------------------------------------------------- properties

@settings(max_examples=1000, deadline=None)
@given(st.integers(2, 8), st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_assignment_and_filter_properties(K, d, seed, s1, s2):
    r = np.random.default_rng(seed)
    P = _table(r.standard_normal((K, d)) * r.uniform(0.1, 10))
    f = torch.tensor(r.standard_normal(d) * r.uniform(0.1, 10))
    U = soft_assign(f, P)
    label = int(r.integers(0, K))
    assert (U >= 0).all()
    assert abs(U.sum().item() - 1.0) <= 1e-6
    eta = consistency_score(U, label).item()
    assert 0.0 <= eta <= 1.0
    lo, hi = min(s1, s2), max(s1, s2)
    etas = torch.tensor(r.uniform(0, 1, 10))
    etas[0] = lo
    etas[1] = hi
    m_lo, m_hi = filter_mask(etas, lo), filter_mask(etas, hi)
    assert not (m_hi & ~m_lo).any()
    assert m_lo[0] and m_hi[1]


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_assignment_locality(K, d, seed):
    r = np.random.default_rng(seed)
    P = r.standard_normal((K, d))
    k = int(r.integers(0, K))
    dists = np.linalg.norm(P - P[k], axis=1)
    dists[k] = np.inf
    if dists.min() < 1e-9:
        return
    U = soft_assign(torch.tensor(P[k]), _table(P))
    assert int(U.argmax()) == k


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(0, 8), st.integers(0, 2**31 - 1))
def test_psa_permutation_invariance(nt, na, seed):
    r = np.random.default_rng(seed)
    zt, za = torch.tensor(r.standard_normal((nt, 3))), torch.tensor(r.standard_normal((na, 3)))
    yt, ya = torch.tensor(r.integers(0, 2, nt)), torch.tensor(r.integers(0, 2, na))
    etas = torch.tensor(r.uniform(0, 1, na))
    pt, pa = torch.tensor(r.permutation(nt)), torch.tensor(r.permutation(na)).long()
    a = psa_loss(zt, yt, za, ya, etas, 0.4).item()
    b = psa_loss(zt[pt], yt[pt], za[pa], ya[pa], etas[pa], 0.4).item()
    assert a == pytest.approx(b, abs=1e-12)
