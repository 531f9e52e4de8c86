import math
from itertools import combinations

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mdjpt.exceptions import (
    DegenerateWindow,
    EmptyList,
    EmptySet,
    MismatchedCounts,
    TooFewSubjects,
    ZeroNormVector,
)
from mdjpt.gradcheck import check_cda, check_isa, check_mkmmd
from mdjpt.losses import (
    LossWeights,
    cda_loss,
    cosine_similarity,
    isa_anchor_terms,
    isa_loss,
    mkmmd_loss,
    subject_centroid,
    total_loss,
    trial_covariance,
)


def T(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# --- oracles ---

def cov_oracle(p):
    c, n = p.shape
    m = [sum(p[i]) / n for i in range(c)]
    out = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            out[i, j] = sum((p[i, t] - m[i]) * (p[j, t] - m[j]) for t in range(n)) / (n - 1)
    return out


def cda_oracle(cents):
    """``cents[s][d]`` are ``C x C`` matrices."""
    total = 0.0
    for d in range(len(cents[0])):
        for a, b in combinations(range(len(cents)), 2):
            total += float(np.sum((cents[a][d] - cents[b][d]) ** 2))
    return math.log(total + 1)


def cos(a, b):
    return float(np.dot(a, b) / np.linalg.norm(a) / np.linalg.norm(b))


def isa_oracle(pairs, tau):
    total = 0.0
    for ea, eb in pairs:
        v = len(ea)
        for anchor, own, other in ((ea, ea, eb), (eb, eb, ea)):
            for i in range(v):
                den = sum(math.exp(cos(anchor[i], own[j]) / tau) for j in range(v) if j != i)
                den += sum(math.exp(cos(anchor[i], other[j]) / tau) for j in range(v))
                total -= math.log(math.exp(cos(anchor[i], other[i]) / tau) / den)
    return total


def mmd_oracle(x, y, sigmas):
    k = lambda a, b, s: math.exp(-float(np.sum((a - b) ** 2)) / (2 * s * s))
    out = 0.0
    n, m = len(x), len(y)
    for s in sigmas:
        xx = sum(k(x[i], x[j], s) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
        yy = sum(k(y[i], y[j], s) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
        xy = sum(k(x[i], y[j], s) for i in range(n) for j in range(m)) / (n * m)
        out += xx + yy - 2 * xy
    return out / len(sigmas)


# --- covariance ---

def test_covariance_hand_example():
    np.testing.assert_allclose(trial_covariance(T([[1, 2, 3], [2, 4, 6]])).numpy(), [[1, 2], [2, 4]])


def test_covariance_of_constant_is_zero():
    assert not trial_covariance(torch.full((3, 5), 2.0)).any()


@pytest.mark.parametrize("seed", range(20))
def test_covariance_matches_loops(seed):
    p = np.random.default_rng(seed).standard_normal((4, 8))
    got = trial_covariance(T(p)).numpy()
    np.testing.assert_allclose(got, cov_oracle(p), atol=1e-12)
    np.testing.assert_allclose(got, got.T, atol=1e-12)
    assert np.linalg.eigvalsh(got).min() > -1e-8


def test_covariance_needs_two_steps():
    with pytest.raises(DegenerateWindow):
        trial_covariance(torch.ones(2, 1))


# --- centroids ---

def test_centroid_examples():
    s = T(np.eye(2))
    torch.testing.assert_close(subject_centroid([s]), s)
    torch.testing.assert_close(subject_centroid([s, 3 * s]), 2 * s)
    with pytest.raises(EmptyList):
        subject_centroid([])


@pytest.mark.parametrize("seed", range(20))
def test_centroid_matches_average(seed):
    rng = np.random.default_rng(seed)
    covs = [a @ a.T for a in rng.standard_normal((5, 3, 3))]
    expect = sum(covs) / 5
    np.testing.assert_allclose(subject_centroid([T(c) for c in covs]).numpy(), expect, atol=1e-15)


# --- CDA ---

def test_cda_identical_centroids_zero():
    g = T(np.random.default_rng(0).standard_normal((2, 3, 3)))
    assert float(cda_loss(torch.stack([g, g, g]))) == 0.0


def test_cda_identity_vs_zero_is_log3():
    cents = torch.stack([T(np.eye(2))[None], torch.zeros(1, 2, 2, dtype=torch.float64)])
    assert abs(float(cda_loss(cents)) - math.log(3)) < 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_cda_matches_loops(seed):
    cents = np.random.default_rng(seed).standard_normal((4, 2, 3, 3))
    assert abs(float(cda_loss(T(cents))) - cda_oracle(cents)) < 1e-10


@given(st.integers(0, 10_000), st.integers(2, 5))
def test_cda_nonnegative_and_permutation_invariant(seed, s):
    rng = np.random.default_rng(seed)
    cents = rng.standard_normal((s, 2, 4, 4))
    perm = rng.permutation(4)
    value = float(cda_loss(T(cents)))
    assert value >= 0
    assert abs(value - float(cda_loss(T(cents[:, :, perm][:, :, :, perm])))) < 1e-10


def test_cda_needs_two_subjects():
    with pytest.raises(TooFewSubjects):
        cda_loss(torch.zeros(1, 1, 2, 2))


def test_cda_gradcheck():
    assert check_cda(3).passed


# --- cosine ---

def test_cosine_examples():
    assert float(cosine_similarity(T([1, 2]), T([2, 1]))) == pytest.approx(0.8, abs=1e-15)
    assert float(cosine_similarity(T([1, 0]), T([0, 1]))) == 0.0
    assert float(cosine_similarity(T([3, -4]), T([3, -4]))) == pytest.approx(1.0)
    with pytest.raises(ZeroNormVector):
        cosine_similarity(T([0, 0]), T([1, 0]))


# --- ISA ---

@pytest.mark.parametrize("v", [1, 2, 3, 5])
def test_isa_equal_embeddings(v):
    e = torch.ones(v, 4, dtype=torch.float64)
    loss = isa_loss([(e, e), (e, e)], 0.07)
    assert abs(float(loss) - 2 * 2 * v * math.log(2 * v - 1)) < 1e-8


def test_isa_orthogonal_negatives():
    a = T([[1, 0, 0, 0], [0, 1, 0, 0]])
    l_a, l_b = isa_anchor_terms(a, a.clone(), 1.0)
    expect = -math.log(math.e / (math.e + 2))
    np.testing.assert_allclose(torch.cat([l_a, l_b]).numpy(), expect, atol=1e-12)
    assert expect == pytest.approx(0.5514, abs=1e-4)


@pytest.mark.parametrize("seed", range(20))
def test_isa_matches_loops(seed):
    rng = np.random.default_rng(seed)
    pairs = [(rng.standard_normal((3, 8)), rng.standard_normal((3, 8))) for _ in range(2)]
    got = float(isa_loss([(T(a), T(b)) for a, b in pairs], 0.07))
    assert abs(got - isa_oracle(pairs, 0.07)) < 1e-8


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_isa_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    a, b = T(rng.standard_normal((3, 5))), T(rng.standard_normal((3, 5)))
    assert float(isa_loss([(a, b)], 0.5)) == pytest.approx(float(isa_loss([(scale * a, scale * b)], 0.5)), rel=1e-9)


def test_isa_flattens_trailing_axes(rng):
    a, b = rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 2, 4))
    assert float(isa_loss([(T(a), T(b))])) == pytest.approx(isa_oracle([(a.reshape(3, 8), b.reshape(3, 8))], 0.07))


def test_isa_errors():
    with pytest.raises(MismatchedCounts):
        isa_loss([(torch.ones(2, 3), torch.ones(3, 3))])
    with pytest.raises(ZeroNormVector):
        isa_loss([(torch.zeros(2, 3), torch.ones(2, 3))])


def test_isa_gradcheck():
    assert check_isa(3).passed


# --- total ---

def test_total_loss():
    assert total_loss(2.0, 5.0, 0.02) == pytest.approx(2.1)
    assert total_loss(2.0, 5.0, 0.0) == 2.0
    assert LossWeights().cda_weight == 0.02 and LossWeights().temperature == 0.07
    with pytest.raises(ValueError):
        LossWeights(cda_weight=-1)


@given(st.floats(0, 10), st.floats(0, 10))
def test_total_loss_linear_in_weight(l1, l2):
    a, b = total_loss(1.5, 2.5, l1), total_loss(1.5, 2.5, l2)
    assert a - b == pytest.approx(2.5 * (l1 - l2), abs=1e-12)


# --- MK-MMD ---

def test_mmd_identical_sets(rng):
    x = T(rng.standard_normal((6, 3)))
    assert float(mkmmd_loss(x, x, [1.0], unbiased=False)) == pytest.approx(0.0, abs=1e-15)
    assert float(mkmmd_loss(x, x, [1.0])) <= 1e-12


def test_mmd_two_point_masses():
    # biased estimator, one kernel: 2 - 2 exp(-d^2 / 2 s^2)
    x, y = torch.zeros(3, 2, dtype=torch.float64), torch.full((4, 2), 3.0, dtype=torch.float64)
    assert float(mkmmd_loss(x, y, [2.0], unbiased=False)) == pytest.approx(2 - 2 * math.exp(-18 / 8), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_mmd_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((8, 3)), rng.standard_normal((8, 3)) + 0.5
    sig = [0.5, 1.0, 2.0]
    assert abs(float(mkmmd_loss(T(x), T(y), sig)) - mmd_oracle(x, y, sig)) < 1e-10


def test_mmd_default_bandwidths_positive_for_shifted_sets(rng):
    x, y = T(rng.standard_normal((20, 3))), T(rng.standard_normal((20, 3)) + 3)
    assert float(mkmmd_loss(x, y)) > 0.1


def test_mmd_empty():
    with pytest.raises(EmptySet):
        mkmmd_loss(torch.zeros(0, 2), torch.ones(3, 2))


def test_mmd_gradcheck():
    assert check_mkmmd(3).passed
