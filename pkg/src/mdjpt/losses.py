"""Pre-training objectives: covariance alignment (CDA), inter-subject alignment
(ISA, an NT-Xent variant over temporally aligned subject pairs) and the
multi-kernel MMD comparison term.

All functions take and return torch tensors and are differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .exceptions import (
    DegenerateWindow,
    EmptyList,
    EmptySet,
    MismatchedCounts,
    TooFewSubjects,
    ZeroNormVector,
)

MMD_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class LossWeights:
    cda_weight: float = 0.02
    temperature: float = 0.07

    def __post_init__(self):
        if self.cda_weight < 0:
            raise ValueError("cda_weight must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def trial_covariance(p):
    """Unbiased temporal covariance ``[..., C, C]`` of ``p [..., C, N]``."""
    n = p.shape[-1]
    if n < 2:
        raise DegenerateWindow(f"need at least 2 time steps, got {n}")
    centered = p - p.mean(dim=-1, keepdim=True)
    return centered @ centered.transpose(-1, -2) / (n - 1)


def subject_centroid(covs):
    """Arithmetic mean of a subject's trial covariances."""
    if isinstance(covs, (list, tuple)):
        if not covs:
            raise EmptyList("no covariances to average")
        covs = torch.stack(list(covs))
    if covs.shape[0] == 0:
        raise EmptyList("no covariances to average")
    return covs.mean(dim=0)


def cda_per_dim(centroids):
    """``L_d`` for every latent dim: summed squared Frobenius distances over subject pairs.

    ``centroids`` is ``[S, K1, C, C]``; returns ``[K1]`` in float64.
    """
    s = centroids.shape[0]
    if s < 2:
        raise TooFewSubjects(f"covariance alignment needs >= 2 subjects, got {s}")
    g = centroids.to(torch.float64)
    i, j = torch.triu_indices(s, s, offset=1)
    diff = g[i] - g[j]
    return diff.pow(2).sum(dim=(0, -1, -2))


def cda_loss(centroids):
    """``log(1 + sum_d L_d)``."""
    return torch.log1p(cda_per_dim(centroids).sum())


def cosine_similarity(a, b):
    """``a . b / (|a| |b|)`` over the last axis."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroNormVector("cosine similarity of a zero vector is undefined")
    return (a * b).sum(dim=-1) / (na * nb)


def _pairwise_cosine(x, y):
    x = x.flatten(1)
    y = y.flatten(1)
    nx, ny = x.norm(dim=1), y.norm(dim=1)
    if bool((nx == 0).any()) or bool((ny == 0).any()):
        raise ZeroNormVector("an embedding has zero norm")
    return (x / nx[:, None]) @ (y / ny[:, None]).T


def isa_anchor_terms(emb_a, emb_b, temperature=0.07):
    """Per-anchor contrastive terms for one dataset.

    ``emb_a[i]`` and ``emb_b[i]`` are the two subjects' embeddings of the same
    trial segment (any trailing shape; flattened). Returns ``(l_a, l_b)``, each
    of length ``v``. Each anchor is contrasted against its ``2v - 1`` partners:
    the other ``v - 1`` windows of its own subject and all ``v`` windows of the
    other subject, the positive included.
    """
    v = emb_a.shape[0]
    if emb_b.shape[0] != v:
        raise MismatchedCounts(f"subject A has {v} windows, subject B {emb_b.shape[0]}")
    if v < 1:
        raise MismatchedCounts("no windows")
    s_aa = _pairwise_cosine(emb_a, emb_a) / temperature
    s_ab = _pairwise_cosine(emb_a, emb_b) / temperature
    s_bb = _pairwise_cosine(emb_b, emb_b) / temperature
    eye = torch.eye(v, dtype=torch.bool, device=s_aa.device)

    def terms(same, cross):
        logits = torch.cat([same.masked_fill(eye, float("-inf")), cross], dim=1)
        return torch.logsumexp(logits, dim=1) - cross.diagonal()

    return terms(s_aa, s_ab), terms(s_bb, s_ab.T)


def isa_loss(pairs, temperature=0.07):
    """Sum of anchor terms over both subjects of every dataset.

    ``pairs`` is a sequence of ``(emb_a, emb_b)``, one per dataset.
    """
    total = 0.0
    for emb_a, emb_b in pairs:
        l_a, l_b = isa_anchor_terms(emb_a, emb_b, temperature)
        total = total + l_a.sum() + l_b.sum()
    return total


def total_loss(l_isa, l_cda, cda_weight=0.02):
    return l_isa + cda_weight * l_cda


def median_bandwidth(fa, fb):
    z = torch.cat([fa.flatten(1), fb.flatten(1)]).detach().to(torch.float64)
    d = _sq_dists(z, z).sqrt()
    iu = torch.triu_indices(len(z), len(z), offset=1)
    med = d[iu[0], iu[1]].median()
    return float(med) if float(med) > 0 else 1.0


def _sq_dists(x, y):
    return (x[:, None, :] - y[None, :, :]).pow(2).sum(-1)


def _gauss(x, y, sigma):
    return torch.exp(-_sq_dists(x, y) / (2.0 * sigma ** 2))


def mkmmd_loss(fa, fb, bandwidths=None, unbiased=True):
    """Squared MMD averaged over Gaussian kernels ``exp(-|x-y|^2 / 2 sigma^2)``.

    ``bandwidths`` defaults to the median pairwise distance times
    ``(0.25, 0.5, 1, 2, 4)``. The unbiased estimator drops the diagonal of the
    within-set kernel matrices and can dip slightly below zero.
    """
    if len(fa) == 0 or len(fb) == 0:
        raise EmptySet("both sample sets must be non-empty")
    x, y = fa.flatten(1), fb.flatten(1)
    if bandwidths is None:
        med = median_bandwidth(x, y)
        bandwidths = [med * s for s in MMD_SCALES]
    n, m = len(x), len(y)
    if unbiased and (n < 2 or m < 2):
        raise EmptySet("the unbiased estimator needs >= 2 samples per set")
    total = 0.0
    for sigma in bandwidths:
        kxx, kyy, kxy = _gauss(x, x, sigma), _gauss(y, y, sigma), _gauss(x, y, sigma)
        if unbiased:
            xx = (kxx.sum() - kxx.diagonal().sum()) / (n * (n - 1))
            yy = (kyy.sum() - kyy.diagonal().sum()) / (m * (m - 1))
        else:
            xx, yy = kxx.mean(), kyy.mean()
        total = total + xx + yy - 2 * kxy.mean()
    return total / len(bandwidths)
