"""Spatiotemporal dynamics model and ISA projector.

Shapes use ``B`` for batch, ``C`` channels, ``N`` time steps (patches),
``K1`` MLLA output dims and ``K = K1 * K2`` latent pattern dims. Convolutions
are cross-correlations, as in every deep learning framework.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class DynamicsConfig:
    kernels_per_dim: int = 4            # K2
    transition_length: int = 3          # L1
    dilations: tuple = (1, 3, 6, 12)
    attention_length: int = 15          # L2
    pool_length: int = 15
    temperature: float = 1.0
    projector_length: int = 3           # L3

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(self.dilations))
        for name in ("transition_length", "attention_length", "projector_length"):
            if getattr(self, name) % 2 == 0:
                raise ValueError(f"{name} must be odd to keep the time axis length")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def n_patterns(self, k1):
        k = k1 * self.kernels_per_dim
        if k % len(self.dilations):
            raise ValueError(f"K1*K2={k} not divisible by {len(self.dilations)} dilations")
        return k

    def to_dict(self):
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d


def spatial_project(x_hat, w_s):
    """``p[:, :, t, d] = W_s @ x_hat[:, :, t, d]`` for ``x_hat`` of shape ``[..., C, N, K1]``."""
    return torch.einsum("ij,...jtd->...itd", w_s, x_hat)


def dilation_of_rows(k, dilations):
    """Dilation used by each of the ``k`` transition kernels (row ``o`` -> ``dilations[o % n]``)."""
    return [dilations[o % len(dilations)] for o in range(k)]


def transition_conv(p, w_tr, cfg):
    """Grouped dilated spatial-transition convolution.

    ``p`` is ``[B, C, N, K1]`` and ``w_tr`` is ``[K, C, L1]``. Output row ``o``
    reads the slice ``p[..., o // K2]`` across all channels. Returns ``[B, K, N]``.
    """
    squeeze = p.dim() == 3
    if squeeze:
        p = p.unsqueeze(0)
    _, _, n, _ = p.shape
    k, _, length = w_tr.shape
    n_dil = len(cfg.dilations)
    parts, order = [], []
    for i, dil in enumerate(cfg.dilations):
        rows = torch.arange(i, k, n_dil)
        dims = rows // cfg.kernels_per_dim
        pad = dil * (length - 1) // 2
        x = F.pad(p[..., dims].transpose(-1, -2), (pad, pad))   # [B, C, R, N + 2 pad]
        w = w_tr[rows]                                           # [R, C, L1]
        acc = 0
        for tap in range(length):
            seg = x[..., tap * dil: tap * dil + n]
            acc = acc + torch.einsum("rc,bcrt->brt", w[:, :, tap], seg)
        parts.append(acc)
        order.append(rows)
    h1 = torch.cat(parts, dim=1)
    inverse = torch.argsort(torch.cat(order))
    h1 = h1.index_select(1, inverse)
    return h1[0] if squeeze else h1


def depthwise_conv(h, w):
    """Per-row temporal filtering of ``h [B, K, N]`` by ``w [K, L]``, zero padded."""
    squeeze = h.dim() == 2
    if squeeze:
        h = h.unsqueeze(0)
    out = F.conv1d(h, w.unsqueeze(1), padding=(w.shape[-1] - 1) // 2, groups=h.shape[1])
    return out[0] if squeeze else out


def average_pool(h, length):
    """Stride-1 moving average over time with edge replication (keeps length)."""
    if length <= 1:
        return h
    squeeze = h.dim() == 2
    if squeeze:
        h = h.unsqueeze(0)
    left = (length - 1) // 2
    out = F.avg_pool1d(F.pad(h, (left, length - 1 - left), mode="replicate"), length, stride=1)
    return out[0] if squeeze else out


def local_attention(h1, w_att, mixing, cfg):
    """Softmax attention over pattern dims. Returns ``(h_att, h3)``."""
    a = depthwise_conv(h1, w_att)
    a_bar = average_pool(a, cfg.pool_length)
    h2 = torch.einsum("ij,...jt->...it", mixing, a_bar)
    h_att = torch.softmax(h2 / cfg.temperature, dim=-2)
    return h_att, h_att * h1


def isa_projector(h3, w_isa1, w_isa2, cfg):
    h4 = average_pool(h3, cfg.pool_length)
    h5 = torch.relu(depthwise_conv(h4, w_isa1))
    return depthwise_conv(h5, w_isa2)


def extract_window_feature(h3):
    """Temporal mean of the encoder output: ``[..., K, N] -> [..., K]``."""
    return h3.mean(dim=-1)


def _uniform_(t, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound)
    return t


class DynamicsHead(nn.Module):
    """Holds ``W_s``, ``W_tr``, ``W_att``, the mixing matrix and the projector filters."""

    def __init__(self, n_channels, k1, cfg=DynamicsConfig()):
        super().__init__()
        self.cfg = cfg
        self.k1 = k1
        k = cfg.n_patterns(k1)
        self.w_s = nn.Parameter(torch.empty(n_channels, n_channels))
        self.w_tr = nn.Parameter(torch.empty(k, n_channels, cfg.transition_length))
        self.w_att = nn.Parameter(torch.empty(k, cfg.attention_length))
        self.mixing = nn.Parameter(torch.empty(k, k))
        self.w_isa1 = nn.Parameter(torch.empty(k, cfg.projector_length))
        self.w_isa2 = nn.Parameter(torch.empty(k, cfg.projector_length))
        self.reset_parameters()

    def reset_parameters(self):
        c = self.w_s.shape[0]
        _uniform_(self.w_s, c)
        _uniform_(self.w_tr, c * self.cfg.transition_length)
        _uniform_(self.w_att, self.cfg.attention_length)
        _uniform_(self.mixing, self.mixing.shape[0])
        _uniform_(self.w_isa1, self.cfg.projector_length)
        _uniform_(self.w_isa2, self.cfg.projector_length)

    @property
    def n_patterns(self):
        return self.w_tr.shape[0]

    def forward(self, x_hat):
        p = spatial_project(x_hat, self.w_s)
        h1 = transition_conv(p, self.w_tr, self.cfg)
        h_att, h3 = local_attention(h1, self.w_att, self.mixing, self.cfg)
        return {"p": p, "h1": h1, "h_att": h_att, "h3": h3}

    def project(self, h3):
        return isa_projector(h3, self.w_isa1, self.w_isa2, self.cfg)
