"""Channel-independent Mamba-like linear attention (MLLA) encoder.

Every EEG channel is cut into overlapping patches and encoded on its own; the
weights are shared across channels. A block is::

    y = LayerNorm(x)
    u = SiLU(DepthwiseConv(Linear_in(y)))          # input gate
    a = LinearAttention(q(u), k(u), v(u))          # global, non-causal
    x = x + Linear_out(a * sigmoid(Linear_forget(y)))
    x = x + MLP(LayerNorm(x))
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import NonFiniteActivation, SeriesTooShort

ATTN_EPS = 1e-6


@dataclass(frozen=True)
class PatchConfig:
    patch_length: int = 32
    stride: int = 6

    def __post_init__(self):
        if not 0 < self.stride <= self.patch_length:
            raise ValueError("need 0 < stride <= patch_length")

    def n_patches(self, length):
        if length < self.patch_length:
            raise SeriesTooShort(f"series of {length} samples < patch length {self.patch_length}")
        return (length - self.patch_length) // self.stride + 1


@dataclass(frozen=True)
class MllaConfig:
    hidden_dim: int = 128
    out_dim: int = 32
    depth: int = 2
    n_heads: int = 8
    conv_kernel: int = 3
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    def to_dict(self):
        return asdict(self)


def patchify(series, cfg=PatchConfig()):
    """Overlapping patches ``[..., N1, P]`` of the last axis of ``series``.

    Works on numpy arrays and torch tensors; trailing samples that do not fill
    a whole patch are dropped.
    """
    length = series.shape[-1]
    cfg.n_patches(length)
    if isinstance(series, torch.Tensor):
        return series.unfold(-1, cfg.patch_length, cfg.stride)
    series = np.asarray(series)
    win = np.lib.stride_tricks.sliding_window_view(series, cfg.patch_length, axis=-1)
    return win[..., :: cfg.stride, :]


def linear_attention(q, k, v, n_heads, eps=ATTN_EPS):
    """Global linear attention with the ``elu(x) + 1`` feature map.

    ``q, k, v`` are ``[B, N, D]``. The key-value state sums are accumulated
    in float64.
    """
    b, n, d = q.shape
    dh = d // n_heads
    shape = (b, n, n_heads, dh)
    phi_q = F.elu(q.reshape(shape)) + 1
    phi_k = F.elu(k.reshape(shape)) + 1
    v = v.reshape(shape)
    # only the state sums are accumulated in 64 bit
    kv = torch.einsum("bnhi,bnhj->bhij", phi_k.double(), v.double()).to(q.dtype)
    k_sum = phi_k.double().sum(dim=1).to(q.dtype)              # [B, H, dh]
    num = torch.einsum("bnhi,bhij->bnhj", phi_q, kv)
    den = torch.einsum("bnhi,bhi->bnh", phi_q, k_sum).unsqueeze(-1)
    return (num / (den + eps)).reshape(b, n, d)


class MllaBlock(nn.Module):
    def __init__(self, dim, n_heads, conv_kernel=3, mlp_ratio=4.0):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, dim)
        self.dwconv = nn.Conv1d(dim, dim, conv_kernel, padding=conv_kernel // 2, groups=dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.forget = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        hidden = int(dim * mlp_ratio)
        self.norm2 = nn.LayerNorm(dim) if hidden else None
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)) if hidden else None

    def forward(self, x):
        y = self.norm1(x)
        u = self.in_proj(y).transpose(1, 2)
        u = F.silu(self.dwconv(u)).transpose(1, 2)
        q, k, v = self.qkv(u).chunk(3, dim=-1)
        a = linear_attention(q, k, v, self.n_heads)
        x = x + self.out_proj(a * torch.sigmoid(self.forget(y)))
        if self.mlp is not None:
            x = x + self.mlp(self.norm2(x))
        return x


class MllaEncoder(nn.Module):
    """Maps patches ``[B, N1, P]`` to per-patch embeddings ``[B, N1, K1]``."""

    def __init__(self, patch=PatchConfig(), cfg=MllaConfig()):
        super().__init__()
        self.patch = patch
        self.cfg = cfg
        self.embed = nn.Linear(patch.patch_length, cfg.hidden_dim)
        self.blocks = nn.ModuleList(
            MllaBlock(cfg.hidden_dim, cfg.n_heads, cfg.conv_kernel, cfg.mlp_ratio)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.hidden_dim)
        self.head = nn.Linear(cfg.hidden_dim, cfg.out_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv1d)):
                m.reset_parameters()
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        # forget gates start mostly open: sigmoid(log 9) = 0.9
        for blk in self.blocks:
            nn.init.constant_(blk.forget.bias, math.log(9.0))

    def forward(self, patches, check_finite=False):
        x = self.embed(patches)
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if check_finite and not torch.isfinite(x).all():
                raise NonFiniteActivation(f"non-finite activation after MLLA block {i}")
        return self.head(self.norm(x))


def mlla_forward(patches, encoder, check_finite=True):
    """Embed one channel's patches ``[N1, P]`` (or a batch ``[B, N1, P]``)."""
    squeeze = patches.dim() == 2
    if squeeze:
        patches = patches.unsqueeze(0)
    out = encoder(patches, check_finite=check_finite)
    return out[0] if squeeze else out


def encode_channels(window, encoder):
    """Per-channel embeddings of windows.

    ``window`` is ``[C, T]`` or ``[B, C, T]``; returns ``[C, N1, K1]`` or
    ``[B, C, N1, K1]``. Channels are folded into the batch so no information
    crosses between them.
    """
    squeeze = window.dim() == 2
    if squeeze:
        window = window.unsqueeze(0)
    b, c, _ = window.shape
    patches = patchify(window, encoder.patch)                  # [B, C, N1, P]
    n1 = patches.shape[2]
    emb = encoder(patches.reshape(b * c, n1, -1))
    emb = emb.reshape(b, c, n1, -1)
    return emb[0] if squeeze else emb
