"""The full EEG encoder: MLLA channel encoder + spatiotemporal dynamics model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .dynamics import DynamicsConfig, DynamicsHead, extract_window_feature
from .encoder import MllaConfig, MllaEncoder, PatchConfig, encode_channels
from .montage import STANDARD_60


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = len(STANDARD_60)
    patch: PatchConfig = field(default_factory=PatchConfig)
    mlla: MllaConfig = field(default_factory=MllaConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)

    def to_dict(self):
        return {
            "n_channels": self.n_channels,
            "patch": {"patch_length": self.patch.patch_length, "stride": self.patch.stride},
            "mlla": self.mlla.to_dict(),
            "dynamics": self.dynamics.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = d or {}
        return cls(
            n_channels=d.get("n_channels", len(STANDARD_60)),
            patch=PatchConfig(**d.get("patch", {})),
            mlla=MllaConfig(**d.get("mlla", {})),
            dynamics=DynamicsConfig(**d.get("dynamics", {})),
        )

    @property
    def n_features(self):
        return self.dynamics.n_patterns(self.mlla.out_dim)


class MdJPTNet(nn.Module):
    """Window ``[B, C, T]`` -> latent ``p``, patterns ``h1/h3``, projector output ``h``."""

    def __init__(self, cfg=ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = MllaEncoder(cfg.patch, cfg.mlla)
        self.dynamics = DynamicsHead(cfg.n_channels, cfg.mlla.out_dim, cfg.dynamics)

    def forward(self, x, project=True):
        x_hat = encode_channels(x, self.encoder)
        out = self.dynamics(x_hat)
        out["x_hat"] = x_hat
        if project:
            out["h"] = self.dynamics.project(out["h3"])
        return out

    def features(self, x):
        return extract_window_feature(self(x, project=False)["h3"])

    def n_parameters(self, include_projector=True):
        skip = set() if include_projector else {"dynamics.w_isa1", "dynamics.w_isa2"}
        return sum(p.numel() for n, p in self.named_parameters() if n not in skip)

    def numpy_state(self):
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_numpy_state(self, params):
        state = {k: torch.from_numpy(np.asarray(v).copy()) for k, v in params.items()}
        self.load_state_dict(state)
        return self
