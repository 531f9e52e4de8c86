"""Central finite-difference checks of every differentiable piece on tiny float64 instances.

The error of one gradient entry is ``|a - n| / max(|a|, |n|, floor)`` where
``a`` is autograd, ``n`` the central difference and ``floor`` is ``1e-3``
times the largest numeric entry, so entries that are zero up to round-off do
not dominate the maximum.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .dynamics import DynamicsConfig, average_pool, depthwise_conv
from .encoder import MllaConfig, PatchConfig
from .losses import cda_loss, isa_loss, mkmmd_loss, subject_centroid, total_loss, trial_covariance
from .model import MdJPTNet, ModelConfig

STEP = 1e-4
TOLERANCE = 1e-4
# central differences are meaningless across a ReLU kink, so instances whose
# ReLU inputs come closer than this to zero are redrawn
KINK_MARGIN = 10 * STEP


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    n_entries: int
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def numeric_grad(f, params, step=STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                hi = float(f())
                flat[i] = old - step
                lo = float(f())
                flat[i] = old
                gflat[i] = (hi - lo) / (2 * step)
            grads.append(g)
    return grads


def analytic_grad(f, params):
    return torch.autograd.grad(f(), params)


def relative_error(analytic, numeric):
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    floor = max(1e-3 * float(n.abs().max()), 1e-12)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=a.dtype))
    return float(((a - n).abs() / denom).max())


def check(name, f, params, step=STEP):
    t0 = time.time()
    err = relative_error(analytic_grad(f, params), numeric_grad(f, params, step))
    return GradcheckResult(name, err, sum(p.numel() for p in params), time.time() - t0)


def _leaf(rng, *shape):
    return torch.tensor(rng.standard_normal(shape), dtype=torch.float64, requires_grad=True)


def check_cda(seed=0):
    rng = np.random.default_rng(seed)
    p = _leaf(rng, 4, 3, 2, 3, 6)                 # subjects x windows x K1 x C x N

    def f():
        return cda_loss(torch.stack([subject_centroid(trial_covariance(p[s])) for s in range(4)]))
    return check("cda_loss", f, [p])


def check_isa(seed=0):
    rng = np.random.default_rng(seed)
    embs = [_leaf(rng, 3, 2, 4) for _ in range(4)]
    return check("isa_loss", lambda: isa_loss([(embs[0], embs[1]), (embs[2], embs[3])], 0.5), embs)


def check_mkmmd(seed=0):
    rng = np.random.default_rng(seed)
    fa, fb = _leaf(rng, 5, 3), _leaf(rng, 6, 3) + 0.5
    fb = fb.detach().requires_grad_(True)
    # bandwidths held fixed; the median heuristic is not differentiated
    bw = [0.5, 1.0, 2.0]
    return check("mkmmd_loss", lambda: mkmmd_loss(fa, fb, bandwidths=bw), [fa, fb])


def miniature_model_config():
    return ModelConfig(
        n_channels=3,
        patch=PatchConfig(4, 2),
        mlla=MllaConfig(hidden_dim=4, out_dim=2, depth=1, n_heads=2, mlp_ratio=1.0),
        dynamics=DynamicsConfig(kernels_per_dim=2, dilations=(1, 2), attention_length=3,
                                pool_length=3),
    )


def _chain_instance(seed):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = MdJPTNet(miniature_model_config()).double()
    with torch.no_grad():
        for prm in net.parameters():        # move biases off their zero init
            prm.add_(0.1 * torch.randn_like(prm))
    x = torch.tensor(rng.standard_normal((8, 3, 16)), dtype=torch.float64)
    with torch.no_grad():
        dyn = net.dynamics
        pre = depthwise_conv(average_pool(net(x, project=False)["h3"], dyn.cfg.pool_length), dyn.w_isa1)
    return net, x, float(pre.abs().min())


def check_chain(seed=0):
    """Encoder -> dynamics -> projector -> ISA + CDA total loss, w.r.t. all weights."""
    for attempt in range(100):
        net, x, margin = _chain_instance(seed * 1000 + attempt)
        if margin > KINK_MARGIN:
            break
    params = list(net.parameters())

    def f():
        out = net(x)
        h = out["h"]
        l_isa = isa_loss([(h[0:2], h[2:4]), (h[4:6], h[6:8])], 0.5)
        covs = trial_covariance(out["p"].permute(0, 3, 1, 2))
        cents = torch.stack([subject_centroid(covs[i:i + 2]) for i in range(0, 8, 2)])
        return total_loss(l_isa, cda_loss(cents), 0.02)
    return check("encoder_dynamics_loss", f, params)


def _classifier_instance(seed):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = nn.Sequential(nn.Linear(5, 6), nn.BatchNorm1d(6), nn.ReLU(), nn.Linear(6, 3)).double()
    x = torch.tensor(rng.standard_normal((10, 5)), dtype=torch.float64)
    y = torch.as_tensor(rng.integers(0, 3, 10))
    with torch.no_grad():
        margin = float(net[1](net[0](x)).abs().min())
    return net, x, y, margin


def check_classifier(seed=0):
    for attempt in range(100):
        net, x, y, margin = _classifier_instance(seed * 1000 + attempt)
        if margin > KINK_MARGIN:
            break
    net.train()
    params = list(net.parameters())
    return check("mlp_classifier", lambda: nn.functional.cross_entropy(net(x), y), params)


CHECKS = (check_cda, check_isa, check_mkmmd, check_chain, check_classifier)


def run_all(seed=0):
    return [c(seed) for c in CHECKS]


def format_table(results):
    lines = [f"{'check':<24}{'entries':>9}{'max rel err':>14}{'ok':>5}"]
    for r in results:
        lines.append(f"{r.name:<24}{r.n_entries:>9}{r.max_rel_error:>14.2e}{'yes' if r.passed else 'NO':>5}")
    return "\n".join(lines)
