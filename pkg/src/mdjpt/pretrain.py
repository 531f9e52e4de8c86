"""Joint multi-dataset pre-training.

A batch holds two distinct subjects from every dataset and, for every trial,
one window per subject. In the default (aligned) mode both windows of a trial
start at the same time, so they see the same stimulus segment and form the
positive pair of the contrastive loss.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import ModelCheckpoint
from .dynamics import DynamicsConfig, extract_window_feature
from .encoder import MllaConfig, PatchConfig
from .exceptions import InsufficientSubjects, NonFiniteLoss, TrialTooShort
from .losses import cda_loss, isa_loss, mkmmd_loss, subject_centroid, total_loss, trial_covariance
from .model import MdJPTNet, ModelConfig
from .preprocessing import window_starts

logger = logging.getLogger(__name__)

OBJECTIVES = ("isa+cda", "isa", "cda", "isa+mmd")


@dataclass
class TrialStore:
    """Preprocessed trials of one dataset held in memory.

    ``trials[s][v]`` is a float32 ``[C, T]`` array.
    """

    dataset_id: str
    rate: float
    trials: list
    labels: np.ndarray

    @property
    def n_subjects(self):
        return len(self.trials)

    @property
    def n_trials(self):
        return len(self.trials[0])

    @classmethod
    def from_manifest(cls, manifest):
        trials = [
            [np.asarray(manifest.load(s, v).data, dtype=np.float32)
             for v in range(manifest.n_trials_per_subject)]
            for s in range(manifest.n_subjects)
        ]
        labels = np.array([manifest.label(v) for v in range(manifest.n_trials_per_subject)])
        return cls(manifest.dataset_id, manifest.sampling_rate_hz, trials, labels)

    @classmethod
    def from_epochs(cls, epochs, labels):
        """Build from a ``{(subject, trial): TrialEpoch}`` mapping."""
        n_s = 1 + max(s for s, _ in epochs)
        n_v = 1 + max(v for _, v in epochs)
        first = next(iter(epochs.values()))
        trials = [[np.asarray(epochs[s, v].data, dtype=np.float32) for v in range(n_v)]
                  for s in range(n_s)]
        return cls(first.dataset_id, first.sampling_rate_hz, trials, np.asarray(labels))

    def trial_length(self, v):
        return min(self.trials[s][v].shape[1] for s in range(self.n_subjects))


def as_stores(datasets):
    out = []
    for d in datasets:
        out.append(d if isinstance(d, TrialStore) else TrialStore.from_manifest(d))
    return out


@dataclass
class AlignedBatch:
    """Windows ``[n, C, T]`` plus the bookkeeping the losses need.

    ``pairs[m] = (idx_a, idx_b)`` index the windows of dataset ``m``'s two
    subjects, trial by trial; ``meta`` has one row per window with columns
    (dataset, subject, trial, start sample).
    """

    windows: np.ndarray
    pairs: list
    subjects: list
    meta: np.ndarray

    @property
    def n_windows(self):
        return len(self.windows)

    def subject_groups(self):
        """Window indices of each of the ``2M`` subjects."""
        return [g for a, b in self.pairs for g in (a, b)]


def sample_aligned_batch(stores, rng, window_s=5.0, stride_s=2.0, aligned=True, trial_cap=None):
    """Draw one training batch.

    Per dataset two distinct subjects are drawn uniformly; per trial one window
    start is drawn from the window grid and used for both subjects. With
    ``aligned=False`` subject B draws its own start (the ablation setting).
    """
    windows, pairs, subjects, meta = [], [], [], []
    for m, store in enumerate(stores):
        if store.n_subjects < 2:
            raise InsufficientSubjects(f"{store.dataset_id}: {store.n_subjects} subject(s), need 2")
        a, b = rng.choice(store.n_subjects, size=2, replace=False)
        trials = np.arange(store.n_trials)
        if trial_cap is not None and len(trials) > trial_cap:
            trials = np.sort(rng.choice(trials, size=trial_cap, replace=False))
        win = int(round(window_s * store.rate))
        idx = {a: [], b: []}
        for v in trials:
            starts = window_starts(store.trial_length(v), store.rate, window_s, stride_s)
            start_a = int(rng.choice(starts))
            start_b = start_a if aligned else _other_start(starts, start_a, rng)
            for s, start in ((a, start_a), (b, start_b)):
                idx[s].append(len(windows))
                windows.append(store.trials[s][v][:, start:start + win])
                meta.append((m, s, v, start))
        pairs.append((np.array(idx[a]), np.array(idx[b])))
        subjects.append((int(a), int(b)))
    return AlignedBatch(np.stack(windows), pairs, subjects, np.array(meta, dtype=np.int64))


def _other_start(starts, taken, rng):
    rest = starts[starts != taken]
    return int(rng.choice(rest)) if len(rest) else int(taken)


@dataclass
class PretrainConfig:
    epochs: int = 20
    iterations_per_epoch: int = 256
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    cda_weight: float = 0.02
    temperature: float = 0.07
    objective: str = "isa+cda"
    aligned: bool = True
    window_s: float = 5.0
    stride_s: float = 2.0
    trial_cap: int | None = None
    grad_clip: float | None = None
    seed: int = 0
    deterministic: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        for name in ("iterations_per_epoch", "temperature", "window_s", "stride_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "learning_rate", "weight_decay", "cda_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def batch_losses(model, batch, cfg):
    """Forward pass and the loss breakdown ``{"isa", "cda", "loss"}`` (tensors)."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(batch.windows, dtype=dtype)
    out = model(x, project=cfg.objective != "cda")
    zero = torch.zeros((), dtype=torch.float64)
    l_isa = zero
    if cfg.objective != "cda":
        h = out["h"]
        l_isa = isa_loss([(h[a], h[b]) for a, b in batch.pairs], cfg.temperature)
    l_align = zero
    if cfg.objective in ("isa+cda", "cda"):
        p = out["p"].permute(0, 3, 1, 2)                       # [n, K1, C, N1]
        covs = trial_covariance(p)
        centroids = torch.stack([subject_centroid(covs[g]) for g in batch.subject_groups()])
        l_align = cda_loss(centroids)
    elif cfg.objective == "isa+mmd":
        feats = extract_window_feature(out["h3"])
        groups = [np.concatenate(pr) for pr in batch.pairs]
        terms = [mkmmd_loss(feats[groups[i]], feats[groups[j]])
                 for i in range(len(groups)) for j in range(i + 1, len(groups))]
        l_align = sum(terms) / len(terms) if terms else zero
    weight = 1.0 if cfg.objective == "cda" else cfg.cda_weight
    loss = total_loss(l_isa, l_align, weight)
    return {"isa": l_isa, "cda": l_align, "loss": loss}


def make_optimizer(model, cfg):
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                             weight_decay=cfg.weight_decay, betas=(0.9, 0.999), eps=1e-8)


def pretrain_step(model, optimizer, batch, cfg):
    """One AdamW update. Returns the pre-update loss values as floats."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses = batch_losses(model, batch, cfg)
    for name in ("isa", "cda", "loss"):
        if not torch.isfinite(losses[name]):
            raise NonFiniteLoss(f"{name} loss is {float(losses[name])}")
    losses["loss"].backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def set_determinism(seed, deterministic=True):
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def build_model(cfg):
    torch.manual_seed(cfg.seed)
    return MdJPTNet(cfg.model)


def checkpoint_of(model, cfg, step):
    return ModelCheckpoint(params=model.numpy_state(), config=cfg.to_dict(),
                           seed=cfg.seed, step=step)


def model_from_checkpoint(ckpt):
    cfg = PretrainConfig.from_dict(dict(ckpt.config))
    return MdJPTNet(cfg.model).load_numpy_state(ckpt.params)


def pretrain(cfg, datasets, out_dir=None, log_path=None, progress=None):
    """Run ``epochs x iterations_per_epoch`` steps and return the final checkpoint.

    With ``out_dir`` a checkpoint ``epoch_XXX.npz`` is written after every
    epoch (plus ``final.npz``). Loss rows go to ``log_path`` (JSON lines),
    defaulting to ``out_dir/train_log.jsonl``.
    """
    stores = as_stores(datasets)
    if not stores:
        raise InsufficientSubjects("no datasets to pre-train on")
    for st in stores:
        for v in range(st.n_trials):
            if st.trial_length(v) < int(round(cfg.window_s * st.rate)):
                raise TrialTooShort(f"{st.dataset_id} trial {v} shorter than one window")
    set_determinism(cfg.seed, cfg.deterministic)
    model = build_model(cfg)
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out_dir / "train_log.jsonl"
    log_fh = open(log_path, "w") if log_path else None
    history = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            t0 = time.time()
            for _ in range(cfg.iterations_per_epoch):
                batch = sample_aligned_batch(stores, rng, cfg.window_s, cfg.stride_s,
                                             cfg.aligned, cfg.trial_cap)
                losses = pretrain_step(model, optimizer, batch, cfg)
                row = {"step": step, "epoch": epoch, "l_isa": losses["isa"],
                       "l_cda": losses["cda"], "loss": losses["loss"]}
                history.append(row)
                if log_fh:
                    log_fh.write(json.dumps(row) + "\n")
                step += 1
            ep = history[-cfg.iterations_per_epoch:]
            logger.info("epoch %d: loss %.4f (%.1fs)", epoch,
                        np.mean([r["loss"] for r in ep]), time.time() - t0)
            if progress:
                progress(epoch, ep)
            if out_dir is not None:
                checkpoint_of(model, cfg, step).save(out_dir / f"epoch_{epoch:03d}.npz")
    finally:
        if log_fh:
            log_fh.close()
    ckpt = checkpoint_of(model, cfg, step)
    if out_dir is not None:
        ckpt.save(out_dir / "final.npz")
    return ckpt, history


def window_features(model, windows, batch_size=64):
    """Temporal-mean encoder features ``[n, K]`` for windows ``[n, C, T]``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    feats = []
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            x = torch.as_tensor(np.asarray(windows[i:i + batch_size]), dtype=dtype)
            feats.append(model.features(x).to(torch.float64).numpy())
    if not feats:
        return np.zeros((0, model.cfg.n_features))
    return np.concatenate(feats)


class MdJPT(BaseEstimator, TransformerMixin):
    """Pre-trained EEG encoder as a scikit-learn transformer.

    ``fit`` pre-trains on a list of datasets (manifests or :class:`TrialStore`);
    ``transform`` maps windows ``[n, C, T]`` to features ``[n, K]``.

    Parameters
    ----------
    model : ModelConfig or dict, optional
        Encoder architecture; defaults to the full-size model.
    epochs, iterations_per_epoch, learning_rate, weight_decay : training schedule.
    cda_weight : float
        Weight of the covariance alignment term.
    temperature : float
        Contrastive temperature.
    objective : {"isa+cda", "isa", "cda", "isa+mmd"}
    aligned : bool
        Temporally aligned positive pairs; ``False`` is the ablation.
    seed : int
    checkpoint_dir : path, optional
        Where per-epoch checkpoints and the loss log are written.
    """

    def __init__(self, model=None, epochs=20, iterations_per_epoch=256, learning_rate=5e-4,
                 weight_decay=1e-4, cda_weight=0.02, temperature=0.07, objective="isa+cda",
                 aligned=True, window_s=5.0, stride_s=2.0, trial_cap=None, grad_clip=None,
                 seed=0, deterministic=True, checkpoint_dir=None):
        self.model = model
        self.epochs = epochs
        self.iterations_per_epoch = iterations_per_epoch
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.cda_weight = cda_weight
        self.temperature = temperature
        self.objective = objective
        self.aligned = aligned
        self.window_s = window_s
        self.stride_s = stride_s
        self.trial_cap = trial_cap
        self.grad_clip = grad_clip
        self.seed = seed
        self.deterministic = deterministic
        self.checkpoint_dir = checkpoint_dir

    def config(self):
        model = self.model
        if model is None:
            model = ModelConfig()
        elif isinstance(model, dict):
            model = ModelConfig.from_dict(model)
        params = self.get_params()
        params.pop("checkpoint_dir")
        params["model"] = model
        return PretrainConfig(**params)

    def fit(self, X, y=None):
        cfg = self.config()
        self.checkpoint_, self.history_ = pretrain(cfg, X, out_dir=self.checkpoint_dir)
        self.net_ = model_from_checkpoint(self.checkpoint_)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt):
        if not isinstance(ckpt, ModelCheckpoint):
            ckpt = ModelCheckpoint.load(ckpt)
        cfg = dict(ckpt.config)
        model = cfg.pop("model")
        est = cls(model=model, **cfg)
        est.checkpoint_ = ckpt
        est.history_ = []
        est.net_ = model_from_checkpoint(ckpt)
        return est

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 3:
            raise ValueError(f"expected windows [n, C, T], got shape {X.shape}")
        return window_features(self.net_, X)

    @property
    def n_features_out_(self):
        return self.net_.cfg.n_features


def desk_model_config(n_channels=60):
    """A reduced encoder for CPU-scale synthetic runs (same architecture, smaller dims)."""
    return ModelConfig(
        n_channels=n_channels,
        patch=PatchConfig(32, 12),
        mlla=MllaConfig(hidden_dim=16, out_dim=8, depth=1, n_heads=2, mlp_ratio=2.0),
        dynamics=DynamicsConfig(kernels_per_dim=4),
    )
