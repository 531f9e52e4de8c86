"""Synthetic multi-dataset emotion-EEG corpora.

Each trial of a dataset is a stimulus. The stimulus drives a few latent
sources whose resonance frequencies depend on the trial's emotion class; the
source trajectories are shared by every subject who watched that trial. A
subject sees the sources through its own mixing (the base topographies plus a
perturbation, with per-channel gains) and adds its own background rhythms.
Each dataset applies its own channel gains and a linear covariance shift, and
white sensor noise is added at the requested SNR, an RMS amplitude ratio
of the noiseless signal to the noise.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml
from scipy import signal

from .data import DatasetManifest, TrialEpoch, save_manifest, write_epoch
from .exceptions import InvalidSpec
from .montage import standard_montage

DEFAULT_LAYOUT = (
    "Fp1", "Fp2", "F7", "F3", "F4", "F8", "T7", "C3",
    "C4", "T8", "P7", "P3", "P4", "P8", "O1", "O2",
)


@dataclass(frozen=True)
class DatasetSpec:
    n_subjects: int = 4
    n_trials: int = 8
    n_classes: int = 3
    channels: tuple = DEFAULT_LAYOUT
    sampling_rate_hz: float = 125.0
    trial_s: float = 15.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))


@dataclass(frozen=True)
class SynthSpec:
    """Generation parameters. ``datasets`` holds one :class:`DatasetSpec` per dataset."""

    datasets: tuple = field(default_factory=lambda: tuple(DatasetSpec() for _ in range(4)))
    n_sources: int = 6
    class_separation_hz: float = 3.0
    stimulus_jitter_hz: float = 2.0
    snr: float = 10.0
    subject_mix_scale: float = 0.3
    subject_gain_scale: float = 0.3
    background_scale: float = 1.0
    n_background: int = 3
    dataset_shift_scale: float = 0.8
    envelope_depth: float = 0.5
    amplitude_uv: float = 20.0
    seed: int = 0

    def __post_init__(self):
        ds = tuple(d if isinstance(d, DatasetSpec) else DatasetSpec(**d) for d in self.datasets)
        object.__setattr__(self, "datasets", ds)

    @property
    def n_datasets(self):
        return len(self.datasets)

    def validate(self):
        if not self.datasets:
            raise InvalidSpec("at least one dataset is required")
        if self.n_sources < 1:
            raise InvalidSpec("n_sources must be >= 1")
        if not 0 <= self.class_separation_hz <= 13:
            raise InvalidSpec("class_separation_hz must lie in [0, 13]")
        if self.n_background < 0:
            raise InvalidSpec("n_background must be >= 0")
        if not self.snr > 0:
            raise InvalidSpec("snr must be positive (use inf for noiseless)")
        for name in ("subject_mix_scale", "subject_gain_scale", "background_scale",
                     "dataset_shift_scale", "envelope_depth", "stimulus_jitter_hz"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be >= 0")
        montage = standard_montage()
        for i, d in enumerate(self.datasets):
            if d.n_subjects < 2:
                raise InvalidSpec(f"dataset {i}: need >= 2 subjects")
            if d.n_classes < 2:
                raise InvalidSpec(f"dataset {i}: need >= 2 classes")
            if len(d.channels) < self.n_sources + (self.n_background > 0):
                raise InvalidSpec(f"dataset {i}: need more channels than sources")
            if d.n_trials < d.n_classes:
                raise InvalidSpec(f"dataset {i}: fewer trials than classes")
            if d.sampling_rate_hz <= 2 * 30:
                raise InvalidSpec(f"dataset {i}: sampling rate too low for 4-30 Hz sources")
            if d.trial_s <= 0:
                raise InvalidSpec(f"dataset {i}: trial_s must be positive")
            for lab in d.channels:
                if lab not in montage:
                    raise InvalidSpec(f"dataset {i}: unknown channel {lab!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["datasets"] = [dict(x, channels=list(x["channels"])) for x in d["datasets"]]
        return d

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known - {"n_datasets", "dataset"}
        if unknown:
            raise InvalidSpec(f"unknown spec fields: {sorted(unknown)}")
        base = DatasetSpec(**doc.pop("dataset", {}))
        n = doc.pop("n_datasets", None)
        if "datasets" in doc:
            doc["datasets"] = tuple(replace(base, **d) for d in doc["datasets"])
        elif n is not None:
            doc["datasets"] = tuple(base for _ in range(int(n)))
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def ar2_process(freq_hz, rate, n, rng, radius=0.96, burn_in=200):
    """Unit-variance AR(2) resonator at ``freq_hz``."""
    theta = 2 * math.pi * freq_hz / rate
    a = [1.0, -2 * radius * math.cos(theta), radius ** 2]
    x = signal.lfilter([1.0], a, rng.standard_normal(n + burn_in))[burn_in:]
    return x / x.std()


def smooth_envelope(n, rate, rng, depth, timescale_s=1.0):
    if depth == 0:
        return np.ones(n)
    width = max(1, int(timescale_s * rate))
    noise = rng.standard_normal(n + 2 * width)
    kernel = np.hanning(2 * width + 1)
    sm = np.convolve(noise, kernel / np.sqrt(np.sum(kernel ** 2)), mode="same")[width:width + n]
    return np.exp(depth * sm)


class SynthGenerator:
    """Deterministic renderer for every (dataset, subject, trial) of a spec."""

    def __init__(self, spec):
        self.spec = spec.validate()
        montage = standard_montage()
        rng = _rng(spec.seed, 0)
        k = spec.n_sources
        # source locations on the upper hemisphere and their scalp topographies
        v = rng.standard_normal((k, 3))
        v[:, 2] = np.abs(v[:, 2]) + 0.5
        self.source_pos = v / np.linalg.norm(v, axis=1, keepdims=True)
        max_classes = max(d.n_classes for d in spec.datasets)
        # class signature: one resonance frequency per (class, source), shared by
        # all datasets, drawn around a per-source base frequency
        sep = spec.class_separation_hz
        base = rng.uniform(4.0 + sep, 30.0 - sep, size=k)
        self.class_freqs = base + rng.uniform(-sep, sep, size=(max_classes, k))
        self._montage = montage

    def topographies(self, channels):
        pos = self._montage.positions(channels)
        d2 = ((pos[:, None, :] - self.source_pos[None]) ** 2).sum(-1)
        return np.exp(-d2 / 0.5)                                      # [n_ch, K]

    def labels(self, m):
        d = self.spec.datasets[m]
        lab = np.arange(d.n_trials) % d.n_classes
        return _rng(self.spec.seed, 1, m).permutation(lab)

    def dataset_transform(self, m):
        d = self.spec.datasets[m]
        s = self.spec.dataset_shift_scale
        rng = _rng(self.spec.seed, 2, m)
        n = len(d.channels)
        gains = np.exp(s * rng.standard_normal(n))
        shift = np.eye(n) + s * rng.standard_normal((n, n)) / math.sqrt(n)
        return gains[:, None] * shift

    def subject_mixing(self, m, subject):
        d = self.spec.datasets[m]
        rng = _rng(self.spec.seed, 3, m, subject)
        base = self.topographies(d.channels)
        pert = self.spec.subject_mix_scale * rng.standard_normal(base.shape) * base.std()
        gains = np.exp(self.spec.subject_gain_scale * rng.standard_normal(len(d.channels)))
        return gains[:, None] * (base + pert)

    def sources(self, m, trial):
        """Latent trajectories ``[K, T]`` shared by all subjects for this trial."""
        d = self.spec.datasets[m]
        n = int(round(d.trial_s * d.sampling_rate_hz))
        rng = _rng(self.spec.seed, 4, m, trial)
        cls = self.labels(m)[trial]
        freqs = self.class_freqs[cls]
        if self.spec.stimulus_jitter_hz:
            # every stimulus evokes its class signature slightly off-centre
            j = self.spec.stimulus_jitter_hz
            freqs = np.clip(freqs + _rng(self.spec.seed, 8, m, trial).uniform(-j, j, len(freqs)), 2.0, 40.0)
        z = np.stack([ar2_process(f, d.sampling_rate_hz, n, rng) for f in freqs])
        env = smooth_envelope(n, d.sampling_rate_hz, rng, self.spec.envelope_depth)
        return z * env

    def background(self, m, subject, trial, mix, n):
        """Subject-specific rhythms that are not locked to the stimulus.

        Their topographies lie in the orthogonal complement of the subject's
        source mixing, so they never leak into a source-space reconstruction.
        Each rhythm's topography has the mean norm of the mixing columns, so
        ``background_scale`` is an amplitude ratio relative to one source; every
        trial draws a fresh log-normal gain per rhythm.
        """
        d = self.spec.datasets[m]
        srng = _rng(self.spec.seed, 5, m, subject)
        k = self.spec.n_background
        freqs = srng.uniform(4.0, 30.0, size=k)
        comp = np.eye(len(mix)) - mix @ np.linalg.pinv(mix)
        topo = comp @ srng.standard_normal((len(mix), k))
        topo *= np.linalg.norm(mix, axis=0).mean() / np.linalg.norm(topo, axis=0)
        trng = _rng(self.spec.seed, 6, m, subject, trial)
        gains = np.exp(0.5 * trng.standard_normal(k))
        rhythms = np.stack([ar2_process(f, d.sampling_rate_hz, n, trng) for f in freqs])
        return self.spec.background_scale * topo @ (gains[:, None] * rhythms)

    def render(self, m, subject, trial):
        """Return ``(data [n_ch, T], parts)`` in microvolts."""
        z = self.sources(m, trial)
        mix = self.dataset_transform(m) @ self.subject_mixing(m, subject)
        clean = mix @ z
        x = clean
        if self.spec.background_scale and self.spec.n_background:
            x = x + self.background(m, subject, trial, mix, z.shape[1])
        noise = np.zeros_like(x)
        if np.isfinite(self.spec.snr):
            rng = _rng(self.spec.seed, 7, m, subject, trial)
            sigma = math.sqrt(np.mean(clean ** 2)) / self.spec.snr
            noise = sigma * rng.standard_normal(x.shape)
        data = self.spec.amplitude_uv * (x + noise)
        return data, {"sources": z, "mixing": mix, "clean": self.spec.amplitude_uv * clean}

    def epoch(self, m, subject, trial):
        d = self.spec.datasets[m]
        data, _ = self.render(m, subject, trial)
        return TrialEpoch(data.astype(np.float32), d.channels, d.sampling_rate_hz,
                          subject, trial, dataset_id(self.spec, m))


def dataset_id(spec, m):
    return f"synth{m}"


def generate_corpus(spec, out_dir):
    """Write every dataset of ``spec`` under ``out_dir/<dataset_id>/``.

    Returns the list of manifests (one per dataset), each saved as
    ``manifest.yaml`` next to its epoch files. Same spec -> byte-identical files.
    """
    gen = SynthGenerator(spec)
    out_dir = Path(out_dir)
    manifests = []
    for m, d in enumerate(spec.datasets):
        ds_dir = out_dir / dataset_id(spec, m)
        ds_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for s in range(d.n_subjects):
            for v in range(d.n_trials):
                p = ds_dir / f"sub{s:03d}_trial{v:03d}.epoch"
                write_epoch(p, gen.epoch(m, s, v))
                paths[(s, v)] = p.resolve()
        manifest = DatasetManifest(
            dataset_id=dataset_id(spec, m),
            sampling_rate_hz=d.sampling_rate_hz,
            channel_names=d.channels,
            n_subjects=d.n_subjects,
            n_trials_per_subject=d.n_trials,
            emotion_labels={v: int(c) for v, c in enumerate(gen.labels(m))},
            paths=paths,
        )
        manifests.append(save_manifest(manifest, ds_dir / "manifest.yaml"))
    with open(out_dir / "spec.yaml", "w") as fh:
        yaml.safe_dump(spec.to_dict(), fh, sort_keys=False)
    return manifests
