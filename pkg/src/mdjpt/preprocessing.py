"""Trial-level EEG preprocessing.

The full chain run by :func:`preprocess_epoch` is::

    resample -> bandpass -> detect noisy (frontals exempt) -> interpolate
             -> [ICA slot] -> detect noisy (all channels) -> interpolate
             -> common average reference -> 60-channel montage

ICA is not performed here; ``ica`` accepts any ``TrialEpoch -> TrialEpoch``
callable for corpora cleaned with external tooling.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy import signal
from sklearn.base import BaseEstimator, TransformerMixin

from .data import DatasetManifest, EpochWindow, TrialEpoch, save_manifest, write_epoch
from .exceptions import (
    BandOutOfRange,
    TooFewCleanChannels,
    TrialTooShort,
    UpsampleRequested,
)
from .montage import FRONTAL_EXCLUDE, STANDARD_60, standard_montage

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoisyChannelRule:
    """Flag a channel when more than ``fraction`` of its samples exceed
    ``multiple`` times its median absolute amplitude."""

    multiple: float
    fraction: float

    def __post_init__(self):
        if not self.multiple > 0:
            raise ValueError("multiple must be positive")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")


LONG_ARTIFACT = NoisyChannelRule(3.0, 0.4)
SHORT_ARTIFACT = NoisyChannelRule(30.0, 0.01)
DEFAULT_RULES = (LONG_ARTIFACT, SHORT_ARTIFACT)


def _rational(ratio, tol=1e-9):
    frac = Fraction(ratio).limit_denominator(10**6)
    while abs(float(frac) - ratio) > tol * ratio:
        frac = Fraction(ratio).limit_denominator(frac.denominator * 10)
    return frac.numerator, frac.denominator


def resample(epoch, target_hz):
    """Downsample ``epoch`` to ``target_hz`` with polyphase filtering.

    The anti-alias FIR cuts off at 0.45 x ``target_hz``. Output length is
    ``floor(n_samples * target / source)``.
    """
    source = epoch.sampling_rate_hz
    if target_hz > source:
        raise UpsampleRequested(f"cannot upsample {source} Hz -> {target_hz} Hz")
    if target_hz == source:
        return epoch
    up, down = _rational(target_hz / source)
    max_rate = max(up, down)
    half_len = 10 * max_rate
    taps = signal.firwin(2 * half_len + 1, 0.9 / max_rate, window=("kaiser", 5.0))
    x = np.asarray(epoch.data, dtype=np.float64)
    y = signal.resample_poly(x, up, down, axis=1, window=taps)
    n_out = int(np.floor(epoch.n_samples * target_hz / source + 1e-9))
    return epoch.replace(data=y[:, :n_out], sampling_rate_hz=target_hz)


def bandpass(epoch, low_hz=0.5, high_hz=47.0, order=4):
    """Zero-phase Butterworth band-pass (forward-backward SOS filtering)."""
    nyq = epoch.sampling_rate_hz / 2
    if not 0 < low_hz < high_hz < nyq:
        raise BandOutOfRange(
            f"need 0 < low < high < {nyq:g} Hz, got [{low_hz:g}, {high_hz:g}]"
        )
    sos = signal.butter(order, [low_hz, high_hz], btype="bandpass",
                        fs=epoch.sampling_rate_hz, output="sos")
    x = np.asarray(epoch.data, dtype=np.float64)
    padlen = min(3 * (2 * len(sos) + 1), x.shape[1] - 1)
    return epoch.replace(data=signal.sosfiltfilt(sos, x, axis=1, padlen=padlen))


def noisy_fraction(x, multiple):
    """Fraction of samples with ``|x| > multiple * median(|x|)``, per row."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    med = np.median(a, axis=-1, keepdims=True)
    return np.mean(a > multiple * med, axis=-1)


def detect_noisy_channels(epoch, rules=DEFAULT_RULES, exclude=()):
    """Labels of channels flagged by any rule; ``exclude`` is never flagged."""
    skip = {lab.upper() for lab in exclude}
    flagged = set()
    for rule in rules:
        frac = noisy_fraction(epoch.data, rule.multiple)
        for lab, f in zip(epoch.channel_names, frac):
            if f > rule.fraction and lab.upper() not in skip:
                flagged.add(lab)
    return flagged


def _nearest(dists, k):
    # stable sort: ties resolved by channel order
    return np.argsort(dists, kind="stable")[:k]


def interpolate_channels(epoch, flagged, montage=None, k=3):
    """Replace each flagged channel by the mean of its ``k`` nearest clean channels."""
    if not flagged:
        return epoch
    montage = montage or standard_montage()
    names = epoch.channel_names
    flagged_up = {lab.upper() for lab in flagged}
    bad = np.array([lab.upper() in flagged_up for lab in names])
    good_idx = np.flatnonzero(~bad)
    if len(good_idx) < k:
        raise TooFewCleanChannels(f"{len(good_idx)} clean channels, need {k}")
    pos = montage.positions(names)
    x = np.array(epoch.data, dtype=np.float64)
    out = x.copy()
    for i in np.flatnonzero(bad):
        d = np.linalg.norm(pos[good_idx] - pos[i], axis=1)
        nn = good_idx[_nearest(d, k)]
        out[i] = x[nn].mean(axis=0)
    return epoch.replace(data=out)


def rereference_common_average(epoch):
    x = np.asarray(epoch.data, dtype=np.float64)
    return epoch.replace(data=x - x.mean(axis=0, keepdims=True))


def interpolate_montage(epoch, montage=None, target=STANDARD_60, k=3):
    """Map ``epoch`` onto the ``target`` channel set.

    Channels present in the source are copied; missing ones are an
    inverse-distance weighted combination of the ``k`` nearest source
    electrodes (a coincident electrode is copied).
    """
    montage = montage or standard_montage()
    src_pos = montage.positions(epoch.channel_names)
    src_index = {lab.upper(): i for i, lab in enumerate(epoch.channel_names)}
    x = np.asarray(epoch.data, dtype=np.float64)
    out = np.empty((len(target), x.shape[1]))
    for row, lab in enumerate(target):
        if lab.upper() in src_index:
            out[row] = x[src_index[lab.upper()]]
            continue
        d = np.linalg.norm(src_pos - montage.position(lab), axis=1)
        nn = _nearest(d, min(k, len(d)))
        if d[nn[0]] == 0.0:
            out[row] = x[nn[0]]
            continue
        w = 1.0 / d[nn]
        out[row] = (w / w.sum()) @ x[nn]
    return epoch.replace(data=out, channel_names=tuple(target))


def window_starts(n_samples, rate, window_s=5.0, stride_s=2.0):
    """Start sample of every window that fits in ``n_samples``."""
    win = int(round(window_s * rate))
    step = int(round(stride_s * rate))
    if n_samples < win:
        raise TrialTooShort(
            f"trial of {n_samples / rate:g} s is shorter than the {window_s:g} s window"
        )
    return np.arange((n_samples - win) // step + 1) * step


def window_trial(epoch, window_s=5.0, stride_s=2.0):
    rate = epoch.sampling_rate_hz
    win = int(round(window_s * rate))
    return [
        EpochWindow(
            data=epoch.data[:, s:s + win],
            trial_id=epoch.trial_id,
            window_start_s=s / rate,
            subject_id=epoch.subject_id,
            dataset_id=epoch.dataset_id,
        )
        for s in window_starts(epoch.n_samples, rate, window_s, stride_s)
    ]


def preprocess_epoch(epoch, montage=None, rate=125.0, low_hz=0.5, high_hz=47.0,
                     rules=DEFAULT_RULES, ica=None, target=STANDARD_60):
    """Run the whole cleaning chain on one trial; returns a 60-channel epoch."""
    montage = montage or standard_montage()
    epoch = resample(epoch, rate)
    epoch = bandpass(epoch, low_hz, high_hz)
    flagged = detect_noisy_channels(epoch, rules, exclude=FRONTAL_EXCLUDE)
    epoch = interpolate_channels(epoch, flagged, montage)
    if ica is not None:
        epoch = ica(epoch)
    flagged2 = detect_noisy_channels(epoch, rules, exclude=())
    epoch = interpolate_channels(epoch, flagged2, montage)
    if flagged or flagged2:
        logger.debug("subject %s trial %s: interpolated %s then %s", epoch.subject_id,
                     epoch.trial_id, sorted(flagged), sorted(flagged2))
    epoch = rereference_common_average(epoch)
    return interpolate_montage(epoch, montage, target)


class Preprocessor(BaseEstimator, TransformerMixin):
    """Stateless transformer wrapping :func:`preprocess_epoch`.

    ``transform`` takes a sequence of :class:`TrialEpoch` and returns the
    cleaned 60-channel epochs in the same order.
    """

    def __init__(self, rate=125.0, low_hz=0.5, high_hz=47.0, rules=DEFAULT_RULES, ica=None):
        self.rate = rate
        self.low_hz = low_hz
        self.high_hz = high_hz
        self.rules = rules
        self.ica = ica

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return [
            preprocess_epoch(e, rate=self.rate, low_hz=self.low_hz, high_hz=self.high_hz,
                             rules=self.rules, ica=self.ica)
            for e in X
        ]


def _prep_one(manifest, s, v, out_dir, kwargs):
    clean = preprocess_epoch(manifest.load(s, v), **kwargs)
    p = out_dir / f"sub{s:03d}_trial{v:03d}.epoch"
    write_epoch(p, clean.replace(data=clean.data.astype(np.float32)))
    return (s, v), p.resolve(), clean.sampling_rate_hz


def prep_dataset(manifest: DatasetManifest, out_dir, n_jobs=1, **kwargs):
    """Preprocess every epoch of ``manifest`` into ``out_dir``; returns the new manifest.

    Cleaned epochs are stored as float32. Trials are independent, so
    ``n_jobs`` workers give the same files as one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    done = Parallel(n_jobs=n_jobs)(
        delayed(_prep_one)(manifest, s, v, out_dir, kwargs) for s, v in manifest.iter_keys()
    )
    new = DatasetManifest(
        dataset_id=manifest.dataset_id,
        sampling_rate_hz=done[0][2],
        channel_names=tuple(kwargs.get("target", STANDARD_60)),
        n_subjects=manifest.n_subjects,
        n_trials_per_subject=manifest.n_trials_per_subject,
        emotion_labels=dict(manifest.emotion_labels),
        paths={key: p for key, p, _ in done},
    )
    return save_manifest(new, out_dir / "manifest.yaml")
