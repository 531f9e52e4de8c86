"""Downstream evaluation: features, smoothing, classifier, metrics and protocols.

The few-shot protocol splits the subjects of a held-out dataset 1:3 into
classifier-training and test subjects. Window features are smoothed along
each trial with a random-walk linear dynamical system before the MLP sees
them. The zero-shot protocol skips the classifier and scores the nearest
neighbour of every window in the target dataset.
"""
from __future__ import annotations

import copy
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from joblib import Parallel, delayed
from scipy import signal
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.metrics import silhouette_samples
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y
from torch import nn

from .exceptions import (
    DegenerateCluster,
    SingleClassTraining,
    TooFewSubjects,
    UndefinedAUROC,
    ZeroVariance,
)
from .preprocessing import window_starts

DE_BANDS = (
    ("delta", 0.5, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 14.0),
    ("beta", 14.0, 31.0),
    ("gamma", 31.0, 47.0),
)


# --- smoothing -------------------------------------------------------------

def lds_smooth(seq, q=0.01, r=1.0):
    """Kalman filter + RTS smoother for a random walk observed in white noise.

    Every column of ``seq [n, F]`` is smoothed independently under
    ``x_t = x_{t-1} + w`` (variance ``q``), ``y_t = x_t + v`` (variance ``r``).
    The state prior is diffuse, so the first filtered state is ``(y_0, r)``.
    """
    y = np.asarray(seq, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    if q <= 0 or r <= 0:
        raise ValueError("q and r must be positive")
    n = len(y)
    if n == 0:
        return y.copy()
    mean = np.empty_like(y)
    var = np.empty(n)
    mean[0], var[0] = y[0], r
    for t in range(1, n):
        p = var[t - 1] + q
        gain = p / (p + r)
        mean[t] = mean[t - 1] + gain * (y[t] - mean[t - 1])
        var[t] = (1 - gain) * p
    out = mean.copy()
    for t in range(n - 2, -1, -1):
        c = var[t] / (var[t] + q)
        out[t] = mean[t] + c * (out[t + 1] - mean[t])
    return out[:, 0] if squeeze else out


class LDSSmoother(BaseEstimator, TransformerMixin):
    """Stateless transformer wrapper around :func:`lds_smooth` (one sequence per call)."""

    def __init__(self, q=0.01, r=1.0):
        self.q = q
        self.r = r

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return lds_smooth(X, self.q, self.r)


# --- differential entropy baseline -------------------------------------------

def de_features(window, rate=125.0, bands=DE_BANDS):
    """Differential entropy ``0.5 log(2 pi e var)`` per channel and band.

    ``window`` is an :class:`~mdjpt.data.EpochWindow` or an array ``[C, T]``.
    The band variance is the periodogram integrated over ``[low, high)``.
    Returns ``[C, n_bands]``.
    """
    x = np.asarray(getattr(window, "data", window), dtype=np.float64)
    if x.shape[-1] < rate:
        raise ValueError("DE needs at least one second of signal")
    freqs, pxx = signal.periodogram(x, fs=rate, axis=-1)
    df = freqs[1] - freqs[0]
    out = []
    for _, lo, hi in bands:
        sel = (freqs >= lo) & (freqs < hi)
        var = pxx[..., sel].sum(axis=-1) * df
        out.append(0.5 * np.log(2 * math.pi * math.e * np.maximum(var, 1e-300)))
    return np.stack(out, axis=-1)


class DEFeatures(BaseEstimator, TransformerMixin):
    """Windows ``[n, C, T]`` -> flattened DE features ``[n, C * n_bands]``."""

    def __init__(self, rate=125.0, bands=DE_BANDS):
        self.rate = rate
        self.bands = bands

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X)
        return de_features(X, self.rate, self.bands).reshape(len(X), -1)


# --- classifier --------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    hidden_units: int = 128
    epochs: int = 25
    batch_size: int = 256
    learning_rate: float = 5e-4
    weight_decay: float = 2.2e-3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")


def _mlp(n_in, hidden, n_out):
    return nn.Sequential(nn.Linear(n_in, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
                         nn.Linear(hidden, n_out))


class EmotionMLP(ClassifierMixin, BaseEstimator):
    """Two-layer MLP (linear, batch norm, ReLU, linear) trained with Adam.

    Inputs are standardized with statistics of the training set.

    Parameters
    ----------
    hidden_units, epochs, batch_size, learning_rate, weight_decay
        See :class:`ClassifierConfig`.
    standardize : bool
        Z-score the inputs with training-set statistics.
    random_state : int
        Seeds weight init and batch order.
    """

    def __init__(self, hidden_units=128, epochs=25, batch_size=256, learning_rate=5e-4,
                 weight_decay=2.2e-3, standardize=True, random_state=0):
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.standardize = standardize
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg, **kw):
        return cls(**asdict(cfg), **kw)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise SingleClassTraining(f"training labels contain one class ({self.classes_[0]})")
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(0) if self.standardize else np.zeros(X.shape[1])
        sd = X.std(0) if self.standardize else np.ones(X.shape[1])
        self.scale_ = np.where(sd > 0, sd, 1.0)
        gen = torch.Generator().manual_seed(int(self.random_state))
        torch.manual_seed(int(self.random_state))
        net = _mlp(X.shape[1], self.hidden_units, len(self.classes_))
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate,
                               weight_decay=self.weight_decay)
        xt = torch.as_tensor((X - self.mean_) / self.scale_, dtype=torch.float32)
        yt = torch.as_tensor(np.searchsorted(self.classes_, y))
        net.train()
        for _ in range(self.epochs):
            order = torch.randperm(len(xt), generator=gen)
            for i in range(0, len(xt), self.batch_size):
                idx = order[i:i + self.batch_size]
                if len(idx) < 2:            # batch norm needs two samples
                    continue
                opt.zero_grad()
                loss = nn.functional.cross_entropy(net(xt[idx]), yt[idx])
                loss.backward()
                opt.step()
        net.eval()
        self.net_ = net
        self._nets = {torch.float32: net}
        return self

    def scores(self, X):
        """Differentiable logits for a float tensor ``X`` of raw features."""
        check_is_fitted(self, "net_")
        mean = torch.as_tensor(self.mean_, dtype=X.dtype)
        scale = torch.as_tensor(self.scale_, dtype=X.dtype)
        if X.dtype not in self._nets:
            self._nets[X.dtype] = copy.deepcopy(self.net_).to(X.dtype)
        return self._nets[X.dtype]((X - mean) / scale)

    def predict_proba(self, X):
        X = check_array(X, dtype=np.float64)
        with torch.no_grad():
            logits = self.scores(torch.as_tensor(X, dtype=torch.float32))
        return torch.softmax(logits.double(), dim=1).numpy()

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(1)]


def train_classifier(features, labels, cfg=ClassifierConfig(), seed=0):
    return EmotionMLP.from_config(cfg, random_state=seed).fit(features, labels)


# --- metrics -----------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float
    confusion: np.ndarray
    skipped_auroc_classes: int = 0

    FIELDS = ("accuracy", "precision", "recall", "f1", "auroc")

    def to_dict(self):
        d = {k: float(getattr(self, k)) for k in self.FIELDS}
        d["confusion"] = np.asarray(self.confusion).tolist()
        return d

    def to_text(self):
        """``key<TAB>value`` lines in a fixed order."""
        lines = [f"{k}\t{getattr(self, k):.6f}" for k in self.FIELDS]
        lines.append("confusion\t" + ";".join(",".join(str(int(c)) for c in row)
                                                for row in np.asarray(self.confusion)))
        return "\n".join(lines) + "\n"


def confusion_matrix(pred, labels, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def binary_auroc(scores, positive):
    """Area under the ROC curve by trapezoidal integration (ties handled as diagonal steps)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positive[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(p)[distinct]
    fps = np.cumsum(~p)[distinct]
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    return float(np.trapezoid(tpr, fpr))


def compute_metrics(probabilities, labels, n_classes=None):
    """Accuracy, macro precision/recall/F1 and one-vs-rest macro AUROC.

    Classes absent from ``labels`` are skipped in the AUROC average with an
    :class:`UndefinedAUROC` warning. Precision of a never-predicted class is 0.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels) or len(labels) == 0:
        raise ValueError("need probabilities [n, n_class] and n >= 1 labels")
    k = n_classes or probs.shape[1]
    pred = probs.argmax(1)
    cm = confusion_matrix(pred, labels, k)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(1)
    predicted = cm.sum(0)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(predicted > 0, tp / predicted, 0.0)
        rec = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    present = support > 0
    aucs, skipped = [], 0
    for c in range(k):
        pos = labels == c
        if not pos.any() or pos.all():
            skipped += 1
            continue
        aucs.append(binary_auroc(probs[:, c], pos))
    if skipped:
        warnings.warn(UndefinedAUROC(f"{skipped} class(es) without both positives and negatives"))
    return MetricsReport(
        accuracy=float(tp.sum() / len(labels)),
        precision=float(prec[present].mean()),
        recall=float(rec[present].mean()),
        f1=float(f1[present].mean()),
        auroc=float(np.mean(aucs)) if aucs else float("nan"),
        confusion=cm,
        skipped_auroc_classes=skipped,
    )


# --- few-shot protocol ---------------------------------------------------------

@dataclass
class FeatureSequence:
    """Window features of one trial in temporal order."""

    features: np.ndarray
    label: int
    subject_id: int
    trial_id: int
    starts: np.ndarray = field(default=None, repr=False)


def trial_windows(trial, rate, window_s=5.0, stride_s=2.0):
    """Windows ``[n, C, T]`` of one trial array ``[C, T]`` and their start samples."""
    starts = window_starts(trial.shape[1], rate, window_s, stride_s)
    win = int(round(window_s * rate))
    return np.stack([trial[:, s:s + win] for s in starts]), starts


def extract_sequences(store, featurizer, window_s=5.0, stride_s=2.0, subjects=None):
    """Featurize every trial of ``store`` (a :class:`~mdjpt.pretrain.TrialStore`).

    ``featurizer`` is any transformer mapping windows ``[n, C, T]`` to ``[n, F]``.
    """
    subjects = range(store.n_subjects) if subjects is None else subjects
    windows, index = [], []
    for s in subjects:
        for v in range(store.n_trials):
            w, starts = trial_windows(store.trials[s][v], store.rate, window_s, stride_s)
            index.append((s, v, starts, len(windows), len(windows) + len(w)))
            windows.extend(w)
    feats = featurizer.transform(np.stack(windows))
    return [FeatureSequence(feats[a:b], int(store.labels[v]), s, v, starts)
            for s, v, starts, a, b in index]


def split_subjects(subjects, ratio, rng):
    """Random ``ratio`` share of subjects (at least one) for training; the rest test."""
    subjects = np.asarray(sorted(set(subjects)))
    if len(subjects) < 4:
        raise TooFewSubjects(f"few-shot protocol needs >= 4 subjects, got {len(subjects)}")
    n_train = max(1, int(round(ratio * len(subjects))))
    perm = rng.permutation(subjects)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def stack_sequences(seqs, smooth=True, q=0.01, r=1.0):
    feats = [lds_smooth(s.features, q, r) if smooth else s.features for s in seqs]
    x = np.concatenate(feats)
    y = np.concatenate([np.full(len(s.features), s.label) for s in seqs])
    subj = np.concatenate([np.full(len(s.features), s.subject_id) for s in seqs])
    return x, y, subj


@dataclass
class FewShotResult:
    reports: list
    splits: list

    def summary(self, key="accuracy"):
        vals = np.array([getattr(r, key) for r in self.reports])
        return float(vals.mean()), float(vals.std())

    @property
    def mean_accuracy(self):
        return self.summary()[0]


def _one_repeat(seqs, train_subj, n_classes, cfg, seed, smooth, q, r):
    train = [s for s in seqs if s.subject_id in set(train_subj)]
    test = [s for s in seqs if s.subject_id not in set(train_subj)]
    xtr, ytr, _ = stack_sequences(train, smooth, q, r)
    xte, yte, ste = stack_sequences(test, smooth, q, r)
    assert not set(ste) & set(train_subj), "test subject leaked into training"
    clf = train_classifier(xtr, ytr, cfg, seed)
    probs = np.zeros((len(xte), n_classes))
    probs[:, clf.classes_] = clf.predict_proba(xte)
    return compute_metrics(probs, yte, n_classes)


def few_shot_protocol(sequences, ratio=0.25, repeats=6, seed=0, classifier=ClassifierConfig(),
                      smooth=True, q=0.01, r=1.0, n_classes=None, n_jobs=1):
    """Repeated subject-split evaluation on one held-out dataset.

    ``sequences`` are the :class:`FeatureSequence` of every trial and subject of
    the target. The subject splits depend only on ``seed``, so two feature
    sets evaluated with the same seed share their splits.
    """
    rng = np.random.default_rng(seed)
    subjects = sorted({s.subject_id for s in sequences})
    n_classes = n_classes or 1 + max(s.label for s in sequences)
    splits = [split_subjects(subjects, ratio, rng) for _ in range(repeats)]
    seeds = np.random.SeedSequence(seed).generate_state(repeats)
    jobs = (delayed(_one_repeat)(sequences, tr, n_classes, classifier, int(sd), smooth, q, r)
            for (tr, _), sd in zip(splits, seeds))
    reports = Parallel(n_jobs=n_jobs)(jobs)
    return FewShotResult(list(reports), splits)


# --- zero-shot and representation analyses -----------------------------------------

def zero_shot_nn(features, labels, groups=None):
    """Nearest-neighbour (cosine) label agreement among the target's samples.

    Each sample's neighbour is searched among all *other* samples; ties go to
    the lowest index. With ``groups``, samples sharing the query's group are
    excluded too (e.g. overlapping windows of the same subject and trial).
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(x) < 2:
        raise ValueError("need at least two samples")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    xn = x / np.where(norms > 0, norms, 1.0)
    sim = xn @ xn.T
    np.fill_diagonal(sim, -np.inf)
    if groups is not None:
        groups = np.asarray(groups)
        sim[groups[:, None] == groups[None, :]] = -np.inf
    nn_idx = sim.argmax(1)              # first maximum = lowest index
    return float(np.mean(labels[nn_idx] == labels))


def silhouette_datasets(features, dataset_ids):
    """Mean Euclidean silhouette for every pair of datasets, treating each as a cluster.

    Returns ``{(a, b): score}`` over sorted id pairs.
    """
    x = np.asarray(features, dtype=np.float64)
    ids = np.asarray(dataset_ids)
    uniq = sorted(set(ids.tolist()))
    if len(uniq) < 2:
        raise DegenerateCluster("need at least two datasets")
    for u in uniq:
        if (ids == u).sum() < 2:
            raise DegenerateCluster(f"dataset {u!r} has fewer than 2 samples")
    out = {}
    for i, a in enumerate(uniq):
        for b in uniq[i + 1:]:
            sel = (ids == a) | (ids == b)
            out[(a, b)] = float(silhouette_samples(x[sel], ids[sel]).mean())
    return out


def integrated_gradients(score_fn, x, target, baseline=None, steps=64):
    """Midpoint-rule Integrated Gradients of ``score_fn(X)[:, target]``.

    ``score_fn`` maps a float64 tensor ``[n, F]`` to scores ``[n, n_class]``
    (for :class:`EmotionMLP`, pass ``clf.scores``). Returns ``[F]``.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    b = torch.zeros_like(x) if baseline is None else torch.as_tensor(np.asarray(baseline), dtype=torch.float64)
    alphas = (torch.arange(steps, dtype=torch.float64) + 0.5) / steps
    path = (b + alphas[:, None] * (x - b)[None]).requires_grad_(True)
    score = score_fn(path)[:, target].sum()
    (grad,) = torch.autograd.grad(score, path)
    return ((x - b) * grad.mean(0)).numpy()


def attribution_correlation(attr_a, attr_b):
    a = np.asarray(attr_a, dtype=np.float64)
    b = np.asarray(attr_b, dtype=np.float64)
    if len(a) < 2 or len(a) != len(b):
        raise ValueError("need two equal-length vectors with >= 2 entries")
    da, db = a - a.mean(), b - b.mean()
    if not np.any(da) or not np.any(db):
        raise ZeroVariance("attribution vector has zero variance")
    return float(da @ db / math.sqrt((da @ da) * (db @ db)))
