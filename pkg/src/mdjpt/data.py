"""Corpus data model: trial epochs, the dataset manifest and the epoch file format.

Epoch files hold one trial of one subject as a fixed 64-byte header followed by
row-major little-endian IEEE float samples::

    offset  size  field
    0       8     magic b"MDJPT1\\0\\0"
    8       4     format version (u32, currently 1)
    12      4     number of channels C (u32)
    16      4     number of samples T (u32)
    20      8     sampling rate in Hz (f64)
    28      1     bytes per sample (u8, 4 = float32, 8 = float64)
    29      35    reserved, zero

Manifests are YAML documents; see ``docs/formats.md``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .exceptions import (
    CorruptHeader,
    DimensionMismatch,
    DuplicateTrial,
    MissingFile,
    SchemaViolation,
)

MAGIC = b"MDJPT1\x00\x00"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sIIIdB35s")
SAMPLE_TYPES = {4: "<f4", 8: "<f8"}
SCHEMA_VERSION = 1
DATA_ROOT_ENV = "MDJPT_DATA_ROOT"

assert HEADER.size == 64


@dataclass(frozen=True, eq=False)
class TrialEpoch:
    """One subject's multichannel recording of one stimulus trial.

    ``data`` is ``[channels, samples]`` in microvolts.
    """

    data: np.ndarray
    channel_names: tuple
    sampling_rate_hz: float
    subject_id: int = 0
    trial_id: int = 0
    dataset_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DimensionMismatch(f"epoch data must be 2-D, got shape {data.shape}")
        names = tuple(self.channel_names)
        if data.shape[0] != len(names):
            raise DimensionMismatch(
                f"{data.shape[0]} data rows but {len(names)} channel names"
            )
        if not self.sampling_rate_hz > 0:
            raise SchemaViolation("sampling_rate_hz", "must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "sampling_rate_hz", float(self.sampling_rate_hz))

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    @property
    def duration_s(self):
        return self.n_samples / self.sampling_rate_hz

    def replace(self, data=None, channel_names=None, sampling_rate_hz=None):
        """Copy with new samples (and optionally new montage / rate)."""
        return TrialEpoch(
            data=self.data if data is None else data,
            channel_names=self.channel_names if channel_names is None else channel_names,
            sampling_rate_hz=(
                self.sampling_rate_hz if sampling_rate_hz is None else sampling_rate_hz
            ),
            subject_id=self.subject_id,
            trial_id=self.trial_id,
            dataset_id=self.dataset_id,
        )


@dataclass(frozen=True, eq=False)
class EpochWindow:
    """A fixed-length slice ``[C, T]`` of a trial starting at ``window_start_s``."""

    data: np.ndarray
    trial_id: int
    window_start_s: float
    subject_id: int = 0
    dataset_id: str = ""


def write_epoch(path, epoch):
    """Write ``epoch`` to ``path`` in the binary epoch format.

    float32 data is stored as float32 and everything else as float64, so
    :func:`read_epoch` returns the written array bit for bit.
    """
    data = np.asarray(epoch.data)
    if not np.all(np.isfinite(data)):
        raise ValueError("refusing to write non-finite samples")
    c, t = data.shape
    width = 4 if data.dtype == np.float32 else 8
    header = HEADER.pack(MAGIC, FORMAT_VERSION, c, t, float(epoch.sampling_rate_hz), width, b"")
    payload = np.ascontiguousarray(data, dtype=SAMPLE_TYPES[width]).tobytes(order="C")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_epoch_header(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise CorruptHeader(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, c, t, rate, width, _ = HEADER.unpack(raw)
    if magic != MAGIC:
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptHeader(f"{path}: unsupported version {version}")
    if not (rate > 0 and np.isfinite(rate)):
        raise CorruptHeader(f"{path}: invalid sampling rate {rate}")
    if width not in SAMPLE_TYPES:
        raise CorruptHeader(f"{path}: unsupported sample width {width}")
    return c, t, rate, width


def read_epoch(path, channel_names=None, subject_id=0, trial_id=0, dataset_id=""):
    """Read an epoch file written by :func:`write_epoch`.

    Channel names are not stored in epoch files; when omitted they default to
    ``ch0, ch1, ...``.
    """
    c, t, rate, width = read_epoch_header(path)
    with open(path, "rb") as fh:
        fh.seek(HEADER.size)
        payload = fh.read()
    if len(payload) != width * c * t:
        raise DimensionMismatch(
            f"{path}: header declares {c}x{t} samples, payload holds {len(payload) / width:g}"
        )
    dtype = np.float32 if width == 4 else np.float64
    data = np.frombuffer(payload, dtype=SAMPLE_TYPES[width]).reshape(c, t).astype(dtype)
    if channel_names is None:
        channel_names = [f"ch{i}" for i in range(c)]
    elif len(channel_names) != c:
        raise DimensionMismatch(
            f"{path}: header declares {c} channels, manifest lists {len(channel_names)}"
        )
    return TrialEpoch(data, channel_names, rate, subject_id, trial_id, dataset_id)


@dataclass(frozen=True)
class DatasetManifest:
    """Validated description of one dataset on disk.

    ``paths`` maps ``(subject, trial)`` to absolute epoch file paths and
    ``emotion_labels`` maps trial index to class id.
    """

    dataset_id: str
    sampling_rate_hz: float
    channel_names: tuple
    n_subjects: int
    n_trials_per_subject: int
    emotion_labels: dict
    paths: dict
    source: Path | None = field(default=None, compare=False)

    @property
    def v_m(self):
        return self.n_trials_per_subject

    @property
    def n_classes(self):
        return len(set(self.emotion_labels.values()))

    def iter_keys(self):
        for s in range(self.n_subjects):
            for v in range(self.n_trials_per_subject):
                yield s, v

    def load(self, subject, trial):
        return read_epoch(
            self.paths[(subject, trial)],
            channel_names=self.channel_names,
            subject_id=subject,
            trial_id=trial,
            dataset_id=self.dataset_id,
        )

    def label(self, trial):
        return self.emotion_labels[trial]

    def to_dict(self, relative_to=None):
        base = Path(relative_to) if relative_to is not None else None
        rows = []
        for (s, v), p in sorted(self.paths.items()):
            p = Path(p)
            if base is not None:
                try:
                    p = p.relative_to(base)
                except ValueError:
                    pass
            rows.append({"subject": s, "trial": v, "path": str(p)})
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset_id": self.dataset_id,
            "sampling_rate_hz": self.sampling_rate_hz,
            "channel_names": list(self.channel_names),
            "n_subjects": self.n_subjects,
            "n_trials_per_subject": self.n_trials_per_subject,
            "emotion_labels": {int(k): int(v) for k, v in sorted(self.emotion_labels.items())},
            "paths": rows,
        }


_REQUIRED = (
    "schema_version",
    "dataset_id",
    "sampling_rate_hz",
    "channel_names",
    "n_subjects",
    "n_trials_per_subject",
    "emotion_labels",
    "paths",
)


def resolve_path(path):
    """Resolve a relative path against ``$MDJPT_DATA_ROOT`` when it is set."""
    path = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not path.is_absolute() and root and not path.exists():
        return Path(root) / path
    return path


def _positive_int(doc, key):
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, int) or val <= 0:
        raise SchemaViolation(key, f"expected a positive integer, got {val!r}")
    return val


def manifest_from_dict(doc, base_dir=".", check_files=True):
    if not isinstance(doc, dict):
        raise SchemaViolation("<root>", "manifest must be a mapping")
    for key in _REQUIRED:
        if key not in doc or doc[key] is None:
            raise SchemaViolation(key, "required field missing")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaViolation("schema_version", f"unsupported {doc['schema_version']!r}")

    rate = doc["sampling_rate_hz"]
    if isinstance(rate, bool) or not isinstance(rate, (int, float)) or not rate > 0:
        raise SchemaViolation("sampling_rate_hz", f"expected a positive number, got {rate!r}")
    names = doc["channel_names"]
    if not isinstance(names, list) or not names or not all(isinstance(n, str) for n in names):
        raise SchemaViolation("channel_names", "expected a non-empty list of labels")
    if len({n.upper() for n in names}) != len(names):
        raise SchemaViolation("channel_names", "labels must be unique")
    n_subjects = _positive_int(doc, "n_subjects")
    v_m = _positive_int(doc, "n_trials_per_subject")

    labels_raw = doc["emotion_labels"]
    if not isinstance(labels_raw, dict):
        raise SchemaViolation("emotion_labels", "expected a mapping trial -> class")
    labels = {int(k): int(v) for k, v in labels_raw.items()}
    if set(labels) != set(range(v_m)):
        raise SchemaViolation("emotion_labels", f"must cover trials 0..{v_m - 1}")

    rows = doc["paths"]
    if not isinstance(rows, list):
        raise SchemaViolation("paths", "expected a list of {subject, trial, path}")
    base_dir = Path(base_dir)
    paths = {}
    for row in rows:
        try:
            key = (int(row["subject"]), int(row["trial"]))
            p = Path(row["path"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation("paths", f"malformed row {row!r}") from exc
        if key in paths:
            raise DuplicateTrial(f"subject {key[0]} trial {key[1]} listed twice")
        if not (0 <= key[0] < n_subjects and 0 <= key[1] < v_m):
            raise SchemaViolation("paths", f"row {key} outside the subject/trial grid")
        paths[key] = p if p.is_absolute() else (base_dir / p).resolve()
    missing = [(s, v) for s in range(n_subjects) for v in range(v_m) if (s, v) not in paths]
    if missing:
        raise SchemaViolation("paths", f"{len(missing)} (subject, trial) pairs without a file, e.g. {missing[0]}")

    if check_files:
        for key, p in paths.items():
            c, _, file_rate, _ = read_epoch_header(p)
            if c != len(names):
                raise DimensionMismatch(f"{p}: {c} channels, manifest lists {len(names)}")
            if abs(file_rate - rate) > 1e-9 * rate:
                raise SchemaViolation("sampling_rate_hz", f"{p} declares {file_rate} Hz")

    return DatasetManifest(
        dataset_id=str(doc["dataset_id"]),
        sampling_rate_hz=float(rate),
        channel_names=tuple(names),
        n_subjects=n_subjects,
        n_trials_per_subject=v_m,
        emotion_labels=labels,
        paths=paths,
    )


def load_manifest(path, check_files=True):
    """Load and validate a dataset manifest.

    Raises
    ------
    MissingFile
        The manifest or a referenced epoch file does not exist.
    SchemaViolation
        A field is missing or malformed; ``exc.field`` names it.
    DuplicateTrial
        A (subject, trial) pair appears more than once.
    """
    path = resolve_path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise SchemaViolation("<root>", f"not valid YAML: {exc}") from exc
    manifest = manifest_from_dict(doc, base_dir=path.parent, check_files=check_files)
    return _with_source(manifest, path)


def _with_source(manifest, path):
    object.__setattr__(manifest, "source", Path(path))
    return manifest


def save_manifest(manifest, path):
    path = Path(path)
    doc = manifest.to_dict(relative_to=path.parent.resolve())
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False, default_flow_style=None, width=120)
    return _with_source(manifest, path)


@dataclass(eq=False)
class ModelCheckpoint:
    """Encoder parameters plus the config snapshot, seed and step counter."""

    params: dict
    config: dict
    seed: int
    step: int = 0

    def save(self, path):
        path = Path(path)
        arrays = {f"param/{k}": np.asarray(v) for k, v in self.params.items()}
        meta = json.dumps(
            {"config": self.config, "seed": int(self.seed), "step": int(self.step)},
            sort_keys=True,
        )
        arrays["__meta__"] = np.frombuffer(meta.encode(), dtype=np.uint8)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **arrays)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise MissingFile(str(path))
        with np.load(path) as npz:
            meta = json.loads(bytes(npz["__meta__"]).decode())
            params = {
                k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")
            }
        return cls(params=params, config=meta["config"], seed=meta["seed"], step=meta["step"])

    def equals(self, other):
        """Bit-level equality of parameters and metadata."""
        if self.config != other.config or self.seed != other.seed or self.step != other.step:
            return False
        if self.params.keys() != other.params.keys():
            return False
        return all(
            self.params[k].dtype == other.params[k].dtype
            and self.params[k].shape == other.params[k].shape
            and self.params[k].tobytes() == other.params[k].tobytes()
            for k in self.params
        )
