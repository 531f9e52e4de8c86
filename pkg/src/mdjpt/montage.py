"""Electrode positions on the unit sphere for 10-20 / 10-10 labels."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .exceptions import UnknownChannelLabel

#: Target montage, in canonical order.
STANDARD_60 = (
    "Fp1", "Fpz", "Fp2", "AF3", "AF4", "F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8",
    "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8",
    "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8",
    "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8",
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
    "PO7", "PO5", "PO3", "POz", "PO4", "PO6", "PO8", "O1", "Oz", "O2",
)

FRONTAL_EXCLUDE = ("Fp1", "Fp2", "F7", "F8")


@dataclass(frozen=True)
class MontageTable:
    """Label -> unit-sphere coordinates. Lookups are case-insensitive."""

    labels: tuple
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(
            self, "_index", {lab.upper(): i for i, lab in enumerate(self.labels)}
        )

    def __contains__(self, label):
        return label.upper() in self._index

    def position(self, label):
        try:
            return self.coords[self._index[label.upper()]]
        except KeyError:
            raise UnknownChannelLabel(f"unknown channel label {label!r}") from None

    def positions(self, labels):
        return np.stack([self.position(lab) for lab in labels])

    def canonical(self, label):
        """The table's spelling of ``label``."""
        return self.labels[self._index[label.upper()]] if label in self else label


def read_montage(path):
    labels, rows = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("label"):
                continue
            lab, x, y, z = line.split("\t")
            labels.append(lab)
            rows.append((float(x), float(y), float(z)))
    return MontageTable(tuple(labels), np.array(rows))


@lru_cache(maxsize=1)
def standard_montage():
    """The shipped ``montage_1020_60.tsv`` table."""
    ref = resources.files("mdjpt") / "data" / "montage_1020_60.tsv"
    with resources.as_file(ref) as path:
        return read_montage(path)
