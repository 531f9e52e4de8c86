"""Multi-dataset joint pre-training of an EEG emotion encoder.

The package covers the whole path from raw trial epochs to evaluation:
preprocessing (:mod:`mdjpt.preprocessing`), the channel encoder and dynamics
model (:mod:`mdjpt.model`), the alignment losses (:mod:`mdjpt.losses`), joint
pre-training (:mod:`mdjpt.pretrain`), the few-shot and zero-shot protocols
(:mod:`mdjpt.evaluation`) and a synthetic corpus generator (:mod:`mdjpt.synth`).
"""

__version__ = "0.1.0"

from .data import DatasetManifest, ModelCheckpoint, TrialEpoch, load_manifest, read_epoch, write_epoch
from .evaluation import DEFeatures, EmotionMLP, LDSSmoother, compute_metrics, few_shot_protocol
from .model import MdJPTNet, ModelConfig
from .preprocessing import Preprocessor
from .pretrain import MdJPT, PretrainConfig, TrialStore, pretrain
from .synth import SynthSpec, generate_corpus

__all__ = [
    "DEFeatures", "DatasetManifest", "EmotionMLP", "LDSSmoother", "MdJPT", "MdJPTNet",
    "ModelCheckpoint", "ModelConfig", "Preprocessor", "PretrainConfig", "SynthSpec",
    "TrialEpoch", "TrialStore", "compute_metrics", "few_shot_protocol", "generate_corpus",
    "load_manifest", "pretrain", "read_epoch", "write_epoch",
]
