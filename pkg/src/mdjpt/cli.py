"""``mdjpt`` command line entry point.

Exit codes: 0 success, 1 validation error (one ``error: <Kind>: <message>``
line on stderr), 2 internal error (traceback on stderr). Every run writes a
``run_manifest.json`` beside its outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import ModelCheckpoint, load_manifest
from .exceptions import MdjptError

logger = logging.getLogger("mdjpt")

RUN_MANIFEST = "run_manifest.json"


class ValidationError(MdjptError):
    """Bad command line input."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def content_hash(path):
    """Git-style blob hash (sha1 over ``b"blob <size>\\0" + bytes``)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_run_manifest(out_dir, command, config, seed, inputs, outputs, checkpoint=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": [str(Path(p).resolve()) for p in inputs],
        "outputs": [str(Path(p).resolve()) for p in outputs],
        "checkpoint_hash": content_hash(checkpoint) if checkpoint else None,
    }
    path = out_dir / RUN_MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    return path


def _split(value):
    return [v for v in (value or "").split(",") if v]


def _load_yaml(path):
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    with open(p) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{p}: expected a mapping")
    return doc


def _load_manifests(paths):
    if not paths:
        raise ValidationError("no dataset manifests given")
    return [load_manifest(p) for p in paths]


def _check_model_input(manifests, model_cfg):
    from .montage import STANDARD_60

    for m in manifests:
        if m.channel_names != STANDARD_60[: model_cfg.n_channels] or len(m.channel_names) != model_cfg.n_channels:
            raise ValidationError(
                f"{m.dataset_id}: not on the {model_cfg.n_channels}-channel montage; run `mdjpt prep` first")


# --- subcommands -------------------------------------------------------------

def cmd_prep(args):
    from .preprocessing import prep_dataset

    manifests = _load_manifests(_split(args.manifest))
    out = Path(args.out)
    outputs = []
    for m in manifests:
        dest = out / m.dataset_id if len(manifests) > 1 else out
        new = prep_dataset(m, dest, rate=args.rate, low_hz=args.low, high_hz=args.high,
                           n_jobs=args.jobs)
        outputs.append(new.source)
        print(f"{m.dataset_id}: {new.n_subjects} subjects x {new.v_m} trials -> {new.source}")
    config = {"rate": args.rate, "low_hz": args.low, "high_hz": args.high}
    write_run_manifest(out, "prep", config, None, [m.source for m in manifests], outputs)


def cmd_synth(args):
    from .synth import SynthSpec, generate_corpus

    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = SynthSpec.from_dict(dict(spec.to_dict(), seed=args.seed))
    manifests = generate_corpus(spec, args.out)
    for m in manifests:
        print(f"{m.dataset_id}: {m.n_subjects} subjects x {m.v_m} trials -> {m.source}")
    write_run_manifest(args.out, "synth", spec.to_dict(), spec.seed,
                       [args.spec] if args.spec else [], [m.source for m in manifests])


def resolve_pretrain_config(args):
    """Built-in defaults < config file < command line flags."""
    from .pretrain import PretrainConfig

    doc = _load_yaml(args.config) if args.config else {}
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "iterations_per_epoch": args.iterations,
        "objective": args.objective,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if args.unaligned:
        doc["aligned"] = False
    if args.deterministic:
        doc["deterministic"] = True
    elif "deterministic" not in doc:
        doc["deterministic"] = False
    try:
        return PretrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid pretrain config: {exc}") from exc


def cmd_pretrain(args):
    import torch

    from .pretrain import pretrain

    cfg = resolve_pretrain_config(args)
    manifests = _load_manifests(_split(args.datasets))
    for m in manifests:
        if args.exclude and m.dataset_id in _split(args.exclude) and not args.allow_target:
            raise ValidationError(
                f"dataset {m.dataset_id!r} is the evaluation target; pass --allow-target to train on it")
    ids = [m.dataset_id for m in manifests]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate dataset ids: {ids}")
    _check_model_input(manifests, cfg.model)
    if not cfg.deterministic:
        torch.set_num_threads(max(1, args.jobs))
    out = Path(args.out)
    ckpt, history = pretrain(cfg, manifests, out_dir=out)
    final = out / "final.npz"
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    print(f"{len(history)} steps, final loss {history[-1]['loss']:.4f}" if history else "0 steps")
    print(f"checkpoint {final} ({content_hash(final)})")
    write_run_manifest(out, "pretrain", cfg.to_dict(), cfg.seed, [m.source for m in manifests],
                       [final, out / "train_log.jsonl"], checkpoint=final)


def _featurizer(args, manifest):
    from .evaluation import DEFeatures
    from .pretrain import MdJPT

    if args.checkpoint:
        est = MdJPT.from_checkpoint(args.checkpoint)
        _check_model_input([manifest], est.net_.cfg)
        return est
    return DEFeatures(rate=manifest.sampling_rate_hz)


def cmd_finetune(args):
    from .evaluation import ClassifierConfig, extract_sequences, few_shot_protocol
    from .pretrain import TrialStore

    target = load_manifest(args.target)
    feat = _featurizer(args, target)
    clf = ClassifierConfig(epochs=args.classifier_epochs)
    seqs = extract_sequences(TrialStore.from_manifest(target), feat)
    res = few_shot_protocol(seqs, ratio=args.ratio, repeats=args.repeats, seed=args.seed,
                            classifier=clf, n_jobs=1 if args.deterministic else args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    blocks = []
    for i, (rep, (train, _)) in enumerate(zip(res.reports, res.splits)):
        blocks.append(f"# repeat {i} train_subjects {','.join(map(str, train))}\n" + rep.to_text())
    summary = "".join(f"{k}_mean_std\t{m:.6f}\t{s:.6f}\n"
                      for k in ("accuracy", "precision", "recall", "f1", "auroc")
                      for m, s in [res.summary(k)])
    (out / "metrics.txt").write_text("".join(blocks) + "# summary\n" + summary)
    print(summary, end="")
    config = {"ratio": args.ratio, "repeats": args.repeats, "classifier_epochs": args.classifier_epochs,
              "features": "encoder" if args.checkpoint else "de"}
    write_run_manifest(out, "finetune", config, args.seed,
                       [target.source] + ([args.checkpoint] if args.checkpoint else []),
                       [out / "metrics.txt"], checkpoint=args.checkpoint)


def cmd_zeroshot(args):
    from .evaluation import extract_sequences, zero_shot_nn
    from .pretrain import TrialStore

    target = load_manifest(args.target)
    seqs = extract_sequences(TrialStore.from_manifest(target), _featurizer(args, target))
    x = np.concatenate([s.features for s in seqs])
    y = np.concatenate([np.full(len(s.features), s.label) for s in seqs])
    groups = None
    if args.exclude_same_trial:
        groups = np.concatenate([np.full(len(s.features), s.subject_id * 100003 + s.trial_id)
                                 for s in seqs])
    acc = zero_shot_nn(x, y, groups)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chance = 1.0 / len(set(y.tolist()))
    (out / "zeroshot.txt").write_text(f"accuracy\t{acc:.6f}\nchance\t{chance:.6f}\nn\t{len(y)}\n")
    print(f"zero-shot accuracy {acc:.4f} (chance {chance:.4f}, n={len(y)})")
    config = {"features": "encoder" if args.checkpoint else "de",
              "exclude_same_trial": args.exclude_same_trial}
    write_run_manifest(out, "zeroshot", config, None,
                       [target.source] + ([args.checkpoint] if args.checkpoint else []),
                       [out / "zeroshot.txt"], checkpoint=args.checkpoint)


def cmd_report(args):
    from .evaluation import DEFeatures, extract_sequences, silhouette_datasets
    from .pretrain import MdJPT, TrialStore

    manifests = _load_manifests(_split(args.datasets))
    stores = [TrialStore.from_manifest(m) for m in manifests]
    featurizers = {"de": DEFeatures(rate=manifests[0].sampling_rate_hz)}
    if args.checkpoint:
        featurizers["encoder"] = MdJPT.from_checkpoint(args.checkpoint)
        _check_model_input(manifests, featurizers["encoder"].net_.cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    arrays = {}
    for name, feat in featurizers.items():
        xs, ids, labels = [], [], []
        for st in stores:
            for s in extract_sequences(st, feat):
                xs.append(s.features)
                ids += [st.dataset_id] * len(s.features)
                labels += [s.label] * len(s.features)
        x = np.concatenate(xs)
        arrays[f"{name}/features"] = x
        arrays[f"{name}/dataset"] = np.array(ids)
        arrays[f"{name}/label"] = np.array(labels)
        for (a, b), score in silhouette_datasets(x, ids).items():
            lines.append(f"{name}\t{a}\t{b}\t{score:.6f}")
    text = "features\tdataset_a\tdataset_b\tsilhouette\n" + "\n".join(lines) + "\n"
    (out / "silhouette.tsv").write_text(text)
    np.savez(out / "features.npz", **arrays)
    print(text, end="")
    write_run_manifest(out, "report", {"features": sorted(featurizers)}, None,
                       [m.source for m in manifests] + ([args.checkpoint] if args.checkpoint else []),
                       [out / "silhouette.tsv", out / "features.npz"], checkpoint=args.checkpoint)


def cmd_gradcheck(args):
    from .gradcheck import format_table, run_all

    results = run_all(args.seed)
    table = format_table(results)
    print(table)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(table + "\n")
        write_run_manifest(args.out, "gradcheck", {}, args.seed, [], [Path(args.out) / "gradcheck.txt"])
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise ValidationError(f"gradient check failed for {', '.join(failed)}")


# --- parser ------------------------------------------------------------------

def _common(p, seed=0):
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--deterministic", action="store_true", help="serialize work, fix reduction order")
    p.add_argument("--jobs", type=int, default=1, help="worker count")


def build_parser():
    parser = _Parser(prog="mdjpt", description="Multi-dataset joint pre-training for EEG emotion recognition.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("prep", help="clean, re-reference and map epochs to the 60-channel montage")
    p.add_argument("--manifest", required=True, help="manifest path(s), comma separated")
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=float, default=125.0)
    p.add_argument("--low", type=float, default=0.5)
    p.add_argument("--high", type=float, default=47.0)
    _common(p)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("synth", help="generate a synthetic multi-dataset corpus")
    p.add_argument("--spec", help="YAML file with SynthSpec fields")
    p.add_argument("--out", required=True)
    _common(p, seed=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="joint pre-training on several prepared datasets")
    p.add_argument("--config", help="YAML file mirroring PretrainConfig fields")
    p.add_argument("--datasets", required=True, help="prepared manifest paths, comma separated")
    p.add_argument("--exclude", help="evaluation target dataset id(s) that must not be trained on")
    p.add_argument("--allow-target", action="store_true")
    p.add_argument("--unaligned", action="store_true", help="ablation: unaligned positive pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int, help="iterations per epoch")
    p.add_argument("--objective", choices=("isa+cda", "isa", "cda", "isa+mmd"))
    _common(p, seed=None)
    p.set_defaults(func=cmd_pretrain)

    for name, func, text in (("finetune", cmd_finetune, "few-shot protocol on a held-out dataset"),
                             ("zeroshot", cmd_zeroshot, "nearest-neighbour accuracy without training")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--target", required=True, help="prepared manifest of the held-out dataset")
        p.add_argument("--checkpoint", help="pre-trained checkpoint; omit for DE features")
        p.add_argument("--out", required=True)
        if name == "finetune":
            p.add_argument("--ratio", type=float, default=0.25, help="share of training subjects")
            p.add_argument("--repeats", type=int, default=6)
            p.add_argument("--classifier-epochs", type=int, default=25)
        else:
            p.add_argument("--exclude-same-trial", action="store_true",
                           help="skip neighbours from the query's own subject and trial")
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="inter-dataset silhouette and feature export")
    p.add_argument("--datasets", required=True, help="prepared manifest paths, comma separated")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
        return 0
    except SystemExit as exc:            # --help / --version
        return int(exc.code or 0)
    except (MdjptError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
