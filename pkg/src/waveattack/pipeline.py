"""End-to-end experiment steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import dataio, defenses, metrics
from .attack import (
    LabeledDataset,
    PoisonPlan,
    badnets_poison,
    badnets_train,
    poison_images,
    train_clean,
    waveattack_train,
)
from .errors import ConfigError
from .nets import ClassifierNet, GeneratorNet

logger = logging.getLogger(__name__)

ATTACKS = ("clean", "wave", "badnets")


def _resolve_split(path, split: str) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if p.is_dir():
        if split == "train":
            files = sorted(p.glob("data_batch_*.bin")) or sorted(p.glob("train*.bin"))
        else:
            files = sorted(p.glob("test_batch*.bin")) or sorted(p.glob("test*.bin"))
        if files:
            return files
    raise ConfigError(f"no CIFAR-10 {split} records found at {path}")


def load_split(path, split: str, limit: Optional[int], num_classes: int = 10) -> LabeledDataset:
    parts = []
    remaining = limit
    for f in _resolve_split(path, split):
        ds = dataio.load_cifar10_binary(f, remaining, num_classes)
        parts.append(ds)
        if remaining is not None:
            remaining -= len(ds)
            if remaining <= 0:
                break
    images = np.concatenate([d.images for d in parts])
    labels = np.concatenate([d.labels for d in parts])
    return LabeledDataset(images, labels, num_classes).validate()


def load_datasets(cfg: dataio.ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Train and test subsets named by the config (test defaults to the train path's directory)."""
    if cfg.dataset is None:
        raise ConfigError("config has no 'dataset' path")
    test_path = cfg.test_dataset
    if test_path is None:
        test_path = cfg.dataset if Path(cfg.dataset).is_dir() else Path(cfg.dataset).parent
    train = load_split(cfg.dataset, "train", cfg.train_subset, cfg.num_classes)
    test = load_split(test_path, "test", cfg.test_subset, cfg.num_classes)
    return train, test


def badnets_plan(cfg: dataio.ExperimentConfig) -> PoisonPlan:
    # regularization samples would carry the patch with true labels and cancel the backdoor
    return PoisonPlan(p_a=cfg.badnets_rate, p_r=0.0, target=cfg.target, alpha_train=1.0,
                      alpha_infer=1.0, seed=cfg.seed)


def train(kind: str, cfg: dataio.ExperimentConfig, train_set: LabeledDataset, on_epoch=None):
    """Train one model; returns ``(nets, log, metadata)``."""
    if kind not in ATTACKS:
        raise ConfigError(f"unknown attack {kind!r}; expected one of {ATTACKS}")
    tc = cfg.train_config()
    clf = ClassifierNet(num_classes=cfg.num_classes, seed=cfg.seed)
    # the output directory is not part of the model's provenance
    conf = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    meta = {"attack": kind, "seed": cfg.seed, "config": conf, "config_hash": config_hash(cfg)}
    if kind == "clean":
        clf, log = train_clean(train_set, clf, tc, seed=cfg.seed, on_epoch=on_epoch)
        nets = {"clf": clf}
    elif kind == "wave":
        gen = GeneratorNet(seed=cfg.seed + 1)
        plan = cfg.plan()
        gen, clf, log = waveattack_train(train_set, gen, clf, plan, tc, on_epoch=on_epoch)
        nets = {"gen": gen, "clf": clf}
        meta["plan"] = plan.to_dict()
    else:
        plan = badnets_plan(cfg)
        clf, log = badnets_train(train_set, clf, plan, tc, cfg.badnets_patch, cfg.badnets_value, on_epoch=on_epoch)
        nets = {"clf": clf}
        meta["plan"] = plan.to_dict()
        meta["badnets"] = {"patch_size": cfg.badnets_patch, "patch_value": cfg.badnets_value}
    meta["wall_seconds"] = log.wall_seconds
    return nets, log, meta


def config_hash(cfg: dataio.ExperimentConfig) -> str:
    import hashlib

    keep = {k: v for k, v in cfg.to_dict().items() if k not in ("out", "dataset", "test_dataset")}
    return hashlib.sha256(repr(sorted(keep.items())).encode()).hexdigest()[:16]


def poisoner(nets: dict, meta: dict, alpha: Optional[float] = None) -> Callable:
    """Attack-time poisoning function recorded in a checkpoint's metadata.

    WaveAttack uses ``alpha`` (default: the plan's ``alpha_infer``); BadNets stamps its patch.
    """
    kind = meta.get("attack")
    if kind == "wave" and "gen" in nets:
        a = meta["plan"]["alpha_infer"] if alpha is None else alpha
        gen = nets["gen"]
        return lambda x: poison_images(x, gen, a)
    if kind == "badnets":
        bn = meta.get("badnets", {})
        return lambda x: badnets_poison(x, bn.get("patch_size", 3), bn.get("patch_value", 1.0))
    raise ConfigError(f"checkpoint for attack {kind!r} carries no trigger")


def evaluate(clf, poison_fn, test: LabeledDataset, target: int, alpha: float) -> metrics.AttackReport:
    """BA on clean test data plus ASR and fidelity under ``poison_fn``."""
    ba = metrics.benign_accuracy(clf, test.images, test.labels)
    asr = metrics.attack_success_rate(clf, poison_fn, test.images, test.labels, target)
    p, s = metrics.fidelity(test.images, poison_fn(test.images))
    return metrics.AttackReport(ba=ba, asr=asr, psnr_db=p, ssim=s, alpha_used=float(alpha), n_eval=len(test))


def evaluate_both(clf, nets: dict, meta: dict, test: LabeledDataset, target: int) -> dict:
    """Reports at the training and the inference trigger strength (one for BadNets)."""
    if meta.get("attack") == "badnets":
        return {"patch": evaluate(clf, poisoner(nets, meta), test, target, 1.0)}
    out = {}
    for which in ("train", "infer"):
        a = meta["plan"][f"alpha_{which}"]
        out[f"alpha_{which}"] = evaluate(clf, poisoner(nets, meta, a), test, target, a)
    return out


# defenses ------------------------------------------------------------------------------


def run_strip(clf, poison_fn, test: LabeledDataset, cfg: dataio.ExperimentConfig, seed: int):
    """Benign suspects, poisoned suspects and the overlay pool are disjoint slices of the test set."""
    n = cfg.strip_samples
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(test))
    imgs, labels = test.images[order], test.labels[order]
    benign = imgs[:n]
    rest = np.arange(n, len(imgs))
    cand_idx = rest[labels[rest] != cfg.target][:n]
    pool_idx = np.setdiff1d(rest, cand_idx)
    if len(pool_idx) == 0:
        raise ConfigError(f"test set too small for {n} STRIP suspects plus an overlay pool")
    cand, pool = imgs[cand_idx], imgs[pool_idx]
    return defenses.strip_report(clf, benign, poison_fn(cand), pool, cfg.strip_overlays, seed)


def run_fine_pruning(clf, poison_fn, test: LabeledDataset, cfg: dataio.ExperimentConfig):
    half = len(test) // 2
    calib = test.images[:half]
    held = test.select(slice(half, None))

    def eval_fn(model):
        ba = metrics.benign_accuracy(model, held.images, held.labels)
        asr = metrics.attack_success_rate(model, poison_fn, held.images, held.labels, cfg.target)
        return ba, asr

    return defenses.fine_pruning(clf, calib, eval_fn, cfg.fp_steps)


def spectral_mix(train_set: LabeledDataset, train_poison_fn, cfg: dataio.ExperimentConfig, seed: int):
    """Target-class training images mixed with payload-style poisoned images (9:1 by default)."""
    rng = np.random.default_rng(seed)
    tgt = np.nonzero(train_set.labels == cfg.target)[0]
    other = np.nonzero(train_set.labels != cfg.target)[0]
    b = rng.choice(tgt, size=min(cfg.ss_benign, len(tgt)), replace=False)
    p = rng.choice(other, size=min(cfg.ss_poison, len(other)), replace=False)
    images = np.concatenate([train_set.images[b], train_poison_fn(train_set.images[p])])
    flags = np.r_[np.zeros(len(b), dtype=int), np.ones(len(p), dtype=int)]
    return images, flags


def run_spectral(clf, train_set, train_poison_fn, cfg, seed: int):
    images, flags = spectral_mix(train_set, train_poison_fn, cfg, seed)
    feats = dataio.extract_features(clf, images)
    return defenses.spectral_signature(feats, flags, seed=seed), flags


def run_neural_cleanse(clf, test: LabeledDataset, cfg: dataio.ExperimentConfig, seed: int):
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(test), size=min(cfg.nc_samples, len(test)), replace=False)
    return defenses.neural_cleanse(clf, test.images[idx], cfg.nc_iterations, cfg.nc_lambda, cfg.nc_lr,
                                   cfg.nc_batch, seed)


def run_gradcam(clf, clean_clf, test: LabeledDataset, n: int = 16):
    images = test.images[:n]
    classes = test.labels[:n]
    maps = np.stack([defenses.gradcam(clf, x, int(c)) for x, c in zip(images, classes)])
    report = defenses.DefenseReport("gradcam", summary={"n_images": n})
    if clean_clf is not None:
        ref = np.stack([defenses.gradcam(clean_clf, x, int(c)) for x, c in zip(images, classes)])
        report.summary["mean_abs_difference"] = float(np.abs(maps - ref).mean())
        report.reference_maps = ref
    report.maps = maps
    return report
