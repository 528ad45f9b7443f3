"""File formats: CIFAR-10 binary, PPM images, checkpoints, feature CSVs, configs, logs.

Every writer is deterministic: identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
import sys
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .attack import LabeledDataset, PoisonPlan, TrainConfig
from .errors import ConfigError, FormatError, ShapeError, ValidationError
from .tensor import no_grad, Tensor

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

CHECKPOINT_MAGIC = b"WAVECKPT"
CHECKPOINT_VERSION = 1


# CIFAR-10 binary ----------------------------------------------------------------------


def load_cifar10_binary(path, max_records: Optional[int] = None, num_classes: int = 10) -> LabeledDataset:
    """Read the CIFAR-10 binary format: 1 label byte + 3072 pixel bytes per record.

    Pixels are stored as the red plane, then green, then blue, each 32x32 row-major.
    """
    path = Path(path)
    raw = path.read_bytes()
    n = len(raw) // CIFAR_RECORD
    if len(raw) % CIFAR_RECORD:
        raise FormatError(
            f"truncated record: file length {len(raw)} is not a multiple of {CIFAR_RECORD}",
            offset=n * CIFAR_RECORD, path=path,
        )
    if max_records is not None:
        n = min(n, max_records)
    buf = np.frombuffer(raw, dtype=np.uint8, count=n * CIFAR_RECORD).reshape(n, CIFAR_RECORD)
    labels = buf[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"label {labels[i]} >= {num_classes} in record {i}", offset=i * CIFAR_RECORD, path=path)
    images = buf[:, 1:].reshape((n,) + CIFAR_SHAPE).astype(np.float32) / 255.0
    return LabeledDataset(images, labels, num_classes)


def quantize(images) -> np.ndarray:
    """Map [0, 1] floats to uint8 with round-half-up (0.5 -> 128)."""
    x = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def write_cifar10_binary(dataset: LabeledDataset, path) -> None:
    if dataset.images.shape[1:] != CIFAR_SHAPE:
        raise ShapeError(f"CIFAR-10 records need 3x32x32 images, got {dataset.images.shape[1:]}")
    if len(dataset) and (dataset.labels.min() < 0 or dataset.labels.max() > 255):
        raise ValidationError("labels must fit in one byte")
    n = len(dataset)
    buf = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    buf[:, 0] = dataset.labels
    buf[:, 1:] = quantize(dataset.images).reshape(n, -1)
    Path(path).write_bytes(buf.tobytes())


def file_sha256(path) -> str:
    """SHA-256 of a file, or of a directory's ``*.bin`` files (sorted names and contents)."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(f.name.encode() + b"\0")
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


# PPM --------------------------------------------------------------------------------


def _ppm_bytes(image) -> bytes:
    x = np.asarray(image)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"PPM export needs a 3xHxW image, got {x.shape}")
    h, w = x.shape[1:]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(x).transpose(1, 2, 0).tobytes()


def export_image_ppm(image, path) -> None:
    """Write a 3xHxW image in [0, 1] as binary 8-bit PPM."""
    data = _ppm_bytes(image)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export_residual_ppm(clean, poisoned, magnification: float, path) -> None:
    """Write ``0.5 + magnification * (poisoned - clean)``, so no change renders mid-gray."""
    clean = np.asarray(clean, dtype=np.float64)
    poisoned = np.asarray(poisoned, dtype=np.float64)
    if clean.shape != poisoned.shape:
        raise ShapeError(f"residual export: shapes {clean.shape} and {poisoned.shape} differ")
    export_image_ppm(np.clip(0.5 + magnification * (poisoned - clean), 0.0, 1.0), path)


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM (maxval 255) into a 3xHxW float array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("incomplete PPM header", offset=pos, path=path)
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {tokens[0]!r})", offset=0, path=path)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", path=path)
    need = w * h * 3
    if len(raw) - pos < need:
        raise FormatError("truncated PPM pixel data", offset=len(raw), path=path)
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


# checkpoints --------------------------------------------------------------------------


def save_checkpoint(path, nets: dict, metadata: Optional[dict] = None) -> None:
    """Serialize named networks plus JSON metadata.

    Layout (all integers little-endian): magic ``WAVECKPT``, u32 version,
    u32 metadata length + UTF-8 JSON, u32 tensor count, then per tensor:
    u16 name length + name, u8 ndim, ndim x u32 extents, float32 LE values.
    """
    meta = dict(metadata or {})
    meta["architectures"] = {k: net.config() for k, net in nets.items()}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(struct.pack("<I", len(meta_bytes)))
    out.write(meta_bytes)
    tensors = [(f"{prefix}.{name}", t.data) for prefix, net in nets.items() for name, t in net.named_parameters()]
    for prefix, net in nets.items():
        mask = getattr(net, "channel_mask", None)
        if mask is not None:
            tensors.append((f"{prefix}.channel_mask", mask))
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(out.getvalue())


@dataclass
class Checkpoint:
    version: int
    tensors: "OrderedDict[str, np.ndarray]"
    metadata: dict = field(default_factory=dict)

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    def state(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        p = prefix + "."
        return OrderedDict((k[len(p) :], v) for k, v in self.tensors.items() if k.startswith(p) and k != p + "channel_mask")


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated checkpoint", offset=pos, path=path)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0, path=path)
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(CHECKPOINT_MAGIC), path=path)
    (mlen,) = struct.unpack("<I", take(4))
    try:
        metadata = json.loads(take(mlen).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}", offset=pos, path=path) from None
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise FormatError("trailing bytes after checkpoint tensors", offset=pos, path=path)
    return Checkpoint(version, tensors, metadata)


def load_checkpoint(path, nets: dict) -> dict:
    """Load tensors into already-constructed ``nets`` (validating shapes); return metadata."""
    ckpt = read_checkpoint(path)
    for prefix, net in nets.items():
        state = ckpt.state(prefix)
        try:
            net.load_state_dict(state)
        except ShapeError as exc:
            raise ShapeError(f"{prefix}: {exc}") from None
        mask_key = f"{prefix}.channel_mask"
        if mask_key in ckpt.tensors and hasattr(net, "channel_mask"):
            mask = ckpt.tensors[mask_key]
            if mask.shape != net.channel_mask.shape:
                raise ShapeError(f"tensor {mask_key!r}: shape {mask.shape} does not match {net.channel_mask.shape}")
            net.channel_mask = mask.copy()
    return ckpt.metadata


def build_nets_from_checkpoint(path):
    """Construct the networks described by a checkpoint's metadata and load them."""
    from .nets import ClassifierNet, GeneratorNet

    ckpt = read_checkpoint(path)
    archs = ckpt.metadata.get("architectures", {})
    nets = {}
    for prefix, cfg in archs.items():
        cfg = dict(cfg)
        kind = cfg.pop("arch")
        if kind == "classifier":
            nets[prefix] = ClassifierNet(seed=None, **cfg)
        elif kind == "generator":
            nets[prefix] = GeneratorNet(seed=None, **cfg)
        else:
            raise FormatError(f"unknown architecture {kind!r} for {prefix!r}", path=path)
    load_checkpoint(path, nets)
    return nets, ckpt.metadata


# latent features -------------------------------------------------------------------------


def extract_features(clf, images, batch_size: int = 500) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(clf.features(Tensor(images[i : i + batch_size])).data)
    return np.concatenate(outs) if outs else np.zeros((0, clf.feature_dim), dtype=np.float32)


def export_latent_features(clf, images, labels, poisoned_flags, path, batch_size: int = 500) -> np.ndarray:
    """CSV with one row per sample: penultimate features ``f0..`` then ``label,poisoned``."""
    feats = extract_features(clf, images, batch_size)
    labels = np.asarray(labels)
    flags = np.asarray(poisoned_flags).astype(int)
    if not (len(feats) == len(labels) == len(flags)):
        raise ShapeError("features, labels and poison flags must have equal length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label", "poisoned"])
        for row, y, f in zip(feats, labels, flags):
            w.writerow([repr(float(v)) for v in row] + [int(y), int(f)])
    return feats


def read_feature_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r[:-2]] for r in body]) if body else np.zeros((0, len(header) - 2))
    labels = np.array([int(r[-2]) for r in body], dtype=np.int64)
    flags = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return header, data, labels, flags


# training logs and reports ---------------------------------------------------------------


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=True) + "\n")


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv_table(rows: list, columns: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "INF" if v > 0 else "-INF"
        return repr(v)
    return "" if v is None else v


# experiment config -----------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Flat ``key = value`` experiment description.

    Grammar: one ``key = value`` per line; ``#`` starts a comment; blank lines
    are ignored; booleans are ``true``/``false``; relative paths resolve
    against the config file's directory.
    """

    dataset: Optional[str] = None
    test_dataset: Optional[str] = None
    train_subset: int = 5000
    test_subset: int = 1000
    num_classes: int = 10
    p_a: float = 0.05
    p_r: float = 0.05
    target: int = 0
    alpha_train: float = 1.0
    alpha_infer: float = 100.0
    seed: int = 0
    epochs: int = 30
    batch_size: int = 128
    clf_lr: float = 0.01
    clf_momentum: float = 0.9
    weight_decay: float = 0.0
    gen_lr: float = 0.001
    lr_decay_every: int = 100
    lr_decay_factor: float = 0.1
    augment_crop: bool = True
    augment_flip: bool = True
    badnets_patch: int = 3
    badnets_value: float = 1.0
    badnets_rate: float = 0.1
    strip_overlays: int = 20
    strip_samples: int = 200
    fp_steps: int = 16
    ss_benign: int = 450
    ss_poison: int = 50
    nc_iterations: int = 300
    nc_lambda: float = 0.01
    nc_lr: float = 0.1
    nc_batch: int = 32
    nc_samples: int = 500
    defense_seeds: int = 3
    out: Optional[str] = None

    def plan(self) -> PoisonPlan:
        return PoisonPlan(self.p_a, self.p_r, self.target, self.alpha_train, self.alpha_infer, self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, clf_lr=self.clf_lr,
            clf_momentum=self.clf_momentum, weight_decay=self.weight_decay, gen_lr=self.gen_lr,
            lr_decay_every=self.lr_decay_every, lr_decay_factor=self.lr_decay_factor,
            augment_crop=self.augment_crop, augment_flip=self.augment_flip,
        )

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        for name in ("p_a", "p_r", "badnets_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        self.plan().validate(self.num_classes)
        self.train_config().validate(self.plan())
        if check_paths:
            for name in ("dataset", "test_dataset"):
                p = getattr(self, name)
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"{name} path does not exist: {p}")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, typ):
    if raw.lower() in ("none", ""):
        return None
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


_FIELD_TYPES = {
    f.name: {"Optional[str]": str, "int": int, "float": float, "bool": bool}.get(str(f.type), str)
    for f in fields(ExperimentConfig)
}


def parse_config(text: str, base_dir=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, _FIELD_TYPES[key])
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = ExperimentConfig(**values)
    if base_dir is not None:
        for name in ("dataset", "test_dataset", "out"):
            p = getattr(cfg, name)
            if p is not None and not os.path.isabs(p):
                setattr(cfg, name, str(Path(base_dir) / p))
    return cfg


def load_config(path, overrides: Optional[dict] = None, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(), base_dir=path.parent, overrides=overrides)
    return cfg.validate(check_paths=check_paths)


def write_manifest(out_dir, cfg: ExperimentConfig, command: str, argv: list, extra: Optional[dict] = None) -> dict:
    """Write ``manifest.json``: config snapshot, versions, seed and dataset hashes."""
    from . import __version__

    datasets = {}
    for name in ("dataset", "test_dataset"):
        p = getattr(cfg, name)
        if p is not None and Path(p).exists():
            datasets[name] = {"path": str(p), "sha256": file_sha256(p)}
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "datasets": datasets,
        "versions": {
            "waveattack": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    Path(out_dir, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
