"""Trains (or reloads) the three toy models the acceptance criteria are judged on.

Data: real CIFAR-10 binaries when ``WAVEATTACK_CIFAR10_DIR`` is set, else the
offline stand-in.  Checkpoints, logs and training wall times are cached under
``WAVEATTACK_ACCEPTANCE_CACHE`` (default ``<repo>/.acceptance_cache``) keyed
by a hash of the experiment config, so a rerun with an unchanged config only
re-evaluates.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from waveattack import dataio, pipeline
from waveattack.standin import make_standin

REPO = Path(__file__).resolve().parent.parent
KINDS = ("clean", "wave", "badnets")


def cache_dir() -> Path:
    d = Path(os.environ.get("WAVEATTACK_ACCEPTANCE_CACHE", REPO / ".acceptance_cache"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def acceptance_config() -> dataio.ExperimentConfig:
    """5000 train / 1000 test, p_a = p_r = 0.05, target 0, alpha 1 / 100, 30 epochs."""
    cfg = dataio.ExperimentConfig()
    real = os.environ.get("WAVEATTACK_CIFAR10_DIR")
    if real:
        cfg.dataset = real
    else:
        data = cache_dir() / "standin"
        if not (data / "test_batch.bin").exists():
            data.mkdir(exist_ok=True)
            train, test = make_standin(5000, 1000, seed=0)
            dataio.write_cifar10_binary(train, data / "data_batch_1.bin")
            dataio.write_cifar10_binary(test, data / "test_batch.bin")
        cfg.dataset = str(data)
    return cfg.validate()


@dataclass
class Trained:
    nets: dict
    meta: dict
    records: list
    wall_seconds: float

    @property
    def clf(self):
        return self.nets["clf"]


def get_models(kinds=KINDS, log=print) -> tuple[dataio.ExperimentConfig, object, object, dict]:
    cfg = acceptance_config()
    train, test = pipeline.load_datasets(cfg)
    tag = f"{pipeline.config_hash(cfg)}-{dataio.file_sha256(cfg.dataset)[:12]}"
    out = {}
    for kind in kinds:
        ckpt = cache_dir() / f"{kind}-{tag}.ckpt"
        side = cache_dir() / f"{kind}-{tag}.json"
        if ckpt.exists() and side.exists():
            nets, meta = dataio.build_nets_from_checkpoint(ckpt)
            info = json.loads(side.read_text())
        else:
            log(f"training {kind} model ({cfg.epochs} epochs); cached at {ckpt}")
            nets, tlog, meta = pipeline.train(kind, cfg, train,
                                              on_epoch=lambda r, k=kind: log(f"  {k} {json.dumps(r)}"))
            dataio.save_checkpoint(ckpt, nets, meta)
            info = {"records": tlog.records, "wall_seconds": tlog.wall_seconds}
            side.write_text(json.dumps(info))
        out[kind] = Trained(nets, meta, info["records"], info["wall_seconds"])
    return cfg, train, test, out


if __name__ == "__main__":
    get_models()
