import json

import numpy as np
import pytest

from waveattack import dataio
from waveattack.attack import LabeledDataset
from waveattack.cli import run

TOY = """
dataset = data
train_subset = 64
test_subset = 48
epochs = 1
batch_size = 16
p_a = 0.05
p_r = 0.05
augment_crop = false
strip_samples = 8
strip_overlays = 3
fp_steps = 2
ss_benign = 9
ss_poison = 3
nc_iterations = 2
nc_samples = 8
nc_batch = 4
defense_seeds = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "data").mkdir()
    rng = np.random.default_rng(0)
    for name, n in (("data_batch_1.bin", 64), ("test_batch.bin", 48)):
        ds = LabeledDataset(rng.random((n, 3, 32, 32)), np.arange(n) % 10)
        dataio.write_cifar10_binary(ds, root / "data" / name)
    (root / "toy.cfg").write_text(TOY)
    return root


def _run(ws, *argv):
    return run([argv[0], "--config", str(ws / "toy.cfg"), *argv[1:]])


@pytest.fixture(scope="module")
def trained(workspace):
    ws = workspace
    codes = [
        _run(ws, "train-attack", "--seed", "1", "--out", str(ws / "run1")),
        _run(ws, "train-attack", "--seed", "1", "--out", str(ws / "run2")),
        _run(ws, "train-attack", "--attack", "badnets", "--out", str(ws / "bad")),
        _run(ws, "train-clean", "--out", str(ws / "clean")),
    ]
    assert codes == [0, 0, 0, 0]
    return ws


def test_train_attack_deterministic(trained):
    ws = trained
    for name in ("train_log.jsonl", "report.json", "model.ckpt"):
        assert (ws / "run1" / name).read_bytes() == (ws / "run2" / name).read_bytes(), name
    report = json.loads((ws / "run1" / "report.json").read_text())
    assert set(report["reports"]) == {"alpha_train", "alpha_infer"}
    assert (ws / "run1" / "training.png").exists()


def test_manifest_records_seed_and_hash(trained):
    m = json.loads((trained / "run1" / "manifest.json").read_text())
    assert m["seed"] == 1 and m["config"]["seed"] == 1
    assert len(m["datasets"]["dataset"]["sha256"]) == 64
    assert m["command"] == "train-attack"


def test_eval_clean_checkpoint_with_trigger(trained):
    ws = trained
    code = _run(ws, "eval", "--checkpoint", str(ws / "clean" / "model.ckpt"),
                "--trigger-from", str(ws / "run1" / "model.ckpt"), "--out", str(ws / "ev"))
    assert code == 0
    res = json.loads((ws / "ev" / "eval.json").read_text())
    assert res["attack"] == "clean"
    assert 0.0 <= res["reports"]["alpha_infer"]["asr"] <= 1.0


@pytest.mark.parametrize("kind", ["strip", "fp", "ss", "nc", "gradcam"])
def test_defend_each_kind(trained, kind):
    ws = trained
    out = ws / f"def_{kind}"
    extra = ["--clean-checkpoint", str(ws / "clean" / "model.ckpt")] if kind == "gradcam" else []
    code = _run(ws, "defend", "--kind", kind, "--checkpoint", str(ws / "run1" / "model.ckpt"), *extra,
                "--out", str(out))
    assert code == 0
    lines = (out / f"defense_{kind}.jsonl").read_text().splitlines()
    assert lines and all(json.loads(line)["kind"] for line in lines)
    if kind == "nc":
        rows = (out / "nc_seed0.csv").read_text().splitlines()
        assert rows[0] == "class,mask_l1,anomaly_index" and len(rows) == 11


def test_poison_export_and_features(trained):
    ws = trained
    out = ws / "px"
    assert _run(ws, "poison-export", "--checkpoint", str(ws / "run1" / "model.ckpt"), "--count", "2",
                "--out", str(out)) == 0
    assert dataio.read_ppm(out / "residual_000.ppm").shape == (3, 32, 32)
    assert _run(ws, "dump-features", "--checkpoint", str(ws / "run1" / "model.ckpt"), "--out", str(ws / "ft")) == 0
    header, data, _, flags = dataio.read_feature_csv(ws / "ft" / "features.csv")
    assert data.shape == (48, 256) and flags.sum() == 5


def _astronaut_ppm(path):
    import skimage.data

    img = skimage.data.astronaut()[:256, :256].astype(np.float64) / 255.0
    dataio.export_image_ppm(img.reshape(32, 8, 32, 8, 3).mean(axis=(1, 3)).transpose(2, 0, 1), path)


def test_probe_zero_amplitude(tmp_path, capsys):
    _astronaut_ppm(tmp_path / "a.ppm")
    assert run(["probe-subbands", "--image", str(tmp_path / "a.ppm"), "--amplitude", "0", "--out", str(tmp_path / "o")]) == 0
    src = (tmp_path / "a.ppm").read_bytes()
    for band in ("LL", "LH", "HL", "HH"):
        assert (tmp_path / "o" / f"noise_{band}.ppm").read_bytes() == src
    assert (tmp_path / "o" / "psnr.csv").read_text() == "band,psnr_db\nLL,INF\nLH,INF\nHL,INF\nHH,INF\n"


def test_probe_hh_is_maximum_and_reproducible(tmp_path):
    _astronaut_ppm(tmp_path / "a.ppm")
    outs = []
    for name in ("o1", "o2"):
        assert run(["probe-subbands", "--image", str(tmp_path / "a.ppm"), "--amplitude", "0.1",
                    "--seed", "3", "--out", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    rows = dict(line.split(",") for line in (outs[0] / "psnr.csv").read_text().splitlines()[1:])
    vals = {b: float(v) for b, v in rows.items()}
    assert vals["HH"] >= max(vals.values()) - 1e-9
    for f in sorted(p.name for p in outs[0].iterdir() if p.name != "manifest.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_unknown_flag_exits_1(capsys):
    assert run(["eval", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command_exits_1():
    assert run(["frobnicate"]) == 1


def test_missing_config_exits_1(tmp_path):
    assert run(["train-clean", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "o")]) == 1


def test_corrupt_checkpoint_exits_1(workspace, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nonsense")
    assert _run(workspace, "eval", "--checkpoint", str(bad), "--out", str(tmp_path / "o")) == 1


def test_unwritable_out_exits_2(workspace, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert _run(workspace, "train-clean", "--out", str(blocker / "sub")) == 2


def test_make_standin_small(tmp_path):
    assert run(["make-standin", "--n-train", "20", "--n-test", "10", "--out", str(tmp_path)]) == 0
    assert len(dataio.load_cifar10_binary(tmp_path / "data_batch_1.bin")) == 20
    assert len(dataio.load_cifar10_binary(tmp_path / "test_batch.bin")) == 10
