"""Config parsing/validation and end-to-end CLI runs at tiny scale."""

import os

import numpy as np
import pytest

from cdnz.checkpoint import load_checkpoint
from cdnz.cli import main
from cdnz.config import ConfigError, ExperimentConfig
from cdnz.data import read_ppm, write_ppm


# ---------------------------------------------------------------------------
# config


def test_config_defaults_valid():
    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.get("experiment", "task") == "none"
    assert cfg.get("training", "batch_size") == 16
    assert cfg.get("training", "patch_size") == 48


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(
        "[experiment]\ntask = classification\nsigma = 30\nlambda = 0.25\nseed = 7\n"
        "[training]\nbatch_size = 4\ntotal_iters = 10\n")
    cfg = ExperimentConfig.from_file(path)
    assert cfg.get("experiment", "task") == "classification"
    assert cfg.get("experiment", "sigma") == 30.0
    assert cfg.get("experiment", "lambda") == 0.25
    assert cfg.get("training", "batch_size") == 4
    out = tmp_path / "resolved.ini"
    cfg.save(out)
    cfg2 = ExperimentConfig.from_file(out)
    assert cfg2.values == cfg.values


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[experiment]\nfrobnicate = 1\n")
    with pytest.raises(ConfigError, match="frobnicate"):
        ExperimentConfig.from_file(path)
    path.write_text("[wat]\nx = 1\n")
    with pytest.raises(ConfigError, match="wat"):
        ExperimentConfig.from_file(path)


def test_config_rejects_bad_values(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[experiment]\nsigma = fast\n")
    with pytest.raises(ConfigError, match="sigma"):
        ExperimentConfig.from_file(path)
    path.write_text("[experiment]\nlambda = -1\n")
    with pytest.raises(ConfigError, match="lambda"):
        ExperimentConfig.from_file(path)
    path.write_text("[training]\nmomentum = 0.9\n")
    with pytest.raises(ConfigError, match="reserved"):
        ExperimentConfig.from_file(path)


# ---------------------------------------------------------------------------
# CLI plumbing


@pytest.fixture(scope="module")
def denoise_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("toydata")
    rc = main(["gen-data", "--kind", "denoise", "--count", "8", "--seed", "1",
               "--image-size", "48", "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def cls_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("clsdata")
    rc = main(["gen-data", "--kind", "classification", "--count", "24", "--seed", "2",
               "--image-size", "16", "--out", str(out)])
    assert rc == 0
    return out


def _write(path, text):
    path.write_text(text)
    return str(path)


def test_gen_data_writes_manifests(denoise_data):
    assert os.path.exists(denoise_data / "train.manifest")
    assert os.path.exists(denoise_data / "test.manifest")
    img = read_ppm(denoise_data / "train_00000.ppm")
    assert img.shape == (3, 48, 48)


def test_gen_data_segmentation_masks(tmp_path):
    rc = main(["gen-data", "--kind", "segmentation", "--count", "12", "--seed", "3",
               "--image-size", "16", "--out", str(tmp_path)])
    assert rc == 0
    from cdnz.data import read_pgm

    mask = read_pgm(tmp_path / "train_00000_mask.pgm")
    assert mask.shape == (16, 16)
    assert set(np.unique(mask)) <= {0, 1, 2}


def test_train_denoiser_cli_and_rerun_identical(denoise_data, tmp_path):
    cfgp = _write(tmp_path / "exp.ini", f"""
[experiment]
sigma = 25
seed = 3
[denoiser]
scales = 2
[training]
batch_size = 2
patch_size = 16
total_iters = 25
decay_every = 20
lr0 = 0.001
bn_freeze_frac = 0.6
bn_recal_batches = 4
[data]
train_manifest = {denoise_data}/train.manifest
""")
    out1 = tmp_path / "run1"
    out2 = tmp_path / "run2"
    assert main(["train-denoiser", "--config", cfgp, "--out", str(out1),
                 "--deterministic"]) == 0
    assert main(["train-denoiser", "--config", cfgp, "--out", str(out2),
                 "--deterministic"]) == 0
    b1 = (out1 / "denoiser.cdnz").read_bytes()
    b2 = (out2 / "denoiser.cdnz").read_bytes()
    assert b1 == b2
    assert (out1 / "log.txt").read_bytes() == (out2 / "log.txt").read_bytes()
    assert (out1 / "resolved.ini").exists()
    _arrays, meta = load_checkpoint(out1 / "denoiser.cdnz")
    assert meta["sigma"] == "25"


def test_invalid_config_key_exit_2(tmp_path):
    cfgp = _write(tmp_path / "bad.ini", "[training]\nbatch_sizes = 4\n")
    assert main(["train-denoiser", "--config", cfgp]) == 2


def test_missing_manifest_exit_4(tmp_path):
    cfgp = _write(tmp_path / "c.ini",
                  "[data]\ntrain_manifest = /nonexistent/x.manifest\n")
    assert main(["train-denoiser", "--config", cfgp, "--out", str(tmp_path / "o")]) == 4


def test_pretrain_head_cli(cls_data, tmp_path):
    cfgp = _write(tmp_path / "h.ini", f"""
[experiment]
task = classification
seed = 4
[training]
batch_size = 4
patch_size = 16
total_iters = 30
decay_every = 25
lr0 = 0.02
pretrain_target = 0.0
[data]
train_manifest = {cls_data}/train.manifest
test_manifest = {cls_data}/test.manifest
""")
    out = tmp_path / "head"
    assert main(["pretrain-head", "--config", cfgp, "--out", str(out)]) == 0
    arrays, meta = load_checkpoint(out / "head.cdnz")
    assert meta["kind"] == "classification"
    assert "pretrain_metric" in meta
    assert any(name == "head.channel_means" for name in arrays)


def test_cascade_cli_and_task_mismatch(cls_data, denoise_data, tmp_path):
    headcfg = _write(tmp_path / "h.ini", f"""
[experiment]
task = classification
seed = 5
[training]
batch_size = 4
patch_size = 16
total_iters = 30
decay_every = 25
lr0 = 0.02
pretrain_target = 0.0
[data]
train_manifest = {cls_data}/train.manifest
test_manifest = {cls_data}/test.manifest
""")
    headdir = tmp_path / "head"
    assert main(["pretrain-head", "--config", headcfg, "--out", str(headdir)]) == 0

    cascfg = _write(tmp_path / "c.ini", f"""
[experiment]
task = classification
sigma = 30
lambda = 0.25
seed = 5
[denoiser]
scales = 2
[training]
batch_size = 2
patch_size = 16
total_iters = 10
decay_every = 10
lr0 = 0.001
[data]
train_manifest = {cls_data}/train.manifest
test_manifest = {cls_data}/test.manifest
[paths]
head_checkpoint = {headdir}/head.cdnz
""")
    casdir = tmp_path / "cas"
    assert main(["train-cascade", "--config", cascfg, "--out", str(casdir)]) == 0
    _arrays, meta = load_checkpoint(casdir / "cascade_denoiser.cdnz")
    assert meta["task"] == "classification" and meta["lambda"] == "0.25"

    # segmentation config + classification head checkpoint -> exit 3
    segcfg = cascfg.replace("task = classification", "task = segmentation")
    segp = _write(tmp_path / "seg.ini",
                  (tmp_path / "c.ini").read_text().replace(
                      "task = classification", "task = segmentation"))
    assert main(["train-cascade", "--config", segp, "--out", str(tmp_path / "x")]) == 3

    # evaluate: joint variant with the cascade checkpoint
    evalcfg = _write(tmp_path / "e.ini", (tmp_path / "c.ini").read_text() +
                     f"denoiser_checkpoint = {casdir}/cascade_denoiser.cdnz\n")
    evaldir = tmp_path / "eval"
    assert main(["evaluate", "--config", evalcfg, "--variant", "joint",
                 "--out", str(evaldir)]) == 0
    report = (evaldir / "report.txt").read_text()
    assert "joint\t30\ttop1\t" in report
    # separate variant must reject the task-trained checkpoint
    assert main(["evaluate", "--config", evalcfg, "--variant", "separate",
                 "--out", str(tmp_path / "e2")]) == 3
    # vgg variant needs no denoiser
    assert main(["evaluate", "--config", evalcfg, "--variant", "vgg",
                 "--out", str(evaldir)]) == 0


def test_denoise_cli_arbitrary_size(denoise_data, tmp_path):
    cfgp = _write(tmp_path / "exp.ini", f"""
[experiment]
sigma = 25
seed = 6
[denoiser]
scales = 2
[training]
batch_size = 1
patch_size = 16
total_iters = 4
decay_every = 4
lr0 = 0.001
bn_freeze_frac = 1.0
[data]
train_manifest = {denoise_data}/train.manifest
""")
    outdir = tmp_path / "train"
    assert main(["train-denoiser", "--config", cfgp, "--out", str(outdir)]) == 0

    rng = np.random.default_rng(0)
    img = rng.random((3, 50, 46)).astype(np.float32)
    inp = tmp_path / "in.ppm"
    write_ppm(img, inp)
    outp = tmp_path / "out.ppm"
    assert main(["denoise", "--checkpoint", str(outdir / "denoiser.cdnz"),
                 "--in", str(inp), "--out", str(outp)]) == 0
    res = read_ppm(outp)
    assert res.shape == (3, 50, 46)
    assert main(["denoise", "--checkpoint", str(outdir / "denoiser.cdnz"),
                 "--in", str(tmp_path / "nope.ppm"), "--out", str(outp)]) == 4
