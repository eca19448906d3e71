import csv
import json
import shutil

import numpy as np
import pytest

from bsldm.cli import main
from bsldm.data_pipeline import read_manifest, read_processed, write_png16

TINY = [
    "data.size=16", "data.clahe=off", "data.normalization=fixed",
    "compressor.r=4", "compressor.hidden_channels=8,8,8", "compressor.codebook_size=32",
    "compressor.disc_layers=2", "compressor.disc_channels=8", "compressor.perceptual=random-conv",
    "compressor.batch_size=16", "compressor.adv_warmup_steps=2",
    "estimator.base_channels=8", "estimator.channel_mult=1", "estimator.attention_resolutions=",
    "estimator.num_res_blocks=1", "estimator.time_embed_dim=16", "estimator.latent_size=4",
    "estimator.batch_size=16", "schedule.T=10", "evaluate.extractor=random-conv",
]


def run(out, *args, extra_sets=()):
    argv = ["--output-dir", str(out)]
    for s in list(TINY) + list(extra_sets):
        argv += ["--set", s]
    return main(argv + list(args))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(out, "prepare", "--synthetic", "40") == 0
    assert run(out, "train", "--stage", "vqgan", "--epochs", "1") == 0
    assert run(out, "train", "--stage", "ldm", "--epochs", "1") == 0
    return out


def test_prepare_synthetic_split_and_rerun(tmp_path, capsys):
    assert run(tmp_path, "prepare", "--synthetic", "500") == 0
    rows = read_manifest(tmp_path / "data" / "manifest.csv")
    counts = [sum(r["split"] == s for r in rows) for s in ("train", "val", "test")]
    assert counts == [400, 50, 50]
    img = read_processed(tmp_path / "data" / rows[0]["cxr"])
    assert img.shape == (16, 16) and img.min() >= -1 and img.max() <= 1
    capsys.readouterr()
    assert run(tmp_path, "prepare", "--synthetic", "500") == 0
    assert "up to date" in capsys.readouterr().out
    # different preprocessing on an existing dataset needs --force
    assert run(tmp_path, "prepare", "--synthetic", "500", extra_sets=["data.clip_limit=3"]) == 2
    assert run(tmp_path, "prepare", "--synthetic", "500", "--force", extra_sets=["data.clip_limit=3"]) == 0


def test_prepare_raw_directory(tmp_path):
    raw = tmp_path / "raw"
    rng = np.random.default_rng(0)
    for name in ("a", "b", "c", "d", "e"):
        write_png16(raw / "cxr" / f"{name}.png", rng.random((20, 20)), value_range=(0, 1))
        write_png16(raw / "tissue" / f"{name}.png", rng.random((20, 20)) * 0.5, value_range=(0, 1))
    (tmp_path / "bl.txt").write_text("# excluded\nc\n")
    out = tmp_path / "out"
    assert run(out, "prepare", "--raw-dir", str(raw), extra_sets=[f"data.blacklist={tmp_path / 'bl.txt'}"]) == 0
    ids = sorted(r["id"] for r in read_manifest(out / "data" / "manifest.csv"))
    assert ids == ["a", "b", "d", "e"]


def test_prepare_missing_tissue_dir_fails(tmp_path, capsys):
    (tmp_path / "raw" / "cxr").mkdir(parents=True)
    assert run(tmp_path / "out", "prepare", "--raw-dir", str(tmp_path / "raw")) != 0
    assert "tissue" in capsys.readouterr().err


def test_ldm_stage_requires_compressor(tmp_path, capsys):
    assert run(tmp_path, "prepare", "--synthetic", "20") == 0
    assert run(tmp_path, "train", "--stage", "ldm") == 2
    assert "vqgan" in capsys.readouterr().err


def test_sample_requires_checkpoints(tmp_path):
    assert run(tmp_path, "prepare", "--synthetic", "20") == 0
    assert run(tmp_path, "sample", "--split", "test", "--output", str(tmp_path / "p")) == 2


def test_training_resume_appends_log(trained):
    log = trained / "logs" / "ldm.csv"
    before = log.read_text().strip().splitlines()
    assert run(trained, "train", "--stage", "ldm", "--epochs", "2") == 0
    after = log.read_text().strip().splitlines()
    assert after[:len(before)] == before
    assert len(after) == len(before) + 1
    assert after[-1].startswith("2,")
    vq_rows = list(csv.DictReader(open(trained / "logs" / "vqgan.csv")))
    assert set(vq_rows[0]) >= {"l1", "perceptual", "adversarial", "quantization", "total"}


def test_sample_trace_and_determinism(trained, tmp_path):
    rows = [r for r in read_manifest(trained / "data" / "manifest.csv") if r["split"] == "test"][:3]
    inputs = [str(trained / "data" / r["cxr"]) for r in rows]
    trace = tmp_path / "trace.csv"
    assert run(trained, "sample", *inputs, "--output", str(tmp_path / "a"), "--trace", str(trace)) == 0
    assert run(trained, "sample", *inputs, "--output", str(tmp_path / "b")) == 0
    for r in rows:
        a = (tmp_path / "a" / f"{r['id']}.png").read_bytes()
        assert a == (tmp_path / "b" / f"{r['id']}.png").read_bytes()
    lines = trace.read_text().strip().splitlines()
    assert len(lines) == 1 + 10  # header + T steps
    assert run(trained, "sample", *inputs, "--output", str(tmp_path / "c"), "--seed", "99") == 0
    assert any((tmp_path / "c" / f"{r['id']}.png").read_bytes() != (tmp_path / "a" / f"{r['id']}.png").read_bytes()
               for r in rows)


def _copy_split(trained, dest, column):
    dest.mkdir()
    for r in read_manifest(trained / "data" / "manifest.csv"):
        if r["split"] == "test":
            shutil.copy(trained / "data" / r[column], dest / f"{r['id']}.png")


def test_evaluate_oracle_and_identity_baseline(trained, tmp_path, capsys):
    _copy_split(trained, tmp_path / "truth", "tissue")
    assert run(trained, "evaluate", "--predictions", str(tmp_path / "truth")) == 0
    out = capsys.readouterr().out
    assert "bsr: 1.000 ± 0.000" in out
    summary = json.loads((tmp_path / "truth" / "summary.json").read_text())
    assert summary["bsr"]["mean"] == 1.0 and summary["mse"]["mean"] == 0.0 and summary["lpips"]["mean"] == 0.0
    per_image = list(csv.DictReader(open(tmp_path / "truth" / "metrics.csv")))
    assert len(per_image) == summary["n"] == 4

    _copy_split(trained, tmp_path / "copy", "cxr")
    assert run(trained, "evaluate", "--predictions", str(tmp_path / "copy")) == 0
    assert json.loads((tmp_path / "copy" / "summary.json").read_text())["bsr"]["mean"] < 0.5


def test_evaluate_reports_mismatch(trained, tmp_path, capsys):
    _copy_split(trained, tmp_path / "p", "tissue")
    next((tmp_path / "p").glob("*.png")).unlink()
    assert run(trained, "evaluate", "--predictions", str(tmp_path / "p")) == 2
    assert "missing predictions" in capsys.readouterr().err


def test_ablate_writes_grid(trained, tmp_path):
    out_csv = tmp_path / "ablation.csv"
    assert run(trained, "ablate", "--epochs", "1", "--output", str(out_csv)) == 0
    rows = list(csv.DictReader(open(out_csv)))
    assert [(r["offset_noise"], r["thresholding"]) for r in rows] == [
        (o, k) for o in ("off", "on") for k in ("none", "static", "dynamic", "temporal")]
    assert all("±" in r["formatted"] for r in rows)
    first = out_csv.read_text()
    assert run(trained, "ablate", "--epochs", "1", "--output", str(out_csv)) == 0
    assert out_csv.read_text() == first


def test_sweep(trained, tmp_path):
    out_csv = tmp_path / "sweep.csv"
    assert run(trained, "ablate", "--epochs", "1", "--sweep", "sampler.omega=0.001,0.003",
               "--output", str(out_csv)) == 0
    rows = list(csv.DictReader(open(out_csv)))
    assert [r["value"] for r in rows] == ["0.001", "0.003"]
    assert run(trained, "ablate", "--sweep", "sampler.bogus=1") == 2


def test_psd_command(tmp_path):
    out_csv = tmp_path / "psd.csv"
    assert run(tmp_path, "psd", "--synthetic", "20", "--bins", "8", "--noise", "20", "--output", str(out_csv)) == 0
    rows = list(csv.DictReader(open(out_csv)))
    assert len(rows) == 8 and set(rows[0]) == {"frequency", "image_power_db", "noise_power_db"}
    assert run(tmp_path, "psd") == 2


def test_bad_override_is_reported(tmp_path, capsys):
    assert main(["--output-dir", str(tmp_path), "--set", "nokey", "prepare", "--synthetic", "4"]) == 2
    assert main(["--output-dir", str(tmp_path), "--set", "data.nokey=1", "prepare", "--synthetic", "4"]) == 1
