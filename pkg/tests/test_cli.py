import csv

import pytest

from conftest import smooth_images, two_texture_image
from deepmrf.cli import read_kv, run
from deepmrf.tasks import read_image, write_image

FAST_TRAIN = ["--patch-size", "8", "--batch-size", "2", "--epochs", "1", "--steps-per-epoch", "3",
              "--d", "4", "--K", "2"]


@pytest.fixture(scope="module")
def texture_ckpt(tmp_path_factory):
    root = tmp_path_factory.mktemp("tex")
    write_image(root / "tex.pgm", two_texture_image(32))
    out = root / "m.ckpt"
    assert run(["train-texture", "--input", str(root / "tex.pgm"), "--out", str(out)] + FAST_TRAIN) == 0
    return out


@pytest.fixture(scope="module")
def sr_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sr")
    (root / "hr").mkdir()
    for i, img in enumerate(smooth_images(3, size=24, seed=1)):
        write_image(root / "hr" / f"im{i}.pgm", img)
    assert run(["make-sr-data", "--input", str(root / "hr"), "--factor", "2", "--out", str(root / "data")]) == 0
    ck = root / "sr.ckpt"
    assert run(["train-sr", "--data", str(root / "data"), "--out", str(ck), "--d", "4",
                "--patch-size", "8", "--batch-size", "2", "--epochs", "1", "--steps-per-epoch", "3"]) == 0
    return root


def test_train_texture_manifest(texture_ckpt):
    kv = read_kv(str(texture_ckpt) + ".manifest")
    assert kv["subcommand"] == "train-texture" and kv["patch_size"] == "8"
    assert "version.deepmrf" in kv


def test_synth_deterministic(texture_ckpt, tmp_path):
    a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
    for out in (a, b):
        assert run(["synth", "--ckpt", str(texture_ckpt), "--size", "12x10", "--seed", "7",
                    "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert read_image(a).shape == (12, 10, 1)
    assert (tmp_path / "a.pgm.seed.txt").read_text() == "seed=7\n"


def test_manifest_replay_synth(texture_ckpt, tmp_path):
    out = tmp_path / "s.pgm"
    assert run(["synth", "--ckpt", str(texture_ckpt), "--size", "8x8", "--seed", "3", "--out", str(out)]) == 0
    first = out.read_bytes()
    out.unlink()
    assert run(["--config", str(out) + ".manifest"]) == 0
    assert out.read_bytes() == first


def test_make_sr_data_layout(sr_dir):
    data = sr_dir / "data"
    rows = list(csv.DictReader(open(data / "index.csv")))
    assert [r["name"] for r in rows] == ["im0", "im1", "im2"]
    assert read_image(data / "im0_lr.pgm").shape == (12, 12, 1)
    assert read_image(data / "im0_up.pgm").shape == (24, 24, 1)


def test_sr_and_eval(sr_dir, tmp_path):
    out = tmp_path / "up.pgm"
    assert run(["sr", "--ckpt", str(sr_dir / "sr.ckpt"), "--input", str(sr_dir / "data" / "im0_lr.pgm"),
                "--out", str(out)]) == 0
    assert read_image(out).shape == (24, 24, 1)
    csv_path = tmp_path / "p.csv"
    assert run(["eval-psnr", "--hires", str(sr_dir / "hr"), "--factor", "2", "--ckpt",
                str(sr_dir / "sr.ckpt"), "--csv", str(csv_path)]) == 0
    rows = list(csv.DictReader(open(csv_path)))
    assert {r["method"] for r in rows} == {"bicubic", "dmrf"}
    assert list(rows[0]) == ["image", "factor", "method", "psnr_db"]
    pair = tmp_path / "pair.csv"
    assert run(["eval-psnr", "--ref", str(out), "--test", str(out), "--csv", str(pair)]) == 0
    assert list(csv.DictReader(open(pair)))[0]["psnr_db"] == "inf"


def test_sr_factor_mismatch_is_data_error(sr_dir, tmp_path):
    code = run(["sr", "--ckpt", str(sr_dir / "sr.ckpt"), "--input", str(sr_dir / "data" / "im0_lr.pgm"),
                "--factor", "3", "--out", str(tmp_path / "x.pgm")])
    assert code == 1


def test_diagnose_gradcheck(tmp_path):
    assert run(["diagnose", "gradcheck", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "summary.txt").read_text().count("[PASS]") == 4


def test_diagnose_manifest_replay(tmp_path):
    assert run(["diagnose", "map-opt", "--trials", "20", "--out-dir", str(tmp_path / "a")]) == 0
    first = (tmp_path / "a" / "summary.txt").read_text()
    (tmp_path / "a" / "summary.txt").unlink()
    assert run(["--config", str(tmp_path / "a" / "run.manifest")]) == 0
    assert (tmp_path / "a" / "summary.txt").read_text() == first


def test_missing_checkpoint_is_usage_error(tmp_path):
    assert run(["synth", "--ckpt", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "o.pgm")]) == 2


def test_corrupt_checkpoint_is_data_error(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage!" * 10)
    assert run(["synth", "--ckpt", str(bad), "--out", str(tmp_path / "o.pgm")]) == 1


def test_unknown_config_key(tmp_path, texture_ckpt):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"ckpt={texture_ckpt}\nout={tmp_path / 'o.pgm'}\nbogus=1\n")
    assert run(["synth", "--config", str(cfg)]) == 2


def test_config_then_flag_override(tmp_path, texture_ckpt):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"ckpt={texture_ckpt}\nout={tmp_path / 'o.pgm'}\nsize=6x6\n")
    assert run(["synth", "--config", str(cfg), "--size", "4x5"]) == 0
    assert read_image(tmp_path / "o.pgm").shape == (4, 5, 1)


def test_no_subcommand_is_usage_error():
    assert run([]) == 2
    assert run(["bogus"]) == 2
