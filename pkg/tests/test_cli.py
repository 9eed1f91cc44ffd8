import csv
import json

import numpy as np
import pytest
from PIL import Image

from glff.cli import main
from glff.imaging import save_image
from glff.model import GLFF, GLFFConfig, save_checkpoint
from glff.toydata import toy_image

from conftest import TOY_FAKE, TOY_REAL

TOY_TRAIN = ["--real-dir", str(TOY_REAL), "--fake-dir", str(TOY_FAKE), "--toy", "--batch-size", "4"]


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "m.pt"
    assert main(["train", *TOY_TRAIN, "--steps", "2", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    from glff.manifest import build_manifest

    path = tmp_path_factory.mktemp("manifest") / "m.jsonl"
    build_manifest([(TOY_REAL, 0, "real", "unprocessed"), (TOY_FAKE, 1, "toy", "unprocessed")], path)
    return path


def log_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_train_writes_checkpoint_and_log(ckpt):
    assert ckpt.is_file()
    assert [r["step"] for r in log_rows(f"{ckpt}.log.csv")] == ["1", "2"]


def test_train_missing_dir(tmp_path, capsys):
    code = main(["train", "--real-dir", str(tmp_path / "nope"), "--fake-dir", str(TOY_FAKE),
                 "--out", str(tmp_path / "m.pt")])
    assert code == 2 and "--real-dir" in capsys.readouterr().err


def test_train_resume_continues_steps(tmp_path):
    out = tmp_path / "m.pt"
    assert main(["train", *TOY_TRAIN, "--steps", "1", "--out", str(out)]) == 0
    assert main(["train", *TOY_TRAIN, "--steps", "3", "--out", str(out), "--resume", str(out)]) == 0
    assert [r["step"] for r in log_rows(f"{out}.log.csv")] == ["1", "2", "3"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("max_steps: 1\nbatch_size: 2\nseed: 3\n")
    out = tmp_path / "m.pt"
    assert main(["train", *TOY_TRAIN, "--config", str(cfg), "--steps", "2", "--out", str(out)]) == 0
    assert len(log_rows(f"{out}.log.csv")) == 2


def test_unknown_subcommand():
    assert main(["serve"]) == 2


def test_eval_outputs_and_rerun(ckpt, manifest, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", str(manifest), "--out-dir", str(a)]) == 0
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", str(manifest), "--out-dir", str(b)]) == 0
    header = (a / "metrics.csv").read_text().splitlines()[0]
    assert header == "protocol,generator,n_pos,n_neg,oa,auc"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "report.txt").is_file() and any((a / "roc").iterdir())


def test_eval_all_reals_manifest(ckpt, tmp_path, capsys):
    from glff.manifest import build_manifest

    m = tmp_path / "m.jsonl"
    build_manifest([(TOY_REAL, 0, "real", "unprocessed")], m)
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", str(m), "--out-dir", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err


def test_process_common_is_seeded(tmp_path):
    for name in ("a", "b"):
        assert main(["process", "--protocol", "common", "--in-dir", str(TOY_FAKE),
                     "--out-dir", str(tmp_path / name), "--seed", "7"]) == 0
    a = (tmp_path / "a" / "manifest.jsonl").read_text()
    assert a == (tmp_path / "b" / "manifest.jsonl").read_text()
    assert len(a.splitlines()) == 16


def test_process_unknown_protocol(tmp_path, capsys):
    code = main(["process", "--protocol", "blend", "--in-dir", str(TOY_FAKE), "--out-dir", str(tmp_path)])
    assert code == 2 and "--protocol" in capsys.readouterr().err


def test_process_antiforensics_needs_ckpt(tmp_path, capsys):
    code = main(["process", "--protocol", "antiforensics", "--in-dir", str(TOY_FAKE), "--out-dir", str(tmp_path)])
    assert code == 2 and "--ckpt" in capsys.readouterr().err


def test_multicompress_fifty_images(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(50):
        save_image(tmp_path / "in" / f"{i:02d}.png", toy_image(rng, 32))
    assert main(["process", "--protocol", "multicompress", "--in-dir", str(tmp_path / "in"),
                 "--out-dir", str(tmp_path / "out"), "--group-size", "16"]) == 0
    lines = (tmp_path / "out" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 50
    assert all(json.loads(line)["protocol"] == "multicompress" for line in lines)


def test_bad_encoder_path(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GLFF_ENCODER", str(tmp_path / "no-ffmpeg"))
    code = main(["process", "--protocol", "multicompress", "--in-dir", str(TOY_FAKE),
                 "--out-dir", str(tmp_path / "out")])
    assert code == 2 and "GLFF_ENCODER" in capsys.readouterr().err


def test_visualize_full_size(tmp_path):
    cfg = GLFFConfig()
    cfg.backbone.pretrained = False
    save_checkpoint(tmp_path / "full.pt", GLFF(cfg))
    img = tmp_path / "img.png"
    save_image(img, toy_image(np.random.default_rng(1), 256))
    for name in ("a", "b"):
        assert main(["visualize", "--ckpt", str(tmp_path / "full.pt"), "--image", str(img),
                     "--out", str(tmp_path / name)]) == 0
    rects = json.loads((tmp_path / "a" / "proposals.json").read_text())
    assert len(rects) == 6 and [r["scale"] for r in rects] == [0, 0, 0, 1, 1, 1]
    assert Image.open(tmp_path / "a" / "heatmap.png").size == (224, 224)
    for f in ("heatmap.png", "overlay.png", "proposals.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_ablate_unknown_variant(tmp_path, capsys):
    code = main(["ablate", *TOY_TRAIN, "--variant", "no_such", "--out-dir", str(tmp_path)])
    assert code == 2 and capsys.readouterr().err


@pytest.mark.parametrize("variant,check", [
    ("no_amsff", lambda c: c["amsff_calls"] == 0 and c["psm"] > 0),
    ("no_psm", lambda c: c["psm"] == 0 and c["random_patches"] > 0),
    ("stage:2,4", lambda c: c["amsff_calls"] > 0),
    ("windows:3x3:2@64,2x2:2@64", lambda c: c["psm"] > 0),
])
def test_ablate_variants(variant, check, tmp_path):
    assert main(["ablate", *TOY_TRAIN, "--steps", "1", "--variant", variant, "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").is_file()
    assert check(json.loads((tmp_path / "counters.json").read_text()))
