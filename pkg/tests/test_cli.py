"""End-to-end CLI runs on a tiny 32x32 setup; each command goes through ``main``."""

import json
import subprocess
import sys

import numpy as np
import pytest

from genmark.cli import main
from genmark.registry import Registry
from genmark.synthesis import SynthesisRun

SMALL = {
    "resolution": 32,
    "corpus_size": 80,
    "synth_steps": 20,
    "pretrain": {"steps": 4, "batch_size": 8, "val_every": 2, "latent_dim": 16},
    "proxy": {"sample_steps": 6, "batch_size": 8},
    "finetune": {"images_per_prompt": 3, "epochs": 1, "batch_size": 8},
    "evaluation": {"known_count": 4, "per_prompt_known": 2, "per_prompt_heldout": 3, "alternate_steps": 10},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL))
    reg = root / "reg"
    common = ["--config", cfg, "--registry", reg]
    assert run("subjects", *common, "--out", root / "data", "--n-subjects", 2, "--n-images", 6) == 0
    assert run("pretrain", *common) == 0
    return {"root": root, "reg": reg, "common": common, "data": root / "data"}


@pytest.fixture(scope="module")
def subject(env):
    """One subject taken through watermark, synth (both kinds) and finetune."""
    c = env["common"]
    sid = json.loads((env["data"] / "manifest.json").read_text())["entries"][0]["subject_id"]
    assert run("watermark", *c, "--data", env["data"], "--subject-id", sid) == 0
    for kind in ("clean", "watermarked"):
        assert run("synth", *c, "--subject-id", sid, "--kind", kind) == 0
    gen = Registry(env["reg"]).artifact("pretrain")["generator"]
    before = open(gen, "rb").read()
    assert run("finetune", *c, "--subject-id", sid) == 0
    assert open(gen, "rb").read() == before
    return sid


def test_help_and_version(capsys):
    assert main(["--help"]) == 0
    assert "pretrain" in capsys.readouterr().out
    assert main(["--version"]) == 0


@pytest.mark.parametrize("argv", [[], ["nope"], ["pretrain", "--steps", "x"], ["pretrain", "--set", "bogus=1"]])
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_missing_prerequisites_exit_2(tmp_path, env):
    assert run("synth", "--registry", tmp_path, "--subject-id", "ghost", "--kind", "clean") == 2
    assert run("watermark", "--registry", tmp_path, "--data", env["data"], "--subject-id", "x") == 2
    assert run("finetune", "--registry", tmp_path, "--subject-id", "x") == 2


def test_pretrain_writes_complete_outputs(env):
    out = env["reg"] / "pretrain"
    for name in ("generator.safetensors", "detector.safetensors", "training_log.csv", "config.json"):
        assert (out / name).is_file()
    assert not list(out.glob("*.tmp"))
    assert json.loads((out / "config.json").read_text())["pretrain"]["steps"] == 4


def test_unwritable_output_leaves_no_checkpoint(tmp_path, env):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    code = run("pretrain", "--config", env["root"] / "config.json", "--registry", tmp_path / "r",
               "--out", blocker / "sub")
    assert code == 2
    assert not list(tmp_path.rglob("*.safetensors"))


def test_watermark_reuses_latent_unless_forced(env, subject):
    c, reg = env["common"], Registry(env["reg"])
    first = reg.get(subject)["latent_seed"]
    wm = sorted((reg.subject_dir(subject) / "watermarked").rglob("*.png"))[0].read_bytes()
    assert run("watermark", *c, "--data", env["data"], "--subject-id", subject, "--latent-seed", 123) == 0
    assert reg.get(subject)["latent_seed"] == first
    assert sorted((reg.subject_dir(subject) / "watermarked").rglob("*.png"))[0].read_bytes() == wm
    other = json.loads((env["data"] / "manifest.json").read_text())["entries"][-1]["subject_id"]
    assert run("watermark", *c, "--data", env["data"], "--subject-id", other, "--latent-seed", 5) == 0
    assert run("watermark", *c, "--data", env["data"], "--subject-id", other, "--latent-seed", 6, "--force") == 0
    assert reg.get(other)["latent_seed"] == 6
    assert [h["latent_seed"] for h in reg.history(other)] == [5, 6]


def test_synth_runs_are_registered_and_reused(env, subject, capsys):
    reg = Registry(env["reg"])
    runs = reg.get(subject)["runs"]
    assert sorted(r["kind"] for r in runs.values()) == ["clean", "watermarked"]
    for r in runs.values():
        loaded = SynthesisRun.load(r["dir"])
        assert loaded.checksum == r["checksum"] and len(loaded) == 4 * 3
        assert max(p.seed for p in loaded.provenance) < 10 ** 6
    capsys.readouterr()
    assert run("synth", *env["common"], "--subject-id", subject, "--kind", "clean") == 0
    assert json.loads(capsys.readouterr().out)["reused"] is True


def test_finetuned_detector_is_recorded(env, subject):
    entry = Registry(env["reg"]).get(subject)
    assert entry["detector_checkpoint"].endswith("detector.ckpt")
    assert entry["finetune"]["subject_id"] == subject


def test_evaluate_report_embeds_config_and_seeds(env, subject, tmp_path):
    out = tmp_path / "ev"
    code = run("evaluate", *env["common"], "--subject-id", subject, "--scenarios", "1,4", "--out", out,
               "--seed", 7)
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["seeds"] == [7]
    assert rep["config"]["resolution"] == 32 and rep["config"]["sources"]["seed"] == "flag"
    assert set(rep["scenarios"]) == {"1", "4"}
    assert all(v["overlap"] == 0 for v in rep["seed_audit"].values())
    assert (out / "scenarios.csv").is_file()


def test_countermeasure_and_report_merge(env, subject, tmp_path, capsys):
    c = env["common"]
    assert run("countermeasure", *c, "--subject-id", subject, "--kind", "forgery", "--out", tmp_path / "f") == 0
    assert run("countermeasure", *c, "--subject-id", subject, "--kind", "jpeg", "--param", 50,
               "--side", "output", "--out", tmp_path / "j") == 0
    assert run("countermeasure", *c, "--subject-id", subject, "--kind", "jpeg", "--param", 50.5,
               "--out", tmp_path / "bad") == 1
    cells = (tmp_path / "j" / "countermeasure_cells.csv").read_text().splitlines()
    assert cells[0] == "subject_id,kind,param,side,accuracy" and len(cells) == 2
    capsys.readouterr()
    assert run("report", tmp_path / "f", tmp_path / "j", "--out", tmp_path / "m") == 0
    merged = json.loads((tmp_path / "m" / "report.json").read_text())
    assert any(k.startswith("jpeg_output") for k in merged["countermeasures"])
    assert any(k.startswith("forgery") for k in merged["countermeasures"])
    assert "# countermeasures" in capsys.readouterr().out


def test_console_entry_point(env):
    res = subprocess.run([sys.executable, "-m", "genmark.cli", "report", str(env["root"] / "missing")],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "missing report" in res.stderr


def test_subjects_folder_roundtrip(env):
    from genmark.imagery import load_image_folder
    from PIL import Image
    with Image.open(next(env["data"].rglob("*.png"))) as im:
        assert im.size == (32, 32)
    groups = load_image_folder(env["data"], resolution=32)
    assert len(groups) == 2 and all(g.images.shape == (6, 32, 32, 3) for g in groups)
    assert np.all((groups[0].images >= 0) & (groups[0].images <= 1))
