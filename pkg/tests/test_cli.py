import json
import re
import shutil

import numpy as np
import pytest

from segcode import cli, synth
from segcode.cli import main
from segcode.ingest import load_manifest, read_frame

ONE_EPOCH = {"phases": [{"epochs": 1, "lr": 1e-3, "freeze": []}], "batch_size": 4, "seed": 0}


@pytest.fixture
def workdir(tmp_path, small_manifest):
    """Private copy of the small dataset plus config and plan files."""
    data = tmp_path / "data"
    shutil.copytree(small_manifest.parent, data)
    (tmp_path / "plan.json").write_text(json.dumps(ONE_EPOCH))
    cfg = {"manifest": "data/manifest.json", "output_dir": "run", "seed": 0,
           "model": {"resolution": 16, "k": 4, "hidden": 4, "stages": [[4, 3, 1], [8, 3, 1]]}}
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    return tmp_path


def test_synth_command(tmp_path, capsys):
    spec = synth.default_spec(resolution=16, frames_per_clip=3, clips_per_class={"train": 1, "test": 1})
    (tmp_path / "spec.json").write_text(json.dumps(spec.to_json()))
    assert main(["synth", str(tmp_path / "spec.json"), str(tmp_path / "out")]) == 0
    path = capsys.readouterr().out.strip()
    assert len(load_manifest(path)) == 8
    assert main(["synth", str(tmp_path / "nope.json"), str(tmp_path / "out")]) == 1


def test_synth_bad_spec_exit_one(tmp_path, capsys):
    (tmp_path / "spec.json").write_text(json.dumps({"classes": [{"name": "a", "categories": ["cup"]}]}))
    assert main(["synth", str(tmp_path / "spec.json"), str(tmp_path / "out")]) == 1
    assert "at least 2 classes" in capsys.readouterr().err


def test_encode_masks_default_idempotent_and_threshold(workdir, capsys):
    man = workdir / "data" / "manifest.json"
    assert main(["encode-masks", str(man)]) == 0
    clip = load_manifest(man).clips[0]
    first = [p.read_bytes() for p in clip.mask_paths]
    assert main(["encode-masks", str(man)]) == 0
    assert [p.read_bytes() for p in load_manifest(man).clips[0].mask_paths] == first
    colors = {tuple(c) for p in clip.mask_paths for c in read_frame(p).pixels.reshape(-1, 3)}
    assert (0, 255, 0) in colors or (255, 255, 255) in colors
    assert main(["encode-masks", str(man), "--threshold", "1.01"]) == 0
    assert all(np.all(read_frame(p).pixels == 0) for p in load_manifest(man).clips[0].mask_paths)


def test_encode_masks_skips_unannotated(workdir, capsys):
    man = workdir / "data" / "manifest.json"
    raw = json.loads(man.read_text())
    raw["clips"][0]["annotations"] = None
    raw["clips"][0].pop("mask_frames")
    man.write_text(json.dumps(raw))
    assert main(["encode-masks", str(man)]) == 0
    assert "has no annotations, skipped" in capsys.readouterr().err
    assert load_manifest(man).clips[0].mask_paths is None


def test_encode_masks_palette_override(workdir):
    pal = workdir / "pal.json"
    pal.write_text(json.dumps({"entries": [{"categories": ["person"], "color": [7, 8, 9], "priority": 0}],
                               "background": [1, 1, 1]}))
    man = workdir / "data" / "manifest.json"
    assert main(["encode-masks", str(man), "--palette", str(pal), "--threshold", "0"]) == 0
    colors = {tuple(c) for p in load_manifest(man).clips[0].mask_paths for c in read_frame(p).pixels.reshape(-1, 3)}
    assert colors <= {(7, 8, 9), (1, 1, 1)}


def test_train_eval_compare(workdir, capsys):
    cfg, plan = str(workdir / "config.json"), str(workdir / "plan.json")
    assert main(["train", "--config", cfg, "--plan", plan]) == 0
    run = workdir / "run"
    log = [json.loads(line) for line in (run / "epochs.jsonl").read_text().splitlines()]
    assert len(log) == 1 and log[0]["eta_mask"] is not None
    ck = json.loads((run / "checkpoint.json").read_text())
    assert ck["config"]["classes"] == ["type", "phone", "read", "drink"]
    capsys.readouterr()

    assert main(["eval", "--config", cfg, "--split", "test"]) == 0
    out = capsys.readouterr().out
    assert re.search(r"accuracy\s+\d+\.\d{3}%", out) and re.search(r"macro F1\s+\d+\.\d{3}%", out)
    res = json.loads((run / "results_test.json").read_text())
    assert len(res["clips"]) == 4 and set(res["clips"][0]) == {"clip_id", "label", "pred", "probs"}
    assert (run / "report_test.txt").is_file()

    (workdir / "alt.json").write_text(json.dumps({**json.loads((workdir / "config.json").read_text()),
                                                  "output_dir": "alt"}))
    assert main(["train", "--config", str(workdir / "alt.json"), "--plan", plan, "--single-stream"]) == 0
    assert main(["eval", "--config", str(workdir / "alt.json")]) == 0
    capsys.readouterr()
    assert main(["compare", str(run / "results_test.json"), str(workdir / "alt" / "results_test.json"),
                 "--out", str(workdir / "cmp.json")]) == 0
    assert "McNemar" in capsys.readouterr().out
    assert json.loads((workdir / "cmp.json").read_text())["num_clips"] == 4


def test_config_errors_exit_one(workdir, capsys):
    bad = json.loads((workdir / "config.json").read_text())
    bad["model"]["resolution"] = 20
    (workdir / "bad.json").write_text(json.dumps(bad))
    assert main(["train", "--config", str(workdir / "bad.json")]) == 1
    assert "supported set" in capsys.readouterr().err
    assert main(["train", "--config", str(workdir / "missing.json")]) == 1
    assert main(["eval", "--config", str(workdir / "config.json"), "--checkpoint", "nope.json"]) == 1
    bad["model"] = {"resolution": 16, "d": 16, "stages": [[4, 3, 1], [8, 3, 1]]}
    (workdir / "bad.json").write_text(json.dumps(bad))
    assert main(["train", "--config", str(workdir / "bad.json")]) == 1


def test_nonfinite_loss_exit_two(workdir, capsys):
    (workdir / "wild.json").write_text(json.dumps({"phases": [{"epochs": 3, "lr": 1e30}], "batch_size": 2}))
    assert main(["train", "--config", str(workdir / "config.json"), "--plan", str(workdir / "wild.json")]) == 2
    assert "non-finite" in capsys.readouterr().err


def test_gradcheck_clean_build(capsys):
    assert main(["gradcheck", "--trials", "1"]) == 0
    out = capsys.readouterr().out
    assert "two-stream model" in out and "FAIL" not in out


def test_unknown_flag_is_an_error(workdir, capsys):
    assert main(["train", "--config", str(workdir / "config.json"), "--epochs", "3"]) == 1
    assert "unrecognized arguments" in capsys.readouterr().err


@pytest.mark.parametrize("sub, flags", [
    ("synth", ["--seed"]),
    ("encode-masks", ["--palette", "--threshold"]),
    ("train", ["--config", "--plan", "--single-stream", "--seed"]),
    ("eval", ["--config", "--checkpoint", "--split", "--seed"]),
    ("compare", ["--out"]),
    ("gradcheck", ["--trials", "--seed"]),
])
def test_help_documents_flags(sub, flags, capsys):
    assert main([sub, "--help"]) == 0
    text = capsys.readouterr().out
    for f in flags:
        assert f in text


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("SEGCODE_THREADS", "1")
    with cli._thread_cap():
        pass
