import json

import pytest

from kedit_lab import cli, meme, model
from kedit_lab.synthworld import Vocab, read_world

TINY = {
    "world": {"n_entities": 48, "train_fraction": 0.25},
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 16, "lora_rank": 2},
    "pretrain": {"max_epochs": 1, "eval_every": 1},
    "editor": {"lora_rank": 2, "edit_steps": 1},
}


@pytest.fixture
def rundir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_DIR_ENV, str(tmp_path))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    return tmp_path, str(cfg)


def test_bad_flags_are_usage_errors(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["run", "--strategy", "nope"])
    assert ei.value.code == 2


def test_run_before_pretrain_names_the_missing_file(rundir, capsys):
    root, cfg = rundir
    assert cli.main(["--config", cfg, "gen-data", "--edits", "20"]) == 0
    assert cli.main(["--config", cfg, "run", "--strategy", "internal_dual_lora"]) == 3
    err = capsys.readouterr().err
    assert "model.npz" in err and "pretrain" in err


def test_unknown_config_key(rundir, capsys):
    root, _ = rundir
    bad = root / "bad.json"
    bad.write_text(json.dumps({"editor": {"learning_rate": 1}}))
    assert cli.main(["--config", str(bad), "gen-data"]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_pretrain_cap_reports_failure(rundir, capsys):
    root, cfg = rundir
    cli.main(["--config", cfg, "gen-data", "--edits", "20"])
    assert cli.main(["--config", cfg, "pretrain"]) == 1
    assert "epoch cap" in capsys.readouterr().err


def _fake_artifacts(rd):
    kb = read_world(rd / "world.json")
    vocab = Vocab.for_world(kb)
    shape = TINY["model"]
    w = model.init_model(model.ModelConfig(vocab.n_text, vocab.n_image, **shape)).freeze()
    model.save_model(rd / "model.npz", w)
    meme.save_encoders(rd / "encoders.npz", meme.EncoderParams.init(vocab, 8, 0))


def test_run_and_report_end_to_end(rundir, capsys):
    root, cfg = rundir
    rd = root / "default"
    assert cli.main(["--config", cfg, "gen-data", "--edits", "20"]) == 0
    _fake_artifacts(rd)
    for s in ("external_only", "internal_single_lora"):
        assert cli.main(["--config", cfg, "run", "--strategy", s, "--gaps", "0,4,10"]) == 0
    capsys.readouterr()
    first = (rd / "report_external_only.csv").read_text()
    assert cli.main(["--config", cfg, "run", "--strategy", "external_only", "--gaps", "0,4,10"]) == 0
    assert (rd / "report_external_only.csv").read_text() == first
    man = json.loads((rd / "run_manifest_external_only.json").read_text())
    assert man["config"]["gap_schedule"] == [0, 4, 10] and man["tau"] == meme.DEFAULT_TAU
    out = root / "cmp.csv"
    assert cli.main(["report", "--compare", "external_only,internal_single_lora", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# kedit-report")
    body = [l.split(",")[:2] for l in lines[2:]]
    assert body == [[s, g] for s in ("external_only", "internal_single_lora") for g in ("0", "4", "10", "avg")]


def test_selftest_exits_zero(capsys):
    assert cli.main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out
