import json

import pytest

from modalinc.cli import main
from modalinc.evaluation import EvalReport

TINY = {"num_classes": 3, "modalities": ["rgb", "flow", "audio"], "train": 36, "val": 6, "test": 12,
        "latent_dim": 4, "feature_dims": [16, 16, 16], "seq_len": 3, "seed": 1}
MODEL = {"width": 16, "heads": 2, "depth": 1, "num_classes": 3, "adapter_rank": 4, "max_len": 8,
         "epochs": 2, "batch_size": 16}


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(TINY))
    (tmp_path / "c.json").write_text(json.dumps({"model": MODEL}))
    assert main(["generate", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "data")]) == 0
    return tmp_path


def _train(ws, out, *extra):
    return main(["train", "--config", str(ws / "c.json"), "--data", str(ws / "data"), "--out", str(ws / out), *extra])


def test_generate_writes_manifest_and_refuses_overwrite(workspace, capsys):
    assert (workspace / "data" / "manifest.json").exists()
    spec = str(workspace / "spec.json")
    assert main(["generate", "--spec", spec, "--out", str(workspace / "data")]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["generate", "--spec", spec, "--out", str(workspace / "data"), "--force"]) == 0


def test_generate_requires_out(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_generate_invalid_spec(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"num_classes": 1}))
    assert main(["generate", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "d")]) == 2


def test_train_writes_layout_and_report(workspace):
    assert _train(workspace, "runs/h7", "--method", "harmony", "--seed", "7") == 0
    run = workspace / "runs" / "h7"
    report = EvalReport.load(run / "reports" / "eval.json")
    assert [len(r) for r in report.s_matrix] == [1, 2, 3]
    assert report.seed == 7
    for t in (1, 2, 3):
        assert (run / "checkpoints" / f"phase{t}.bin").exists()
        assert (run / "reports" / f"train_phase{t}.json").exists()
    assert (run / "tables" / "s_matrix.csv").exists() and (run / "tables" / "summary.md").exists()


def test_train_unknown_method(workspace, capsys):
    assert _train(workspace, "runs/x", "--method", "nosuch") == 2
    err = capsys.readouterr().err
    assert "seqf" in err and "harmony" in err


def test_train_phase_order(workspace):
    assert _train(workspace, "runs/o", "--method", "seqf", "--phase-order", "audio,rgb,flow") == 0
    report = EvalReport.load(workspace / "runs" / "o" / "reports" / "eval.json")
    assert report.modalities == ["audio", "rgb", "flow"]
    assert (workspace / "runs" / "o" / "tables" / "s_matrix.csv").read_text().splitlines()[0] == "after_phase,audio,rgb,flow"
    assert _train(workspace, "runs/o2", "--phase-order", "audio,sonar,rgb") == 2


def test_train_seed_from_environment(workspace, monkeypatch):
    monkeypatch.setenv("MIL_SEED", "11")
    assert _train(workspace, "runs/env", "--method", "seqf") == 0
    assert EvalReport.load(workspace / "runs" / "env" / "reports" / "eval.json").seed == 11


def test_train_missing_data_is_io_error(workspace):
    assert main(["train", "--config", str(workspace / "c.json"), "--data", str(workspace / "nope"),
                 "--out", str(workspace / "r")]) == 3


def test_train_twice_is_reproducible(workspace):
    assert _train(workspace, "runs/a", "--method", "harmony", "--seed", "3") == 0
    assert _train(workspace, "runs/b", "--method", "harmony", "--seed", "3") == 0
    a = EvalReport.load(workspace / "runs" / "a" / "reports" / "eval.json")
    b = EvalReport.load(workspace / "runs" / "b" / "reports" / "eval.json")
    assert a.content() == b.content()


def test_eval_checkpoint(workspace, capsys):
    assert _train(workspace, "runs/e", "--method", "seqf") == 0
    capsys.readouterr()
    ckpt = workspace / "runs" / "e" / "checkpoints" / "phase3"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(workspace / "data")]) == 0
    result = json.loads(capsys.readouterr().out)
    report = EvalReport.load(workspace / "runs" / "e" / "reports" / "eval.json")
    assert [result[m] for m in report.modalities] == report.s_matrix[-1]
    assert result["a_multi"] == report.a_multi
    assert main(["eval", "--checkpoint", str(workspace / "missing"), "--data", str(workspace / "data")]) == 3


def test_report_tables(workspace, capsys):
    assert _train(workspace, "runs/harmony", "--method", "harmony") == 0
    assert _train(workspace, "runs/seqf", "--method", "seqf") == 0
    capsys.readouterr()
    out = workspace / "tables"
    runs = [str(workspace / "runs" / "harmony"), str(workspace / "runs" / "seqf")]
    assert main(["report", *runs, "--out", str(out), "--curves"]) == 0
    lines = (out / "comparison.csv").read_text().splitlines()
    assert len(lines) == 3 and "AA_3" in lines[0] and "A_multi" in lines[0]
    assert (out / "loss_curves.csv").read_text().count("\n") == 1 + 2 * 3 * 2
    assert main(["report", runs[0], "--out", str(workspace / "single")]) == 0
    assert len((workspace / "single" / "comparison.csv").read_text().splitlines()) == 2


def test_report_rejects_inconsistent_or_missing(workspace, capsys):
    assert _train(workspace, "runs/h", "--method", "seqf") == 0
    path = workspace / "runs" / "h" / "reports" / "eval.json"
    data = json.loads(path.read_text())
    data["aa"][-1] += 1.0
    path.write_text(json.dumps(data))
    capsys.readouterr()
    assert main(["report", str(workspace / "runs" / "h")]) == 3
    assert "h" in capsys.readouterr().err
    assert main(["report", str(workspace / "runs" / "missing")]) == 3
