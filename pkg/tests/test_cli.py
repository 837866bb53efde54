import io
import json
import subprocess
import sys

import pytest

from rtdlog import cli
from rtdlog.config import RunConfig
from rtdlog.report import format_table

SYNTH = ["--n-templates", "6", "--n-lines", "400", "--n-anomalies", "24", "--n-anomaly-templates", "3"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "syn", *SYNTH, "--seed", 2) == 0
    data = root / "syn" / "corpus.log"
    run_dir = root / "run"
    assert run("train-tokenizer", "--dataset", data, "--out", run_dir, "--vocab-size", 300) == 0
    assert run("train", "--dataset", data, "--out", run_dir, "--max-steps", 4, "--batch-size", 8) == 0
    return root, data, run_dir


def test_synth_outputs(pipeline):
    root, data, _ = pipeline
    manifest = json.loads((root / "syn" / "manifest.json").read_text())
    text = data.read_text().splitlines()
    assert len(text) == 424
    assert [i + 1 for i, l in enumerate(text) if not l.startswith("- ")] == manifest["anomaly_line_nos"]
    assert (root / "syn" / "run_config.json").exists()


def test_vocab_has_placeholders(pipeline):
    _, _, run_dir = pipeline
    tokens = (run_dir / "vocab.txt").read_text().split("\n")
    for ph in ("<num>", "<hex>", "<ip>", "<path>", "<date>", "<time>"):
        assert ph in tokens


def test_train_outputs(pipeline):
    _, _, run_dir = pipeline
    losses = (run_dir / "losses.csv").read_text().splitlines()
    assert losses[0] == "step,loss_g,loss_d,joint" and len(losses) == 5
    cfg = RunConfig.load(run_dir / "run_config.json")
    assert cfg.max_steps == 4 and cfg.lam == 50
    assert (run_dir / "checkpoint" / "manifest.json").exists()


def test_tokenizer_rerun_identical(pipeline, tmp_path):
    _, data, run_dir = pipeline
    assert run("train-tokenizer", "--dataset", data, "--out", tmp_path, "--vocab-size", 300) == 0
    assert (tmp_path / "vocab.txt").read_bytes() == (run_dir / "vocab.txt").read_bytes()


def test_score_csv(pipeline, tmp_path):
    _, data, run_dir = pipeline
    assert run("score", "--checkpoint", run_dir / "checkpoint", "--input", data, "--out", tmp_path) == 0
    rows = (tmp_path / "scores.csv").read_text().splitlines()
    assert rows[0] == "# scores-csv-version: 1"
    assert rows[1] == "line_no,score,label,n_tokens,flag"
    assert [int(r.split(",")[0]) for r in rows[2:]] == list(range(1, 425))
    parsed = cli.read_scores_csv(tmp_path / "scores.csv")
    assert len(parsed) == 424


def test_score_stdin_and_empty(pipeline, monkeypatch, capsys):
    _, _, run_dir = pipeline
    monkeypatch.setattr(sys, "stdin", io.StringIO(""))
    assert run("score", "--checkpoint", run_dir / "checkpoint") == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["# scores-csv-version: 1", "line_no,score,label,n_tokens,flag"]

    monkeypatch.setattr(sys, "stdin", io.StringIO("data tlb error interrupt\n\nkernel panic\n"))
    assert run("score", "--checkpoint", run_dir / "checkpoint", "--profile", "raw") == 0
    rows = capsys.readouterr().out.splitlines()[2:]
    assert [r.split(",")[0] for r in rows] == ["1", "2", "3"]
    assert rows[1].endswith(",empty")


def test_evaluate_report(pipeline, tmp_path):
    _, data, run_dir = pipeline
    assert run("evaluate", "--dataset", data, "--checkpoint", run_dir / "checkpoint", "--out", tmp_path,
               "--split", "chrono") == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["chronological_check"]["ok"] is True
    assert set(rep["sequence"]) == {"count:100", "minutes:60"}
    assert rep["threshold"]["candidate_count"] >= 2
    assert "Prec" in (tmp_path / "table.txt").read_text()
    assert RunConfig.load(tmp_path / "run_config.json").split == "chrono"


def test_evaluate_from_scores_matches_checkpoint_path(pipeline, tmp_path):
    _, data, run_dir = pipeline
    run("score", "--checkpoint", run_dir / "checkpoint", "--input", data, "--out", tmp_path / "s")
    assert run("evaluate", "--scores", tmp_path / "s" / "scores.csv", "--dataset", data, "--out", tmp_path / "e",
               "--group", "count:100") == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["sequence"]["count:100"]["n_sequences"] == 5
    assert rep["n_test_lines"] == 424


def test_evaluate_single_class_is_data_error(pipeline, tmp_path, capsys):
    _, _, run_dir = pipeline
    csv_path = tmp_path / "s.csv"
    csv_path.write_text("# scores-csv-version: 1\nline_no,score,label,n_tokens,flag\n1,0.5,normal,3,\n2,0.6,normal,3,\n")
    assert run("evaluate", "--scores", csv_path, "--out", tmp_path / "e", "--group", "count:1") == 3
    assert "both normal and anomaly" in capsys.readouterr().err


def test_missing_input_exit_2(tmp_path, capsys):
    assert run("train-tokenizer", "--dataset", tmp_path / "nope.log", "--out", tmp_path) == 2
    assert "not found" in capsys.readouterr().err
    assert run("score", "--checkpoint", tmp_path / "nock", "--input", "-") == 2


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--lambda", "abc"])
    assert info.value.code == 2


def test_bad_grouping_is_data_error(pipeline, tmp_path):
    _, data, run_dir = pipeline
    assert run("evaluate", "--dataset", data, "--checkpoint", run_dir / "checkpoint", "--out", tmp_path,
               "--group", "hours:1") == 3


def test_config_file_with_flag_override(pipeline, tmp_path):
    _, data, run_dir = pipeline
    cfg_path = tmp_path / "cfg.json"
    RunConfig(dataset=str(data), vocab_size=250, split="chrono").save(cfg_path)
    assert run("train-tokenizer", "--config", cfg_path, "--out", tmp_path / "o", "--vocab-size", 260) == 0
    cfg = RunConfig.load(tmp_path / "o" / "run_config.json")
    assert cfg.vocab_size == 260 and cfg.split == "chrono"


def test_paper_scale_flag(pipeline, tmp_path):
    _, data, run_dir = pipeline
    out = tmp_path / "p"
    out.mkdir()
    for f in ("vocab.txt", "vocab.json", "normalizer.json"):
        (out / f).write_bytes((run_dir / f).read_bytes())
    assert run("train", "--dataset", data, "--out", out, "--paper-scale", "--max-steps", 1, "--batch-size", 2) == 0
    m = json.loads((out / "checkpoint" / "manifest.json").read_text())
    assert (m["discriminator"]["layers"], m["discriminator"]["width"]) == (6, 512)
    assert (m["generator"]["layers"], m["generator"]["width"]) == (3, 256)


def test_divergence_exit_4(pipeline, tmp_path, monkeypatch):
    _, data, run_dir = pipeline
    from rtdlog import electra
    real = electra.rtd_step
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise electra.NumericError("injected")
        return real(*a, **kw)

    monkeypatch.setattr(electra, "rtd_step", flaky)
    out = tmp_path / "d"
    out.mkdir()
    for f in ("vocab.txt", "vocab.json", "normalizer.json"):
        (out / f).write_bytes((run_dir / f).read_bytes())
    assert run("train", "--dataset", data, "--out", out, "--max-steps", 5, "--batch-size", 4) == 4
    assert (out / "checkpoint" / "manifest.json").exists()
    assert len((out / "losses.csv").read_text().splitlines()) == 3


def test_format_table_layout():
    rep = {"sequence": {"count:100": {"precision": 0.5, "recall": 1.0, "specificity": 0.25, "f1": 2 / 3},
                        "minutes:60": {"precision": 1.0, "recall": 1.0, "specificity": 1.0, "f1": 1.0}}}
    table = format_table({"BGL": {"random:0": rep, "chrono": rep}})
    lines = table.splitlines()
    assert "100 messages grouping (random / chronological)" in lines[0]
    assert "60 minutes grouping" in lines[0]
    assert lines[1].replace("|", " ").split() == ["Model"] + ["Prec", "Rec", "Spec", "F1"] * 2
    assert "0.500 / 0.500" in lines[3] and "0.667 / 0.667" in lines[3]


def test_console_script():
    r = subprocess.run([sys.executable, "-m", "rtdlog.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for sub in ("synth", "train-tokenizer", "train", "score", "evaluate"):
        assert sub in r.stdout
