import json
import subprocess
import sys

import pytest
import yaml

from med2d.arch import ModelConfig, count_parameters
from med2d.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from med2d.config import ConfigError, load_run_config, parse_override

TINY = ["--set", "model.preset=tiny", "--set", "model.input_size=64"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# --- config -------------------------------------------------------------------------


def test_parse_override_uses_yaml_scalars():
    assert parse_override("train.lr=0.01") == ("train.lr", 0.01)
    assert parse_override("model.stage_widths=[8, 8, 8, 8]") == ("model.stage_widths", [8, 8, 8, 8])
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_unknown_key_is_config_error():
    with pytest.raises(ConfigError, match="train.lrr"):
        load_run_config(None, ["train.lrr=1"])


def test_file_then_overrides_and_round_trip(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"model": {"preset": "tiny", "input_size": 64}, "train": {"lr": 0.01, "epochs": 3}}))
    rc = load_run_config(str(cfg), ["train.epochs=7"])
    assert rc.train.learning_rate == 0.01 and rc.train.epochs == 7
    assert rc.model == ModelConfig.tiny(64)
    path = rc.write_resolved(tmp_path / "run")
    again = load_run_config(str(path))
    assert again.model == rc.model and again.train == rc.train and again.resolved == rc.resolved


@pytest.mark.parametrize("bad", ["model.preset=huge", "model.variant=wide", "train.batch_size=0",
                                 "model.input_size=20"])
def test_invalid_values_are_config_errors(bad):
    with pytest.raises(ConfigError):
        load_run_config(None, [bad])


# --- cli ----------------------------------------------------------------------------


def test_schedule_default_values(capsys):
    code, out, _ = run(capsys, "schedule")
    lines = out.splitlines()
    assert code == EXIT_OK and lines[0] == "1 32" and "3 41" in lines and len(lines) == 11


def test_schedule_constant_and_invalid(capsys):
    code, out, _ = run(capsys, "schedule", "--r", 1, "--f1", 8, "--f2", 8, "--depth", 4)
    assert {line.split()[1] for line in out.splitlines()} == {"8"}
    assert run(capsys, "schedule", "--depth", 1)[0] == EXIT_CONFIG
    assert run(capsys, "schedule", "--r", 0)[0] == EXIT_CONFIG


def test_summary_reports_deviation(capsys, tmp_path):
    code, out, _ = run(capsys, "summary", "--out", tmp_path)
    assert code == EXIT_OK
    assert "total parameters: 1369225" in out and "deviation from 2.07M: -33.9%" in out
    rows = (tmp_path / "reports" / "complexity.csv").read_text().splitlines()
    assert rows[0] == "variant,stage,layer,param_count,cumulative_total"
    assert (tmp_path / "config.resolved").exists()


def test_summary_ablation_totals(capsys):
    _, out, _ = run(capsys, "summary", "--ablate", "no-expansion", *TINY)
    total = int(out.split("total parameters: ")[1].split()[0])
    cfg = ModelConfig.tiny(64)
    assert total == count_parameters(cfg.with_ablation("no-expansion")).total < count_parameters(cfg).total


def test_usage_errors_exit_2(capsys):
    assert run(capsys, "summary", "--set", "model.nope=1")[0] == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_CONFIG


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    out = capsys.readouterr().out
    assert exc.value.code == 0
    for flag in ("--config", "--set", "--data", "--out", "--resume", "--threads"):
        assert flag in out


def test_missing_checkpoint_exits_3(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "none.m2sn", "--data", tmp_path)
    assert code == EXIT_RUNTIME and "eval" in err


def test_synth_is_byte_reproducible(capsys, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "synth", "--kind", "blobs", "--n", 3, "--size", 32, "--seed", 4,
                   "--out", tmp_path / name)[0] == EXIT_OK
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) >= 6
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--kind", "ellipses", "--n", "12", "--size", "64", "--seed", "1",
                 "--out", str(root / "A")]) == 0
    assert main(["synth", "--kind", "ellipses", "--n", "6", "--size", "64", "--seed", "2", "--shift", "default",
                 "--out", str(root / "B")]) == 0
    assert main(["train", *TINY, "--set", "train.epochs=2", "--set", "train.batch_size=4",
                 "--data", str(root / "A"), "--out", str(root / "run"), "--no-wall-clock"]) == 0
    return root


def test_train_writes_run_directory(cli_run):
    run_dir = cli_run / "run"
    recs = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert [(r["epoch"], r["split"]) for r in recs] == [(1, "train"), (1, "val"), (2, "train"), (2, "val")]
    assert all(r["wall_ms"] is None for r in recs)
    assert (run_dir / "checkpoints" / "best.m2sn").exists() and (run_dir / "checkpoints" / "last.m2sn").exists()
    assert yaml.safe_load((run_dir / "config.resolved").read_text())["train.epochs"] == 2


def test_eval_prints_table_row(capsys, cli_run):
    code, out, _ = run(capsys, "eval", "--checkpoint", cli_run / "run/checkpoints/best.m2sn",
                       "--data", cli_run / "A", "--modality", "synthetic", "--out", cli_run / "ev")
    header, row = out.splitlines()
    assert code == 0 and header == "modality,dataset,image_size,dsc"
    fields = row.split(",")
    assert fields[:3] == ["synthetic", "A", "64 x 64"] and 0 <= float(fields[3]) <= 1
    from med2d.data import SplitDescriptor, load_dataset, split

    n_test = len(split(load_dataset(cli_run / "A", 1, size=64), SplitDescriptor(seed=0))[2])
    assert json.loads((cli_run / "ev/reports/eval.jsonl").read_text())["sample_count"] == n_test


def test_xeval_emits_one_row_per_test_corpus(capsys, cli_run):
    code, out, _ = run(capsys, "xeval", "--checkpoint", cli_run / "run/checkpoints/best.m2sn",
                       "--train-corpus", cli_run / "A", "--test-corpora", f"{cli_run / 'A'},{cli_run / 'B'}",
                       "--out", cli_run / "xe")
    lines = out.splitlines()
    assert code == 0 and lines[0] == "train_data,test_data,method,dsc" and len(lines) == 3
    assert [line.split(",")[1] for line in lines[1:]] == ["A", "B"]


def test_predict_writes_masks(capsys, cli_run):
    code, out, _ = run(capsys, "predict", "--checkpoint", cli_run / "run/checkpoints/best.m2sn",
                       "--input", cli_run / "A/images", "--out", cli_run / "pred")
    assert code == 0 and len(list((cli_run / "pred/predictions").glob("*.pgm"))) == 12


def test_gradcheck_primitives_only(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--no-model", "--out", tmp_path)
    assert code == 0 and "FAIL" not in out
    assert (tmp_path / "reports/gradcheck.csv").read_text().startswith("check,max_rel_err")


def test_console_script_threads_flag(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "med2d.cli", "schedule", "--threads", "1", "--depth", "3"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.splitlines() == ["1 32", "2 24", "3 41"]
    bad = subprocess.run([sys.executable, "-m", "med2d.cli", "schedule", "--threads", "0"],
                         capture_output=True, text=True)
    assert bad.returncode == EXIT_CONFIG
