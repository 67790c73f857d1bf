import csv
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualstudent import nets
from dualstudent.cli import build_spec, main
from dualstudent.config import RunSpec, dump_config, parse_config, resolve_key
from dualstudent.extraction import ConfigError
from dualstudent.paired import mid_row, paired_row
from dualstudent.runner import read_metrics, render_report

TINY = """
[dataset]
n_train = 400
n_test = 200
clusters_per_class = 2
[target]
hidden = 16
epochs = 15
[extraction]
batch = 32
query_budget = 3200
student_hidden = 16
generator_hidden = 16
latent_dim = 4
eval_fraction = 0.25
[evaluation]
n_generated = 300
n_grad = 16
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


# config

def test_dump_parse_round_trip():
    spec = parse_config(TINY)
    text = dump_config(spec)
    assert dump_config(parse_config(text)) == text


@given(st.floats(1e-6, 1.0), st.integers(1, 512), st.booleans(),
       st.lists(st.integers(1, 64), min_size=1, max_size=3))
def test_round_trip_arbitrary_values(lr, batch, check, hidden):
    spec = RunSpec()
    spec.extraction.lr_generator = lr
    spec.extraction.batch = batch
    spec.extraction.check_bound = check
    spec.extraction.student_hidden = tuple(hidden)
    back = parse_config(dump_config(spec))
    assert back.extraction == spec.extraction


@pytest.mark.parametrize("text,match", [
    ("[extraction]\nbatchsize = 3\n", "unknown key"),
    ("[training]\nbatch = 3\n", "unknown config section"),
    ("batch = 3\n", "section"),
    ("[extraction]\nbatch = many\n", r"\[extraction\] batch"),
    ("[extraction]\nseed = 4\n", "unknown key"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_none_and_lists_and_comments():
    spec = parse_config("[extraction]\nlr_student = none  # default rule\nstudent_hidden = 8, 4\n"
                        "[attack]\nepsilons = 0.1,0.2\ntargeted = false, true\n")
    assert spec.extraction.lr_student is None and spec.extraction.student_hidden == (8, 4)
    assert spec.attack.epsilons == (0.1, 0.2) and spec.attack.targeted == (False, True)


def test_key_resolution():
    assert resolve_key("batch") == ("extraction", "batch")
    assert resolve_key("target.epochs") == ("target", "epochs")
    with pytest.raises(ConfigError, match="ambiguous"):
        resolve_key("epochs")
    with pytest.raises(ConfigError, match="evaluation.fd_step"):
        resolve_key("fd_step")
    with pytest.raises(ConfigError, match="unknown"):
        resolve_key("nonsense")


# CLI

def test_cli_overrides_beat_config(tiny, tmp_path):
    spec = build_spec(["extract", "--config", str(tiny), "--seed", "7", "--out", str(tmp_path / "o"),
                       "--batch", "64", "--extraction.fd_step=1e-4", "--label-mode", "hard"])
    assert spec.task == "extract" and spec.seed == 7 and spec.output_dir == str(tmp_path / "o")
    assert spec.extraction.batch == 64 and spec.extraction.fd_step == 1e-4
    assert spec.extraction.label_mode == "hard" and spec.dataset.n_train == 400


@pytest.mark.parametrize("args", [["extract", "--bogus", "1"], ["extract", "--batch"], ["extract", "stray"],
                                  ["extract", "--config", "/nonexistent.ini"]])
def test_cli_bad_arguments_exit_2(args, tmp_path):
    assert main(args + ["--out", str(tmp_path)]) == 2


def test_cli_subcommand_names():
    for cmd, task in [("train-target", "train_target"), ("grad-fidelity", "eval_grad_fidelity"),
                      ("attack", "attack_eval"), ("finetune", "finetune"), ("report", "report")]:
        assert build_spec([cmd]).task == task


# end-to-end runs

@pytest.fixture(scope="module")
def extract_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "ds"
    cfg = out.parent / "tiny.ini"
    cfg.write_text(TINY)
    assert main(["extract", "--config", str(cfg), "--seed", "1", "--out", str(out)]) == 0
    return out


def test_run_directory_layout(extract_run):
    names = {p.name for p in extract_run.iterdir()}
    assert {"config.ini", "summary.json", "metrics.csv", "ledger.json", "report.txt", "checkpoints"} <= names
    assert {p.name for p in (extract_run / "checkpoints").iterdir()} == {"target.json", "s1.json", "s2.json",
                                                                         "generator.json"}


def test_metrics_header_exact(extract_run):
    with open(extract_run / "metrics.csv") as fh:
        header = fh.readline().strip()
    assert header == ("epoch,queries,agreement_s1,agreement_s2,agreement_ensemble,grad_fidelity_ds,"
                      "grad_fidelity_fd,class_hist_0,class_hist_1,class_hist_2,class_hist_3,tv_from_uniform")
    rows = read_metrics(extract_run / "metrics.csv")
    assert rows[0].queries == 0 and len(rows) >= 4


def test_ledger_within_budget(extract_run):
    led = json.loads((extract_run / "ledger.json").read_text())
    assert led["total"] <= led["budget"] == 3200
    assert led["total"] == led["by_phase"]["student_train"] + led["by_phase"]["generator_grad_est"]
    assert led["by_phase"]["generator_grad_est"] == 0


def test_config_echo_is_resolved(extract_run):
    text = (extract_run / "config.ini").read_text()
    assert "seed = 1" in text and "lr_student = 0.3" in text and "epochs = 20" in text


def test_checkpoints_load(extract_run):
    s1 = nets.load(extract_run / "checkpoints" / "s1.json")
    assert s1.dims == [8, 16, 4] and s1.seed is not None


def test_report_regenerates_byte_identically(extract_run):
    before = (extract_run / "report.txt").read_bytes()
    assert main(["report", "--out", str(extract_run)]) == 0
    assert (extract_run / "report.txt").read_bytes() == before
    assert render_report(extract_run).encode() == before
    assert "queries to agreement" in before.decode()


def test_report_on_missing_run(tmp_path):
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 1


def test_rerun_from_echo_is_bit_exact(extract_run, tmp_path):
    again = tmp_path / "again"
    assert main(["extract", "--config", str(extract_run / "config.ini"), "--out", str(again)]) == 0
    for name in ("metrics.csv", "ledger.json", "checkpoints/s1.json", "checkpoints/generator.json"):
        assert (again / name).read_bytes() == (extract_run / name).read_bytes()


def test_failure_exits_nonzero_with_partial_outputs(tiny, tmp_path):
    out = tmp_path / "fail"
    assert main(["extract", "--config", str(tiny), "--out", str(out), "--target.floor", "1.01"]) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "failed" and "TargetAccuracyError" in summary["error"]
    assert (out / "config.ini").exists() and (out / "checkpoints" / "target.json").exists()
    assert "status: failed" in (out / "report.txt").read_text()


def test_train_target_task(tiny, tmp_path):
    out = tmp_path / "t"
    assert main(["train-target", "--config", str(tiny), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["target_test_accuracy"] >= 0.9


def test_fd_run_and_pairing(extract_run, tmp_path):
    out = tmp_path / "fd"
    assert main(["extract", "--config", str(extract_run / "config.ini"), "--out", str(out),
                 "--method", "dfme_fd", "--epochs", "none"]) == 2  # epochs is ambiguous
    assert main(["extract", "--config", str(extract_run / "config.ini"), "--out", str(out),
                 "--method", "dfme_fd", "--extraction.epochs", "none"]) == 0
    led = json.loads((out / "ledger.json").read_text())
    assert led["by_phase"]["generator_grad_est"] > 0 and led["total"] <= 3200
    row = paired_row(extract_run, out)
    assert row.seed == 1 and 0 <= row.a_final <= 1 and 0 <= row.b_final <= 1
    rows = read_metrics(out / "metrics.csv")
    assert mid_row(rows).queries >= rows[-1].queries / 2


def test_attack_task_writes_fooling_table(extract_run, tmp_path):
    out = tmp_path / "atk"
    cfg = extract_run / "config.ini"
    assert main(["attack", "--config", str(cfg), "--out", str(out), "--ds_run", str(extract_run),
                 "--fd_run", str(extract_run), "--n_eval", "100", "--proxy_epochs", "5",
                 "--kinds", "fgsm,pgd"]) == 0
    with open(out / "fooling.csv", newline="") as fh:
        recs = list(csv.DictReader(fh))
    assert list(recs[0]) == ["proxy", "attack", "epsilon", "n_evaluated", "n_success", "success_rate"]
    for r in recs:
        assert int(r["n_success"]) <= int(r["n_evaluated"])
        assert float(r["success_rate"]) == int(r["n_success"]) / int(r["n_evaluated"])
    assert "fooling rates" in (out / "report.txt").read_text()


def test_attack_refuses_runs_from_another_target(extract_run, tmp_path):
    out = tmp_path / "mismatch"
    assert main(["attack", "--config", str(extract_run / "config.ini"), "--out", str(out), "--seed", "2",
                 "--ds_run", str(extract_run), "--fd_run", str(extract_run), "--n_eval", "50"]) == 1
    assert "different seed" in json.loads((out / "summary.json").read_text())["error"]
