import csv
import io
import subprocess
import sys

import pytest

from uniformer_kit.analyzer import count_params
from uniformer_kit.checkpoint import load
from uniformer_kit.cli import main, parse_input, parse_resolutions, UsageError
from uniformer_kit.config import load_config, preset


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def test_analyze_reports_totals(tmp_path):
    csv_path = tmp_path / "a.csv"
    code, text = run("analyze", "--config", "uniformer_s", "--per-stage", "--csv", str(csv_path))
    assert code == 0
    assert f"{count_params(preset('S')):,d}" in text
    rows = list(csv.DictReader(csv_path.open()))
    assert [r["path"] for r in rows] == ["stage1", "stage2", "stage3", "stage4", "head"]
    assert sum(float(r["pct_total"]) for r in rows) == pytest.approx(100, abs=0.05)


def test_analyze_input_override():
    _, small = run("analyze", "--config", "uniformer_s", "--per-stage", "--input", "3x1x224x224")
    _, large = run("analyze", "--config", "uniformer_s", "--per-stage", "--input", "3x1x448x448")
    assert "FLOPs 3.632G" in small and "FLOPs 3.632G" not in large


def test_build_then_analyze_agree(tmp_path):
    out = tmp_path / "tiny.unfk"
    code, text = run("build", "--config", "tiny_hourglass", "--seed", "3", "--out", str(out))
    assert code == 0
    state = load(out)
    assert sum(v.size for v in state.values()) == count_params(load_config("tiny_hourglass"))
    assert load_config(str(out) + ".yaml").stages == load_config("tiny_hourglass").stages
    code, _ = run("build", "--config", "tiny_hourglass", "--seed", "3", "--out", str(tmp_path / "b.unfk"))
    assert (tmp_path / "b.unfk").read_bytes() == out.read_bytes()


def test_build_with_buffers(tmp_path):
    out = tmp_path / "m.unfk"
    assert run("build", "--config", "tiny_llgg", "--out", str(out), "--buffers")[0] == 0
    assert any(k.endswith("running_var") for k in load(out))


def test_sweep_csv(tmp_path):
    path = tmp_path / "s.csv"
    code, text = run("sweep", "--config", "uniformer_s", "--resolutions", "224,448,800x1280", "--csv", str(path))
    assert code == 0 and path.read_text() == text
    rows = list(csv.DictReader(io.StringIO(text)))
    assert [(r["height"], r["width"]) for r in rows] == [("224", "224"), ("448", "448"), ("800", "1280")]


@pytest.mark.parametrize("argv", [
    ["analyze", "--config", "does_not_exist"],
    ["analyze", "--config", "uniformer_s", "--input", "3x224x224"],
    ["analyze", "--config", "uniformer_s", "--input", "3x1x16x16"],
    ["sweep", "--config", "uniformer_s", "--resolutions", "big"],
    ["frobnicate"],
    ["build", "--config", "uniformer_s"],
])
def test_invalid_input_exits_one(argv):
    assert run(*argv)[0] == 1


def test_bad_config_file_exits_one(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {preset: S, colour: red}\n")
    assert run("analyze", "--config", str(bad))[0] == 1


def test_gradcheck_seed_seven_passes():
    code, text = run("gradcheck", "--seed", "7")
    assert code == 0
    assert text.count("PASS") == len(text.strip().splitlines())


def test_gradcheck_impossible_tolerance_exits_two():
    assert run("gradcheck", "--tol", "0")[0] == 2


def test_equivcheck():
    code, text = run("equivcheck")
    assert code == 0 and "FAIL" not in text


def test_reproduce_subset_exit_codes():
    code, text = run("reproduce", "--only", "params/")
    assert code == 0 and "5/5 criteria pass" in text
    code, text = run("reproduce", "--only", "flops/L@224")
    assert code == 2 and "FAIL" in text


def test_train_toy_short_run(tmp_path):
    metrics = tmp_path / "m.csv"
    code, text = run("train-toy", "--config", "tiny_llgg", "--steps", "4", "--batch-size", "8",
                     "--metrics", str(metrics))
    assert code == 0 and "train_acc" in text
    assert metrics.read_text().splitlines()[0] == "step,lr,loss,train_acc"


def test_parsers():
    assert parse_input("3x16x224x224") == (3, 16, 224, 224)
    assert parse_resolutions("224, 448x672") == [224, (448, 672)]
    with pytest.raises(UsageError):
        parse_input("3x0x1x1")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "uniformer_kit", "analyze", "--config", "tiny_llgg"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "params" in proc.stdout
