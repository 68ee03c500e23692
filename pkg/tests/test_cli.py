import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY
from mcdistill.ablation import AblationGrid, run_ablation
from mcdistill.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from mcdistill.distill import DistillConfig
from mcdistill.train import TrainReport


def write_config(path, cfg):
    path.write_text(json.dumps(cfg.to_dict()))
    return str(path)


@pytest.fixture()
def teacher_ckpt(tmp_path, tiny_teacher):
    path = tmp_path / "teacher.mcdt"
    tiny_teacher.save(path)
    return str(path)


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--cases", "relu", "conv2d-3x3-pad1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "relu" in out and "max relative error" in out


def test_gradcheck_unknown_case():
    assert main(["gradcheck", "--cases", "no-such-op"]) == EXIT_CONFIG


def test_unknown_config_field_exits_1(tmp_path, teacher_ckpt, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"epochs": 1, "warmup": 3}))
    assert main(["distill", "--config", str(cfg), "--teacher", teacher_ckpt, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "warmup" in capsys.readouterr().err


def test_bad_distill_value_exits_1(tmp_path, teacher_ckpt):
    cfg = TINY.student_config(DistillConfig()).to_dict()
    cfg["distill"]["distance"] = "cosine"
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["distill", "--config", str(path), "--teacher", teacher_ckpt, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_teacher_exits_1(tmp_path):
    cfg = write_config(tmp_path / "c.json", TINY.student_config(DistillConfig()))
    assert main(["distill", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["distill", "--config", cfg, "--teacher", str(tmp_path / "nope.mcdt"), "--out", str(tmp_path)]) == 1


def test_divergence_exits_2(tmp_path, teacher_ckpt):
    cfg = replace(TINY.student_config(DistillConfig()), lr=1e200, grad_clip=None, optimizer="adam")
    path = write_config(tmp_path / "c.json", cfg)
    out = tmp_path / "run"
    with np.errstate(all="ignore"):
        code = main(["distill", "--config", path, "--teacher", teacher_ckpt, "--out", str(out)])
    assert code == EXIT_NUMERICAL
    assert TrainReport.load(out / "report.json").status == "diverged"


def test_tiny_distill_is_reproducible(tmp_path, teacher_ckpt):
    cfg = write_config(tmp_path / "c.json", TINY.student_config(DistillConfig(N=5)))
    reports = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = main(["distill", "--config", cfg, "--teacher", teacher_ckpt, "--out", str(out), "--deterministic"])
        assert code == EXIT_OK
        assert (out / "student.mcdt").exists()
        reports.append((out / "report.json").read_bytes())
    assert reports[0] == reports[1]


def test_gen_data_and_train_teacher(tmp_path):
    cfg = write_config(tmp_path / "t.json", TINY.teacher_config())
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    data = str(tmp_path / "data.mcdt")
    assert main(["train-teacher", "--config", cfg, "--data", data, "--out", str(tmp_path), "--deterministic"]) == 0
    rep = TrainReport.load(tmp_path / "teacher_report.json")
    assert rep.kind == "teacher" and rep.wall_time is None
    assert (tmp_path / "teacher.mcdt").exists()


def test_train_teacher_rejects_distill_section(tmp_path):
    cfg = write_config(tmp_path / "c.json", TINY.student_config(DistillConfig()))
    assert main(["train-teacher", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_ablate_rejects_unknown_grid(tmp_path):
    assert main(["ablate", "--grids", "nope", "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = tmp_path / "g.json"
    bad.write_text(json.dumps({"name": "g", "depth": [1]}))
    assert main(["ablate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_report_command(tmp_path, tiny_split, tiny_teacher, capsys):
    train, evals = tiny_split
    grid = AblationGrid("baselines", rows=({"distill": None}, {"distill": {"N": 0, "source": "none"}},
                                          {"distill": {"N": 5}}), seeds=(0, 1))
    run_ablation([grid], tiny_teacher, train, evals, preset=TINY, out_dir=tmp_path)
    assert main(["report", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "UET default - ET baseline" in out and "over 2 seeds" in out
    lines = (tmp_path / "convergence.csv").read_text().strip().split("\n")
    assert lines[0] == "epoch,scratch,ET baseline,UET default"
    assert len(lines) == 1 + TINY.student_epochs


def test_report_empty_dir(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mcdistill", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train-teacher", "distill", "ablate", "gradcheck", "report"):
        assert cmd in proc.stdout
