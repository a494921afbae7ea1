import csv

import numpy as np
import pytest

from simdino.cli import main
from simdino.config import RunConfig

from conftest import TINY


def _write_cfg(path, **kw):
    cfg = RunConfig.for_mode(kw.pop("mode", "simdino"), **{**TINY, "steps": 2, **kw})
    cfg.save(path)
    return cfg


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_generate_counts_and_determinism(tmp_path):
    cfg = tmp_path / "c.txt"
    _write_cfg(cfg)
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    rows = (tmp_path / "a" / "manifest.tsv").read_text().splitlines()
    assert len(rows) == 1 + 3 * TINY["per_class"]
    for f in sorted((tmp_path / "a" / "images").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()


def test_train_zero_steps_writes_header_only(tmp_path):
    cfg = tmp_path / "c.txt"
    _write_cfg(cfg, steps=0)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    rows = _rows(tmp_path / "run" / "metrics.csv")
    assert len(rows) == 1
    assert rows[0][:8] == ["step", "loss", "distance", "coding_rate", "grad_norm", "eff_rank", "lambda", "lr"]


def test_negative_gamma_rejected_before_training(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("steps = 2\ngamma = -1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 1
    assert "gamma" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_unknown_key_names_line(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("steps = 2\n\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 1
    err = capsys.readouterr().err
    assert "learning_rate" in err and "line 3" in err


def test_train_resume_and_eval(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    _write_cfg(cfg, steps=4, checkpoint_every=2)
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", "--config", str(cfg), "--out", str(full)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(part)]) == 0
    # rerun the second half from the step-2 checkpoint into the same directory
    assert main(["train", "--config", str(cfg), "--out", str(part), "--resume",
                 str(part / "ckpt_000002.bin")]) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    assert (full / "final.bin").read_bytes() == (part / "final.bin").read_bytes()

    for d in ("e1", "e2"):
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(full / "final.bin"),
                     "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "e1" / "eval.csv").read_bytes() == (tmp_path / "e2" / "eval.csv").read_bytes()
    rows = _rows(tmp_path / "e1" / "eval.csv")
    assert [r[0] for r in rows[1:]] == ["teacher", "student"]
    assert (tmp_path / "e1" / "features_teacher.bin").exists()


def test_no_distill_eval_flags_student(tmp_path):
    cfg = tmp_path / "c.txt"
    _write_cfg(cfg, mode="no-distill", steps=1)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "run" / "final.bin")]) == 0
    rows = {r["network"]: r for r in csv.DictReader(open(tmp_path / "run" / "eval.csv"))}
    assert "no-distill" in rows["student"]["note"]
    assert rows["student"]["knn"] == rows["teacher"]["knn"]


def test_eval_hash_mismatch(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    _write_cfg(cfg, steps=0)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    other = tmp_path / "o.txt"
    _write_cfg(other, steps=0, lr=0.123)
    capsys.readouterr()
    assert main(["eval", "--config", str(other), "--checkpoint", str(tmp_path / "run" / "final.bin")]) == 4
    err = capsys.readouterr().err
    assert RunConfig.load(cfg).hash() in err and RunConfig.load(other).hash() in err


def test_verify_small_grid(tmp_path, capsys):
    code = main(["verify", "--d", "4", "--n", "16", "--eps", "0.5,1.0", "--trials", "1000", "--out", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "verify.csv")))
    assert len(rows) == 2
    assert all(float(r["ratio"]) <= 1 and float(r["fd_max_rel_err"]) < 1e-6 and r["ok"] == "True" for r in rows)
    assert "C=0.25" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["verify", "--d", "0"], ["verify", "--eps", "-1"], ["verify", "--trials", "0"]])
def test_verify_rejects_bad_grids(argv):
    assert main(argv) == 2


def _log(path, steps, cols=("step", "loss", "eff_rank")):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in range(steps):
            w.writerow([s] + [repr(float(s + i)) for i in range(1, len(cols))])


def test_report_single_log_passthrough(tmp_path):
    _log(tmp_path / "a" / "metrics.csv", 5)
    assert main(["report", str(tmp_path / "a" / "metrics.csv"), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "report.csv").read_bytes() == (tmp_path / "a" / "metrics.csv").read_bytes()
    assert (tmp_path / "r" / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_aligns_to_shorter(tmp_path, capsys):
    _log(tmp_path / "g0" / "metrics.csv", 6)
    _log(tmp_path / "gc" / "metrics.csv", 4)
    assert main(["report", str(tmp_path / "g0" / "metrics.csv"), str(tmp_path / "gc" / "metrics.csv"),
                 "--out", str(tmp_path / "r")]) == 0
    rows = _rows(tmp_path / "r" / "report.csv")
    assert rows[0] == ["step", "g0:loss", "gc:loss", "g0:eff_rank", "gc:eff_rank", "truncated"]
    assert len(rows) == 5 and all(r[-1] == "1" for r in rows[1:])
    assert "truncated" in capsys.readouterr().err


def test_report_column_union_warns(tmp_path, capsys):
    _log(tmp_path / "a.csv", 3)
    _log(tmp_path / "b.csv", 3, cols=("step", "loss", "patch"))
    assert main(["report", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--out", str(tmp_path / "r")]) == 0
    assert "warning" in capsys.readouterr().err
    rows = _rows(tmp_path / "r" / "report.csv")
    assert rows[0] == ["step", "a:loss", "b:loss", "a:eff_rank", "b:eff_rank", "a:patch", "b:patch", "truncated"]
    assert rows[1][4] == "" and rows[1][5] == ""


def test_report_rejects_non_log(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    assert main(["report", str(tmp_path / "x.csv"), "--out", str(tmp_path / "r")]) == 1


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--mode", "byol"])
    assert exc.value.code == 2
