from __future__ import annotations

import csv
import json
import os
import subprocess
import sys
import textwrap
from pathlib import Path

import pytest

from sidflow import cli
from sidflow.errors import NumericError

SMALL = """\
seed: 1
out: {out}
target:
  kind: mixture
  preset: ring
teacher:
  arch: {{width: 8, depth: 1}}
  steps: 20
  batch_size: 32
distill:
  K: 2
  iterations: 6
  batch_size: 16
sample:
  K: 2
  n_samples: 64
  batch_size: 32
eval:
  n_reference: 200
"""


def _cfg(tmp_path, extra="", name="run.yaml"):
    p = tmp_path / name
    p.write_text(SMALL.format(out=tmp_path / "runs") + textwrap.dedent(extra))
    return p


def _run(*argv, env=None):
    e = {**os.environ, **(env or {})}
    src = str(Path(__file__).resolve().parents[1] / "src")
    e["PYTHONPATH"] = src + os.pathsep + e.get("PYTHONPATH", "")
    return subprocess.run([sys.executable, "-m", "sidflow.cli", *argv], capture_output=True,
                          text=True, env=e)


@pytest.fixture(scope="module")
def teacher_ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("teacher")
    assert cli.main(["train-teacher", "--config", str(_cfg(d))]) == 0
    ck = next((d / "runs").glob("teacher-*/teacher.ckpt"))
    assert (ck.parent / "loss.csv").exists() and (ck.parent / "manifest.json").exists()
    return ck


def test_unknown_key_exit_2(tmp_path, capsys):
    p = _cfg(tmp_path, "bogus: 1\n")
    assert cli.main(["train-teacher", "--config", str(p)]) == 2
    assert "line" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert cli.main(["sample", "--config", str(tmp_path / "x.yaml")]) == 2


def test_numeric_failure_exit_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("loss became nan")
    monkeypatch.setattr(cli.pl, "run_teacher", boom)
    assert cli.main(["train-teacher", "--config", str(_cfg(tmp_path))]) == 3


def test_gradcheck_pass_and_injected_bug(tmp_path):
    out = str(tmp_path)
    ok = _run("gradcheck", "--max-coords", "20", "--out", out)
    assert ok.returncode == 0, ok.stderr
    bad = _run("gradcheck", "--inject-bug", "--max-coords", "20", "--out", out)
    assert bad.returncode == 4
    assert "gradient check failed" in bad.stderr


def test_eval_empty_dir(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    p = _cfg(tmp_path)
    assert cli.main(["eval", "--config", str(p), "--samples", str(empty)]) == 2
    assert not list((tmp_path / "runs").glob("eval-*/eval.csv"))


def test_sample_eval_deterministic(tmp_path, teacher_ckpt):
    extra = f"teacher_checkpoint: {teacher_ckpt}\nsample:\n  mode: teacher-ode\n" \
            "  n_teacher_steps: 20\n  n_samples: 64\n  batch_size: 32\n"
    p = tmp_path / "s.yaml"
    p.write_text(SMALL.replace("sample:\n  K: 2\n  n_samples: 64\n  batch_size: 32\n", "")
                 .format(out=tmp_path / "runs") + extra)
    outs = []
    for _ in range(2):
        r = _run("sample", "--config", str(p))
        assert r.returncode == 0, r.stderr
        samples = Path(r.stdout.strip())
        assert len(list(samples.glob("*.xyz"))) == 64
        e = _run("eval", "--config", str(p), "--samples", str(samples))
        assert e.returncode == 0, e.stderr
        outs.append(Path(e.stdout.strip()).read_bytes())
    assert outs[0] == outs[1]
    row = next(csv.DictReader(outs[0].decode().splitlines()))
    assert float(row["energy_distance"]) >= 0 and row["K"] == "16"


def test_distill_resume(tmp_path, teacher_ckpt):
    extra = f"teacher_checkpoint: {teacher_ckpt}\n"
    base = SMALL.replace("  preset: ring\n", "  preset: ring\n").replace(
        "teacher:\n", "teacher:\n  analytic: true\n")
    p = tmp_path / "d.yaml"
    p.write_text(base.replace("iterations: 6", "iterations: 6\n  checkpoint_every: 3")
                 .format(out=tmp_path / "runs") + extra)
    assert cli.main(["distill", "--config", str(p)]) == 0
    run = next((tmp_path / "runs").glob("distill-*"))
    full = (run / "trace.csv").read_bytes()
    final = (run / "final.ckpt").read_bytes()
    assert (run / "trace.png").exists()
    mid = sorted(run.glob("*.ckpt"))
    resume_from = [c for c in mid if c.name != "final.ckpt"][0]
    assert cli.main(["distill", "--config", str(p), "--resume", str(resume_from)]) == 0
    assert (run / "trace.csv").read_bytes() == full
    assert (run / "final.ckpt").read_bytes() == final
    assert cli.main(["distill", "--config", str(p), "--resume", str(tmp_path / "no.ckpt")]) == 2
    man = json.loads((run / "manifest.json").read_text())
    assert man["iterations"] == 6


def test_sweep_outputs_and_workers(tmp_path, teacher_ckpt):
    extra = f"teacher_checkpoint: {teacher_ckpt}\n"
    body = SMALL.replace("sample:\n  K: 2\n", "sample:\n  K: 2\n  mode: teacher-denoise\n")
    p = tmp_path / "w.yaml"
    p.write_text(body.format(out=tmp_path / "runs") + extra)
    r1 = _run("sweep", "--config", str(p), "--axis", "gamma", "--values", "0.2", "1.0",
              env={"SIDFLOW_WORKERS": "1"})
    assert r1.returncode == 0, r1.stderr
    d = Path(r1.stdout.strip()).parent
    names = {f.name for f in d.iterdir()}
    assert {"sweep.csv", "sweep_timing.csv", "summary.csv", "summary_timing.csv",
            "sweep_gamma.png", "manifest.json"} <= names
    assert any(n.startswith("plot_") for n in names)
    first = {n: (d / n).read_bytes() for n in ("sweep.csv", "summary.csv")}
    r2 = _run("sweep", "--config", str(p), "--axis", "gamma", "--values", "0.2", "1.0",
              env={"SIDFLOW_WORKERS": "2"})
    assert r2.returncode == 0, r2.stderr
    for n, b in first.items():
        assert (d / n).read_bytes() == b
    rows = list(csv.DictReader((d / "sweep.csv").open()))
    assert [r["gamma"] for r in rows] == ["0.2", "1.0"]
    assert all(r["status"] == "ok" for r in rows)
    assert _run("report", str(d)).returncode == 0
    bad = _run("sweep", "--config", str(p), env={"SIDFLOW_WORKERS": "zero"})
    assert bad.returncode == 2


def test_report_missing_dir(tmp_path):
    assert cli.main(["report", str(tmp_path / "missing")]) == 2


def test_help_lists_commands():
    r = _run("--help")
    for c in ("train-teacher", "distill", "sample", "eval", "sweep", "gradcheck", "report"):
        assert c in r.stdout
