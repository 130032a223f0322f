"""Command-line runner.

Subcommands: ``train-teacher``, ``distill``, ``sample``, ``eval``, ``sweep``,
``gradcheck`` and ``report``.  Outputs go to ``<out>/<command>-<hash>/``
where the hash covers the semantic configuration (after ``--seed``), so
different configurations never share a directory.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure,
4 invariant violation.  ``SIDFLOW_WORKERS`` sets the number of worker
processes used by ``sweep``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline as pl
from .config import RunConfig, from_dict, load_config, sweep_values
from .errors import (ConfigError, DomainError, InvariantError, NumericError, SidFlowError,
                     UsageError)
from .evalmetrics import REPORT_COLUMNS, evaluate_chains, evaluate_points, read_reports
from .tensorcore.checkpoint import config_hash
from .tensorcore.gradcheck import gradient_check
from .tensorcore.nets import ArchSpec
from .toydata import MixtureTarget, read_batch_xyz, write_batch_xyz

log = logging.getLogger("sidflow")

WORKERS_ENV = "SIDFLOW_WORKERS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4
METRIC_COLUMNS = [c for c in REPORT_COLUMNS if c not in ("effective_time", "total_seconds")]
TIMING_COLUMNS = ["run_id", "K", "gamma", "alpha", "length", "n", "designability",
                  "effective_time", "total_seconds"]


# -- helpers ---------------------------------------------------------------
def _config(args) -> RunConfig:
    if args.config is None:
        cfg = from_dict({})
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _run_dir(cfg: RunConfig, command: str, extra: dict | None = None) -> Path:
    h = config_hash({"command": command, "config": cfg.semantic_dict(), **(extra or {})})
    d = Path(cfg.out) / f"{command}-{h}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _manifest(run_dir: Path, cfg: RunConfig, command: str, started: float, **extra) -> None:
    info = {"command": command, "config_hash": cfg.hash, "seed": cfg.seed,
            "config": cfg.semantic_dict(),
            "versions": {"sidflow": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "wall_clock_seconds": time.time() - started, **extra}
    (run_dir / "manifest.json").write_text(json.dumps(info, indent=1, sort_keys=True,
                                                      default=str) + "\n")


def _write_rows(path: Path, rows: list[dict], columns: list[str]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _cell(r.get(c)) for c in columns})
    return path


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "nan")
    return str(v)


# -- subcommands -----------------------------------------------------------
def cmd_train_teacher(args) -> int:
    started = time.time()
    cfg = _config(args)
    run_dir = _run_dir(cfg, "teacher")
    params, hist, report = pl.run_teacher(cfg, out_dir=run_dir)
    _write_rows(run_dir / "loss.csv", [{"step": i + 1, "loss": v} for i, v in enumerate(hist)],
                ["step", "loss"])
    if report is not None:
        _write_rows(run_dir / "validation.csv", list(report.rows()),
                    ["t", "velocity_mse", "score_mse", "score_mse_via_x_pred"])
    _manifest(run_dir, cfg, "train-teacher", started, checkpoint=str(run_dir / "teacher.ckpt"))
    print(run_dir / "teacher.ckpt")
    return EXIT_OK


def cmd_distill(args) -> int:
    started = time.time()
    cfg = _config(args)
    run_dir = _run_dir(cfg, "distill")
    if args.resume is not None and not Path(args.resume).exists():
        raise ConfigError(f"resume checkpoint not found: {args.resume}")
    res = pl.run_distill(cfg, out_dir=run_dir, resume=args.resume, test_mode=args.test_mode)
    from .plotting import plot_trace

    plot_trace(read_reports(run_dir / "trace.csv"), run_dir / "trace.png")
    _manifest(run_dir, cfg, "distill", started, checkpoint=str(run_dir / "final.ckpt"),
              iterations=res.iterations, stopped_early=res.stopped_early,
              best_proxy=res.best_proxy)
    print(run_dir / "final.ckpt")
    return EXIT_OK


def _sampling_model(cfg: RunConfig, target):
    mode = cfg.sample.mode
    if mode == "student":
        if not cfg.student_checkpoint:
            raise ConfigError("student_checkpoint is required for mode 'student'")
        return pl.load_net(cfg.student_checkpoint, "theta")
    if cfg.teacher.analytic:
        from .denoisers import AnalyticTeacher

        if not isinstance(target, MixtureTarget):
            raise ConfigError("an analytic teacher needs a mixture target")
        return AnalyticTeacher(target.spec)
    if not cfg.teacher_checkpoint:
        raise ConfigError(f"teacher_checkpoint is required for mode {mode!r}")
    return pl.load_net(cfg.teacher_checkpoint, "phi")


def cmd_sample(args) -> int:
    started = time.time()
    cfg = _config(args)
    target = cfg.build_target()
    model = _sampling_model(cfg, target)
    res = pl.run_sample(cfg, model)
    run_dir = _run_dir(cfg, "sample")
    batch = res.batch.with_coords(target.to_physical(res.batch.coords))
    write_batch_xyz(run_dir / "samples", batch)
    _write_rows(run_dir / "timing.csv",
                [{"batch": i, "size": s, "seconds": t}
                 for i, (s, t) in enumerate(zip(res.batch_sizes, res.batch_seconds))],
                ["batch", "size", "seconds"])
    _manifest(run_dir, cfg, "sample", started, n_samples=res.batch.size,
              total_seconds=res.total_seconds, seconds_per_sample=res.seconds_per_sample,
              batch_seconds=res.batch_seconds)
    print(run_dir / "samples")
    return EXIT_OK


def _sample_timing(samples_dir: Path):
    man = samples_dir.parent / "manifest.json"
    if man.exists():
        return json.loads(man.read_text()).get("total_seconds")
    return None


def cmd_eval(args) -> int:
    started = time.time()
    cfg = _config(args)
    samples_dir = args.samples or cfg.samples_dir
    if samples_dir is None:
        raise ConfigError("no sample directory: pass --samples or set samples_dir")
    samples_dir = Path(samples_dir)
    if not samples_dir.is_dir():
        raise ConfigError(f"sample directory not found: {samples_dir}")
    target = cfg.build_target()
    batch = read_batch_xyz(samples_dir)          # DomainError when empty
    total = _sample_timing(samples_dir)
    keys = {"K": cfg.sample.K, "gamma": cfg.sample.gamma, "alpha": cfg.distill.alpha}
    run_id = config_hash({"samples": str(samples_dir.resolve()), "config": cfg.hash})
    if isinstance(target, MixtureTarget):
        ref = target.sample(cfg.eval.n_reference,
                            np.random.default_rng(cfg.eval.reference_seed)).coords[:, 0]
        rep = evaluate_points(run_id, batch.coords[:, 0], ref, **keys)
        rep.total_seconds = total
    else:
        rep = evaluate_chains(run_id, batch.structures(), total, **keys)
    run_dir = _run_dir(cfg, "eval", {"samples": str(samples_dir.resolve())})
    rows = rep.rows()
    _write_rows(run_dir / "eval.csv", rows, METRIC_COLUMNS)
    if total is not None:
        _write_rows(run_dir / "timing.csv", rows, TIMING_COLUMNS)
    _manifest(run_dir, cfg, "eval", started, samples=str(samples_dir))
    print(run_dir / "eval.csv")
    return EXIT_OK


def _sweep_point(payload: dict) -> dict:
    """Evaluate one (axis value, repetition) pair; errors become row annotations."""
    cfg = from_dict(payload["config"], out=payload["out"])
    axis, value, rep = payload["axis"], payload["value"], payload["rep"]
    row = {"axis": axis, axis: value, "rep": rep, "init": cfg.sample.init, "status": "ok"}
    try:
        target = cfg.build_target()
        seed = cfg.seed + rep
        if axis == "gamma":
            model = _sampling_model(cfg, target)
            scfg = {"gamma": float(value), "seed": seed}
            K, alpha = cfg.sample.K, cfg.distill.alpha
        else:
            d = cfg.semantic_dict()
            d["seed"] = seed
            d["distill"][axis] = int(value) if axis == "K" else float(value)
            pcfg = from_dict(d, out=cfg.out)
            model = pl.run_distill(pcfg).theta
            K = pcfg.distill.K if axis == "K" else cfg.sample.K
            alpha = pcfg.distill.alpha
            scfg = {"K": K, "seed": seed}
        res = pl.run_sample(cfg, model, **scfg)
        rep_obj = pl.evaluate_batch(cfg, res.batch, f"{axis}={value}/rep{rep}",
                                    total_seconds=res.total_seconds, target=target, K=K,
                                    gamma=scfg.get("gamma", cfg.sample.gamma), alpha=alpha)
        row.update(rep_obj.rows()[0])
        row["seconds_per_sample"] = res.seconds_per_sample
    except SidFlowError as exc:
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    return row


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be positive")
    return n


def summarize(rows: list[dict], axis: str, metrics: list[str]) -> list[dict]:
    """Per-metric mean over repetitions and the argmax / argmin axis values."""
    out = []
    values = []
    for r in rows:
        if r[axis] not in values:
            values.append(r[axis])
    for m in metrics:
        means = []
        for v in values:
            ys = [float(r[m]) for r in rows if r[axis] == v and r.get(m) not in (None, "")
                  and r.get("status") == "ok"]
            means.append(float(np.mean(ys)) if ys else math.nan)
        arr = np.array(means)
        ok = np.isfinite(arr) | np.isinf(arr)
        row = {"metric": m}
        for v, mu in zip(values, means):
            row[f"{axis}={v}"] = mu
        if ok.any():
            cand = np.where(ok, arr, np.nan)
            row["argmax"] = values[int(np.nanargmax(cand))]
            row["argmin"] = values[int(np.nanargmin(cand))]
        out.append(row)
    return out


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = _config(args)
    axis = args.axis or cfg.sweep.axis
    values = [float(v) if axis != "K" else int(v) for v in args.values] if args.values \
        else sweep_values(cfg) if axis == cfg.sweep.axis else None
    if values is None:
        from .config import SWEEP_DEFAULTS

        values = list(SWEEP_DEFAULTS[axis])
    reps = args.repetitions or cfg.sweep.repetitions
    run_dir = _run_dir(cfg, "sweep", {"axis": axis, "values": values, "reps": reps})
    payloads = [{"config": cfg.semantic_dict(), "out": cfg.out, "axis": axis, "value": v,
                 "rep": r} for v in values for r in range(reps)]
    n_workers = _workers()
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(_sweep_point, payloads))
    else:
        rows = [_sweep_point(p) for p in payloads]
    write_sweep(run_dir, rows, axis, cfg.sweep.metrics)
    _manifest(run_dir, cfg, "sweep", started, axis=axis, values=values, repetitions=reps,
              failures=sum(r["status"] != "ok" for r in rows))
    print(run_dir / "sweep.csv")
    return EXIT_OK


def _summary_columns(summary: list[dict]) -> list[str]:
    cols = ["metric"]
    for row in summary:
        cols += [k for k in row if k not in cols and k not in ("argmax", "argmin")]
    return cols + ["argmax", "argmin"]


def write_sweep(run_dir: Path, rows: list[dict], axis: str, metrics: list[str]) -> None:
    """Consolidated CSVs, plot-ready per-metric tables and figures for a sweep."""
    from .plotting import plot_sweep

    metric_cols = ["axis", axis, "rep", "init", "status"] + [
        c for c in METRIC_COLUMNS if c not in ("K", "gamma", "alpha") or c == axis]
    metric_cols = list(dict.fromkeys(metric_cols + ["K", "gamma", "alpha"]))
    _write_rows(run_dir / "sweep.csv", rows, metric_cols)
    _write_rows(run_dir / "sweep_timing.csv", rows,
                ["axis", axis, "rep", "status", "designability", "effective_time",
                 "total_seconds", "seconds_per_sample"])
    det = [m for m in metrics if m not in ("effective_time",)]
    summary = summarize(rows, axis, det)
    _write_rows(run_dir / "summary.csv", summary, _summary_columns(summary))
    timing_summary = summarize(rows, axis, ["effective_time", "seconds_per_sample"])
    _write_rows(run_dir / "summary_timing.csv", timing_summary, _summary_columns(timing_summary))
    for m in metrics:
        table = []
        for r in summarize(rows, axis, [m]):
            for k, v in r.items():
                if k.startswith(f"{axis}="):
                    table.append({axis: k.split("=", 1)[1], m: v})
        _write_rows(run_dir / f"plot_{m}_vs_{axis}.csv", table, [axis, m])
    ok_rows = [r for r in rows if r.get("status") == "ok"]
    if ok_rows:
        plot_sweep(ok_rows, axis, det, run_dir / f"sweep_{axis}.png")
        if any(r.get("effective_time") not in (None, "") for r in ok_rows):
            plot_sweep(ok_rows, axis, ["effective_time", "seconds_per_sample"],
                       run_dir / f"timing_{axis}.png")


def cmd_gradcheck(args) -> int:
    started = time.time()
    cfg = _config(args)
    target = cfg.build_target()
    archs = {"configured": cfg.arch(target),
             "linear": ArchSpec(dim=target.dim, width=4, depth=0, n_freq=1)}
    perturb = 1e-3 if args.inject_bug else 0.0
    rows = []
    worst = 0.0
    for name, arch in archs.items():
        rep = gradient_check(arch, args.tolerance, seed=cfg.seed, perturb=perturb,
                             max_coords=args.max_coords)
        rows.append({"network": name, "passed": rep.passed, "max_rel_err": rep.max_rel_err,
                     "worst": rep.worst, "checked": rep.n_checked})
        worst = max(worst, rep.max_rel_err)
        print(f"{name}: {rep.line()}")
    run_dir = _run_dir(cfg, "gradcheck", {"inject_bug": bool(args.inject_bug),
                                           "tolerance": args.tolerance})
    _write_rows(run_dir / "gradcheck.csv", rows,
                ["network", "passed", "max_rel_err", "worst", "checked"])
    _manifest(run_dir, cfg, "gradcheck", started, inject_bug=bool(args.inject_bug))
    if not all(r["passed"] for r in rows):
        raise InvariantError(f"gradient check failed (max relative error {worst:.3e})")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_sweep, plot_trace

    done = 0
    for d in map(Path, args.run_dirs):
        if not d.is_dir():
            raise ConfigError(f"run directory not found: {d}")
        if (d / "trace.csv").exists():
            plot_trace(read_reports(d / "trace.csv"), d / "trace.png")
            done += 1
        if (d / "sweep.csv").exists():
            rows = [r for r in read_reports(d / "sweep.csv") if r.get("status") == "ok"]
            timing = {(r["axis"], r[r["axis"]], r["rep"]): r
                      for r in read_reports(d / "sweep_timing.csv")} \
                if (d / "sweep_timing.csv").exists() else {}
            if rows:
                axis = rows[0]["axis"]
                for r in rows:
                    r.update({k: v for k, v in timing.get((axis, r[axis], r["rep"]), {}).items()
                              if k in ("effective_time", "seconds_per_sample")})
                metrics = [m for m in ("designability", "diversity_rmsd", "energy_distance",
                                       "sliced_wasserstein") if any(r.get(m) for r in rows)]
                plot_sweep(rows, axis, metrics, d / f"sweep_{axis}.png")
                if timing:
                    plot_sweep(rows, axis, ["effective_time", "seconds_per_sample"],
                               d / f"timing_{axis}.png")
            done += 1
    if not done:
        raise ConfigError("no trace.csv or sweep.csv found in the given directories")
    return EXIT_OK


# -- entry point -----------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sidflow", description=__doc__.split("\n\n")[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, resume=False):
        sp.add_argument("--config", type=str, default=None, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", type=str, default=None, help="output root directory")
        if resume:
            sp.add_argument("--resume", type=str, default=None, help="checkpoint to resume")
        return sp

    common(sub.add_parser("train-teacher", help="train the flow-matching teacher"))
    sp = common(sub.add_parser("distill", help="distil a few-step generator"), resume=True)
    sp.add_argument("--test-mode", action="store_true",
                    help="hash parameters around every update to check alternation")
    common(sub.add_parser("sample", help="draw samples and write xyz files"))
    sp = common(sub.add_parser("eval", help="evaluate a directory of xyz samples"))
    sp.add_argument("--samples", type=str, default=None)
    sp = common(sub.add_parser("sweep", help="sweep gamma, alpha or K"))
    sp.add_argument("--axis", choices=["gamma", "alpha", "K"], default=None)
    sp.add_argument("--values", nargs="+", default=None)
    sp.add_argument("--repetitions", type=int, default=None)
    sp = common(sub.add_parser("gradcheck", help="finite-difference gradient checks"))
    sp.add_argument("--inject-bug", action="store_true",
                    help="perturb analytic gradients to confirm the check fails")
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--max-coords", type=int, default=None)
    sp = sub.add_parser("report", help="re-render figures from run directories")
    sp.add_argument("run_dirs", nargs="+")
    return p


COMMANDS = {"train-teacher": cmd_train_teacher, "distill": cmd_distill, "sample": cmd_sample,
            "eval": cmd_eval, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvariantError, UsageError) as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
