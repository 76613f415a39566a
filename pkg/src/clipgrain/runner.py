"""Experiment orchestration behind the CLI subcommands.

These functions do all the work and write all the files; ``cli`` only parses
arguments and maps exceptions to exit codes. Output is deterministic: no
timestamps, sorted JSON keys, floats written with 17 significant digits.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, models
from ._accel import backend
from .clipping import ClippingPolicy
from .config import ExperimentConfig
from .errors import ConfigError, OracleFailureError
from .memorization import STREAM_DATA, ExposureReport, run_secret_sharer
from .models import Dataset, Model
from .numerics import SeededRng, finite_diff_gradient, relative_error
from .trainer import TrainConfig, fmt_float, train


def prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    # --force overwrites our files in place; nothing else in the directory is touched
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)", "--out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(fmt_float(x)) if math.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_manifest(cfg: ExperimentConfig, out: Path, command: str, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "clipgrain_version": __version__,
        "backend": backend(),
        "config": cfg.resolved(),
    }
    if extra:
        manifest.update(extra)
    _write(out / "manifest.json", _dump_json(manifest))


# --------------------------------------------------------------------------
# single runs
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    policy: str
    seed: int
    final_loss: float
    train_metric: float
    test_metric: float
    gap: float
    trajectory_csv: str


def _metrics(model: Model, w, train_ds: Dataset, test_ds: Dataset | None):
    regular = train_ds.take(train_ds.regular_rows)
    tr = float(np.mean(models.example_scores(model, w, regular)))
    if test_ds is None:
        return tr, math.nan, math.nan
    te = float(np.mean(models.example_scores(model, w, test_ds)))
    return tr, te, te - tr


def run_single(model: Model, data, config: TrainConfig, policy: ClippingPolicy, seed: int,
               eval_on_test: bool = True) -> RunResult:
    train_ds, test_ds = data(SeededRng(seed).split(STREAM_DATA))
    cfg = config.with_(policy=policy, seed=seed)
    traj = train(model, train_ds, cfg, eval_set=test_ds if eval_on_test else None)
    tr, te, gap = _metrics(model, traj.final_params, train_ds, test_ds)
    final_loss = traj.steps[-1].loss if traj.steps else math.nan
    return RunResult(policy.tag, seed, final_loss, tr, te, gap, traj.to_csv())


def _run_single_star(args):
    return run_single(*args)


def _run_many(jobs: list, parallel: int) -> list:
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_single_star, jobs))
    return [run_single(*j) for j in jobs]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, *, force: bool = False, parallel: int = 1) -> list:
    out = prepare_out(cfg.out, force)
    jobs = [(cfg.model, cfg.data, cfg.train, p, s) for p in cfg.policies for s in cfg.seeds]
    results = _run_many(jobs, parallel)
    summary = []
    for r in results:
        rel = Path(r.policy) / str(r.seed) / "trajectory.csv"
        _write(out / rel, r.trajectory_csv)
        summary.append({
            "policy": r.policy, "seed": r.seed, "trajectory": rel.as_posix(),
            "final_minibatch_loss": r.final_loss, "train_metric": r.train_metric,
            "test_metric": r.test_metric, "gap": r.gap,
        })
    _write(out / "summary.json", _dump_json({"runs": summary}))
    write_manifest(cfg, out, "train")
    return results


@dataclass
class SweepResult:
    rows: list
    selected_bound: float
    mean_test: dict


def run_sweep(cfg: ExperimentConfig, bounds=None, *, force: bool = False, parallel: int = 1,
              write: bool = True) -> SweepResult:
    """Train a baseline plus ``per_core`` at every bound; pick the bound with the lowest mean test metric."""
    bounds = list(cfg.sweep_bounds if bounds is None else bounds)
    if not bounds:
        raise ConfigError("need at least one bound", "sweep.bounds")
    for b in bounds:
        if not (isinstance(b, (int, float)) and b > 0 and math.isfinite(b)):
            raise ConfigError(f"bound {b!r} must be positive and finite", "sweep.bounds")
    if write:
        out = prepare_out(cfg.out, force)
    policies = [ClippingPolicy.none()] + [ClippingPolicy.per_core(b) for b in bounds]
    by_tag = {p.tag: p for p in policies}
    jobs = [(cfg.model, cfg.data, cfg.train, p, s) for p in policies for s in cfg.seeds]
    results = _run_many(jobs, parallel)
    mean_test = {}
    for p in policies:
        vals = [r.test_metric for r in results if r.policy == p.tag]
        mean_test[p.tag] = float(np.mean(vals))
    clipped = [p for p in policies if p.kind == "per_core"]
    if any(math.isnan(mean_test[p.tag]) for p in clipped):
        raise ConfigError("sweep needs a test set to rank bounds", "data.test_path")
    best = min(clipped, key=lambda p: (mean_test[p.tag], p.bound))
    rows = []
    for r in results:
        pol = by_tag[r.policy]
        rows.append({
            "policy": r.policy, "bound": pol.bound, "seed": r.seed,
            "train_metric": r.train_metric, "test_metric": r.test_metric, "gap": r.gap,
            "selected": pol.kind == "per_core" and pol.bound == best.bound,
        })
    result = SweepResult(rows, best.bound, mean_test)
    if write:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "bound", "seed", "train_metric", "test_metric", "gap", "selected"])
        for row in rows:
            w.writerow([row["policy"], "" if row["bound"] is None else fmt_float(row["bound"]),
                        row["seed"], fmt_float(row["train_metric"]), fmt_float(row["test_metric"]),
                        fmt_float(row["gap"]), int(row["selected"])])
        _write(out / "sweep.csv", buf.getvalue())
        ranking = sorted(mean_test.items(), key=lambda kv: kv[1])
        _write(out / "sweep_summary.json", _dump_json({
            "bounds": bounds, "selected_bound": best.bound,
            "ranking": [{"policy": k, "mean_test_metric": v} for k, v in ranking],
        }))
        write_manifest(cfg, out, "sweep")
    return result


def check_canary_budget(cfg: ExperimentConfig) -> None:
    """Reject settings whose canaries cannot fit into the run's minibatch slots."""
    ss, t = cfg.secret_sharer, cfg.train
    if max(ss.cohorts) > t.iterations:
        raise ConfigError(
            f"cohort k={max(ss.cohorts)} needs at least that many iterations, have {t.iterations}",
            "secret_sharer.cohorts")
    needed = ss.canaries_per_cohort * sum(ss.cohorts)
    slots = t.iterations * t.minibatch_size
    if needed > slots // 2:
        raise ConfigError(
            f"{needed} canary insertions would take over half of the {slots} minibatch slots",
            "secret_sharer.canaries_per_cohort")


def run_exposure(cfg: ExperimentConfig, *, force: bool = False, parallel: int = 1,
                 write: bool = True) -> ExposureReport:
    check_canary_budget(cfg)
    if write:
        out = prepare_out(cfg.out, force)
    report = run_secret_sharer(cfg.data, cfg.model, cfg.train, cfg.policies, cfg.seeds,
                               settings=cfg.secret_sharer, parallel=parallel)
    if write:
        _write(out / "exposure.csv", report.to_csv())
        _write(out / "exposure_table.txt", report.to_table())
        _write(out / "exposure.json", report.to_json() + "\n")
        write_manifest(cfg, out, "exposure")
    return report


GRADCHECK_KINDS = ("linear", "logistic", "mlp")


@dataclass
class GradcheckRow:
    kind: str
    draws: int
    max_rel_error: float
    passed: bool


def gradcheck_model(model: Model, draws: int, batch: int, eps: float, rng: SeededRng) -> float:
    worst = 0.0
    for _ in range(draws):
        w = rng.uniform(-1.0, 1.0, model.n_params)
        X = rng.normal((batch, model.dim))
        if model.is_classifier:
            y = rng.integers(model.n_classes, batch).astype(np.float64)
        else:
            y = rng.normal(batch)
        ds = Dataset(X, y)
        analytic = models.batch_gradient(model, w, ds)
        numeric = finite_diff_gradient(lambda v: models.mean_loss(model, v, ds), w, eps)
        worst = max(worst, relative_error(analytic, numeric, floor=1e-8))
    return worst


def run_gradcheck(cfg: ExperimentConfig, *, out: Path | None = None) -> list:
    g = cfg.gradcheck
    rows = []
    root = SeededRng(int(g["seed"]))
    for i, kind in enumerate(GRADCHECK_KINDS):
        model = Model(kind, int(g["dim"]), int(g["hidden"]), int(g["n_classes"]))
        try:
            err = gradcheck_model(model, int(g["draws"]), int(g["batch"]), float(g["eps"]),
                                  root.split(i))
        except OracleFailureError:
            err = math.inf
        rows.append(GradcheckRow(kind, int(g["draws"]), err,
                                 math.isfinite(err) and err <= float(g["tolerance"])))
    if out is not None:
        buf = io.StringIO()
        buf.write("model,draws,max_rel_error,passed\n")
        for r in rows:
            buf.write(f"{r.kind},{r.draws},{fmt_float(r.max_rel_error)},{int(r.passed)}\n")
        _write(Path(out) / "gradcheck.csv", buf.getvalue())
    return rows
