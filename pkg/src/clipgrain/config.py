"""Experiment configuration: a TOML file plus command-line overrides.

Precedence, highest first: explicit flags (``--seeds``, ``--out``,
``--set key=value``), the ``CLIPGRAIN_SEED`` environment variable (seeds
only), the config file, built-in defaults.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .clipping import ClippingPolicy
from .errors import ConfigError
from .memorization import CanarySettings
from .models import Dataset, Model, TeacherTask, load_dataset
from .trainer import TrainConfig

SEED_ENV = "CLIPGRAIN_SEED"
DEFAULT_BOUND_GRID = (1.0, 2.5, 5.0, 10.0, 100.0)

DEFAULTS: dict = {
    "seeds": [0],
    "out": "runs/default",
    "model": {"kind": "mlp", "hidden": 16, "n_classes": 2},
    "data": {
        "path": None,
        "test_path": None,
        "n_train": 256,
        "n_test": 1024,
        "dim": 8,
        "label_noise": 0.1,
        "feature_scale": 1.0,
    },
    "train": {
        "iterations": 500,
        "cores": 4,
        "per_core_batch": 4,
        "learning_rate": 0.05,
        "eval_every": 0,
        "full_batch": False,
    },
    "policies": [{"kind": "none"}, {"kind": "per_core", "bound": 2.5}, {"kind": "adaptive"}],
    "secret_sharer": {
        "cohorts": [1, 2, 4, 8, 16],
        "canaries_per_cohort": 20,
        "holdout_size": 1024,
        "offset": 5.0,
        "spread": 1.0,
    },
    "sweep": {"bounds": list(DEFAULT_BOUND_GRID)},
    "gradcheck": {
        "draws": 100,
        "tolerance": 1e-5,
        "eps": 1e-5,
        "dim": 4,
        "hidden": 5,
        "n_classes": 3,
        "batch": 3,
        "seed": 0,
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError("unknown key", where)
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError("expected a table", where)
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


def _parse_scalar(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as a TOML literal when possible."""
    key, sep, value = assignment.partition("=")
    if not sep:
        raise ConfigError(f"override {assignment!r} is not key=value", "--set")
    parts = key.strip().split(".")
    node = raw
    for i, part in enumerate(parts[:-1]):
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError("unknown key", ".".join(parts[:i + 1]))
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError("unknown key", key.strip())
    node[parts[-1]] = _parse_scalar(value.strip())


def parse_seed_list(text: str, where: str) -> list:
    try:
        seeds = [int(s) for s in str(text).replace(" ", "").split(",") if s]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}", where) from exc
    if not seeds:
        raise ConfigError("seed list is empty", where)
    return seeds


@dataclass(frozen=True)
class SyntheticData:
    """Picklable per-seed data factory: ``factory(rng) -> (train, test)``."""

    task: TeacherTask
    n_train: int
    n_test: int

    def __call__(self, rng):
        return self.task.make_split(self.n_train, self.n_test, rng)


@dataclass(frozen=True)
class FileData:
    train: Dataset
    test: Dataset | None

    def __call__(self, rng):
        return self.train, self.test


@dataclass
class ExperimentConfig:
    raw: dict
    model: Model
    data: object
    train: TrainConfig
    policies: list
    secret_sharer: CanarySettings
    sweep_bounds: list
    seeds: list
    out: Path
    gradcheck: dict

    def resolved(self) -> dict:
        """Fully resolved settings, as written to the manifest."""
        raw = copy.deepcopy(self.raw)
        raw["seeds"] = list(self.seeds)
        raw["out"] = str(self.out)
        raw["model"]["dim"] = self.model.dim
        raw["policies"] = [p.to_dict() for p in self.policies]
        return raw


def _positive_int(v, where):
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(f"expected a positive integer, got {v!r}", where)
    return v


def _number(v, where, positive=True):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", where)
    if positive and not v > 0:
        raise ConfigError(f"expected a positive number, got {v!r}", where)
    return float(v)


def build_config(raw_file: dict | None = None, *, overrides=(), seeds=None, out=None,
                 env=None, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate everything up front and return the resolved configuration."""
    env = os.environ if env is None else env
    raw = _merge(DEFAULTS, raw_file or {})
    for item in overrides:
        apply_override(raw, item)

    if seeds is not None:
        seed_list = parse_seed_list(seeds, "--seeds")
    elif env.get(SEED_ENV):
        seed_list = parse_seed_list(env[SEED_ENV], SEED_ENV)
    else:
        if not isinstance(raw["seeds"], list) or not raw["seeds"]:
            raise ConfigError("expected a non-empty list", "seeds")
        seed_list = [int(s) for s in raw["seeds"]]
    for s in seed_list:
        if not 0 <= s < 2 ** 64:
            raise ConfigError(f"seed {s} does not fit in 64 unsigned bits", "seeds")

    d = raw["data"]
    base_dir = base_dir or Path.cwd()
    if d["path"]:
        train_ds = load_dataset(base_dir / d["path"])
        test_ds = load_dataset(base_dir / d["test_path"]) if d["test_path"] else None
        if test_ds is not None and test_ds.dim != train_ds.dim:
            raise ConfigError("test set dimension differs from training set", "data.test_path")
        dim = train_ds.dim
        data = FileData(train_ds, test_ds)
    else:
        dim = _positive_int(d["dim"], "data.dim")
        m = raw["model"]
        if not 0 <= _number(d["label_noise"], "data.label_noise", positive=False) <= (
                1 if m["kind"] != "linear" else float("inf")):
            raise ConfigError("label_noise out of range", "data.label_noise")
        task = TeacherTask(m["kind"], dim, int(m["n_classes"]), float(d["label_noise"]),
                           _number(d["feature_scale"], "data.feature_scale"))
        data = SyntheticData(task, _positive_int(d["n_train"], "data.n_train"),
                             _positive_int(d["n_test"], "data.n_test"))

    m = raw["model"]
    model = Model(m["kind"], dim, int(m.get("hidden") or 0), int(m["n_classes"]))

    t = raw["train"]
    if not isinstance(t["iterations"], int) or t["iterations"] < 0:
        raise ConfigError("expected a non-negative integer", "train.iterations")
    train_cfg = TrainConfig(
        iterations=t["iterations"],
        cores=_positive_int(t["cores"], "train.cores"),
        per_core_batch=_positive_int(t["per_core_batch"], "train.per_core_batch"),
        learning_rate=_number(t["learning_rate"], "train.learning_rate"),
        seed=seed_list[0],
        eval_every=int(t["eval_every"]),
        full_batch=bool(t["full_batch"]),
    )

    if not isinstance(raw["policies"], list) or not raw["policies"]:
        raise ConfigError("expected a non-empty list of policy tables", "policies")
    policies = []
    for i, p in enumerate(raw["policies"]):
        try:
            pol = ClippingPolicy.from_dict(p)
            pol.validate_for(train_cfg.per_core_batch)
        except ConfigError as exc:
            raise ConfigError(str(exc), f"policies[{i}]") from exc
        policies.append(pol)
    tags = [p.tag for p in policies]
    if len(set(tags)) != len(tags):
        raise ConfigError(f"duplicate policies {tags}", "policies")

    ss = raw["secret_sharer"]
    cohorts = ss["cohorts"]
    if not isinstance(cohorts, list) or not cohorts:
        raise ConfigError("expected a non-empty list", "secret_sharer.cohorts")
    for k in cohorts:
        _positive_int(k, "secret_sharer.cohorts")
    if ss["holdout_size"] < 2:
        raise ConfigError("must be >= 2", "secret_sharer.holdout_size")
    settings = CanarySettings(
        tuple(cohorts), _positive_int(ss["canaries_per_cohort"], "secret_sharer.canaries_per_cohort"),
        _positive_int(ss["holdout_size"], "secret_sharer.holdout_size"),
        _number(ss["offset"], "secret_sharer.offset", positive=False),
        _number(ss["spread"], "secret_sharer.spread"),
    )

    bounds = raw["sweep"]["bounds"]
    if not isinstance(bounds, list):
        raise ConfigError("expected a list", "sweep.bounds")
    bounds = [_number(b, "sweep.bounds") for b in bounds]

    return ExperimentConfig(raw, model, data, train_cfg, policies, settings, bounds, seed_list,
                            Path(out if out is not None else raw["out"]), dict(raw["gradcheck"]))


def load_config(path=None, **kwargs) -> ExperimentConfig:
    raw = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found", "--config") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}", "--config") from exc
        base_dir = path.parent
    return build_config(raw, base_dir=base_dir, **kwargs)
