"""Toy models with analytic per-example gradients, plus the dataset containers.

Three model kinds are supported:

``linear``
    scalar least squares, loss ``0.5 * (pred - y) ** 2``
``logistic``
    multinomial logistic regression (softmax cross-entropy, ``n_classes >= 2``)
``mlp``
    one tanh hidden layer of width ``hidden`` followed by a softmax head

Per-core gradients are *means* over the examples of a shard, accumulated in
ascending example-id order so that the result does not depend on the order
the examples arrive in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DatasetFormatError, DimensionError
from .numerics import SeededRng

MODEL_KINDS = ("linear", "logistic", "mlp")


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Example:
    features: np.ndarray
    target: float
    id: int
    is_canary: bool = False
    cohort_id: int | None = None


class Dataset:
    """Column-oriented example store.

    ``X`` is ``(n, dim)`` float64, ``y`` holds regression targets or class
    indices (as float64), ``ids`` are unique int64 identifiers. ``cohort``
    uses -1 for "no cohort".
    """

    def __init__(self, X, y, ids=None, is_canary=None, cohort=None, unique_ids: bool = True):
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DimensionError("features must be a 2-D array")
        n = X.shape[0]
        self.X = X
        self.y = np.ascontiguousarray(y, dtype=np.float64).reshape(n)
        self.ids = (np.arange(n, dtype=np.int64) if ids is None
                    else np.ascontiguousarray(ids, dtype=np.int64).reshape(n))
        self.is_canary = (np.zeros(n, dtype=bool) if is_canary is None
                          else np.asarray(is_canary, dtype=bool).reshape(n))
        self.cohort = (np.full(n, -1, dtype=np.int64) if cohort is None
                       else np.asarray(cohort, dtype=np.int64).reshape(n))
        if unique_ids and np.unique(self.ids).size != n:
            raise DatasetFormatError("example ids must be unique within a dataset")
        self._regular_rows: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Example:
        c = int(self.cohort[i])
        return Example(self.X[i].copy(), float(self.y[i]), int(self.ids[i]),
                       bool(self.is_canary[i]), None if c < 0 else c)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def regular_rows(self) -> np.ndarray:
        """Row indices of non-canary examples (the uniform sampling pool)."""
        if self._regular_rows is None:
            self._regular_rows = np.flatnonzero(~self.is_canary)
        return self._regular_rows

    def take(self, rows) -> "Dataset":
        """Sub-dataset of the given rows. Repeated rows are allowed (a sampled batch)."""
        rows = np.asarray(rows, dtype=np.int64)
        out = Dataset.__new__(Dataset)
        out.X = self.X[rows]
        out.y = self.y[rows]
        out.ids = self.ids[rows]
        out.is_canary = self.is_canary[rows]
        out.cohort = self.cohort[rows]
        out._regular_rows = None
        return out

    def labels(self) -> np.ndarray:
        return self.y.astype(np.int64)

    @classmethod
    def from_examples(cls, examples: Sequence[Example], unique_ids: bool = True) -> "Dataset":
        if not examples:
            raise DatasetFormatError("cannot build a dataset from zero examples")
        dims = {np.asarray(e.features).size for e in examples}
        if len(dims) != 1:
            raise DatasetFormatError(f"ragged feature rows: dimensions {sorted(dims)}")
        X = np.array([np.asarray(e.features, dtype=np.float64) for e in examples])
        return cls(
            X,
            [e.target for e in examples],
            [e.id for e in examples],
            [e.is_canary for e in examples],
            [-1 if e.cohort_id is None else e.cohort_id for e in examples],
            unique_ids=unique_ids,
        )

    @classmethod
    def concat(cls, parts: Iterable["Dataset"]) -> "Dataset":
        parts = list(parts)
        return cls(
            np.vstack([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.is_canary for p in parts]),
            np.concatenate([p.cohort for p in parts]),
        )


def _as_batch(batch) -> Dataset:
    if isinstance(batch, Dataset):
        return batch
    if isinstance(batch, Example):
        return Dataset.from_examples([batch])
    # a batch may repeat an example, a dataset may not
    return Dataset.from_examples(list(batch), unique_ids=False)


# --------------------------------------------------------------------------
# dataset file format (JSON lines)
# --------------------------------------------------------------------------

def _fmt(x: float) -> float | int:
    return float(format(x, ".17g"))


def save_dataset(ds: Dataset, path) -> None:
    """Write one JSON object per line: id, features, target, is_canary, cohort_id."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(ds)):
            c = int(ds.cohort[i])
            rec = {
                "id": int(ds.ids[i]),
                "features": [_fmt(v) for v in ds.X[i]],
                "target": _fmt(ds.y[i]),
                "is_canary": bool(ds.is_canary[i]),
                "cohort_id": None if c < 0 else c,
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    rows = []
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
                feats = [float(v) for v in rec["features"]]
                ex = Example(
                    np.array(feats),
                    float(rec["target"]),
                    int(rec["id"]),
                    bool(rec.get("is_canary", False)),
                    rec.get("cohort_id"),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: bad record ({exc})") from exc
            if rows and ex.features.size != rows[0].features.size:
                raise DatasetFormatError(
                    f"{path}:{lineno}: ragged row, expected {rows[0].features.size} "
                    f"features, got {ex.features.size}")
            if not np.isfinite(ex.features).all() or not math.isfinite(ex.target):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite value")
            rows.append(ex)
    if not rows:
        raise DatasetFormatError(f"{path}: no examples")
    return Dataset.from_examples(rows)


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    shape: tuple
    fan_in: int
    is_bias: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass(frozen=True)
class Model:
    kind: str
    dim: int
    hidden: int = 0
    n_classes: int = 2
    layout: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}", "model.kind")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1", "model.dim")
        if self.kind != "linear" and self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2", "model.n_classes")
        if self.kind == "mlp" and self.hidden < 1:
            raise ConfigError("hidden must be >= 1 for mlp", "model.hidden")
        d, h, K = self.dim, self.hidden, self.n_classes
        if self.kind == "linear":
            shapes = [("W", (d,), d, False), ("b", (1,), d, True)]
        elif self.kind == "logistic":
            shapes = [("W", (d, K), d, False), ("b", (K,), d, True)]
        else:
            shapes = [("W1", (d, h), d, False), ("b1", (h,), d, True),
                      ("W2", (h, K), h, False), ("b2", (K,), h, True)]
        segs, start = [], 0
        for name, shape, fan_in, is_bias in shapes:
            seg = Segment(name, start, shape, fan_in, is_bias)
            segs.append(seg)
            start = seg.stop
        object.__setattr__(self, "layout", tuple(segs))

    @property
    def n_params(self) -> int:
        return self.layout[-1].stop

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear"

    def unpack(self, w) -> dict:
        w = np.asarray(w, dtype=np.float64)
        return {s.name: w[s.start:s.stop].reshape(s.shape) for s in self.layout}


def init_params(model: Model, rng: SeededRng) -> np.ndarray:
    """Weights uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, biases zero."""
    w = np.zeros(model.n_params)
    for seg in model.layout:
        if seg.is_bias:
            continue
        lim = 1.0 / math.sqrt(seg.fan_in)
        w[seg.start:seg.stop] = rng.uniform(-lim, lim, seg.size)
    return w


def _check(model: Model, w: np.ndarray, batch: Dataset) -> None:
    if w.shape != (model.n_params,):
        raise DimensionError(f"expected {model.n_params} parameters, got {w.size}")
    if batch.dim != model.dim:
        raise DimensionError(f"model expects dim {model.dim}, batch has {batch.dim}")
    if model.is_classifier:
        lab = batch.y
        if lab.size and (lab.min() < 0 or lab.max() >= model.n_classes
                         or not np.array_equal(lab, np.floor(lab))):
            raise DimensionError("class targets must be integers in [0, n_classes)")


def per_example(model: Model, w, batch, want_grad: bool = True):
    """Per-example losses ``(n,)`` and gradients ``(n, n_params)`` in batch order."""
    batch = _as_batch(batch)
    w = np.ascontiguousarray(w, dtype=np.float64)
    _check(model, w, batch)
    if model.kind == "linear":
        return kernels.linear_pe(w, batch.X, batch.y, want_grad)
    if model.kind == "logistic":
        return kernels.logistic_pe(w, batch.X, batch.labels(), model.n_classes, want_grad)
    return kernels.mlp_pe(w, batch.X, batch.labels(), model.hidden, model.n_classes, want_grad)


def example_losses(model: Model, w, batch) -> np.ndarray:
    return per_example(model, w, batch, want_grad=False)[0]


def example_loss(model: Model, w, ex: Example) -> float:
    return float(example_losses(model, w, ex)[0])


def example_score(model: Model, w, ex) -> float:
    """Exposure-ranking metric. Lower means the model fits the example better."""
    return example_loss(model, w, ex)


def example_scores(model: Model, w, batch) -> np.ndarray:
    return example_losses(model, w, batch)


def mean_of_rows(G: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Mean of the rows of ``G`` summed in ascending-id order."""
    if G.shape[0] == 0:
        raise ContractError("cannot average zero gradients")
    order = np.argsort(ids, kind="stable")
    return kernels.accumulate_rows(G, order) / G.shape[0]


def batch_gradient(model: Model, w, batch) -> np.ndarray:
    """Mean per-example gradient over a non-empty batch."""
    batch = _as_batch(batch)
    if len(batch) == 0:
        raise ContractError("batch_gradient needs a non-empty batch")
    _, G = per_example(model, w, batch)
    return mean_of_rows(G, batch.ids)


def mean_loss(model: Model, w, batch) -> float:
    return float(np.mean(example_losses(model, w, batch)))


# --------------------------------------------------------------------------
# synthetic teacher tasks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TeacherTask:
    """Gaussian features labelled by a random linear teacher.

    Classification labels are ``argmax(x @ W_teacher)`` with a fraction
    ``label_noise`` replaced by uniformly random classes; regression targets
    are ``x @ w_teacher`` plus Gaussian noise of std ``label_noise``.
    Features are ``feature_scale * N(0, I)``.
    """

    kind: str
    dim: int
    n_classes: int = 2
    label_noise: float = 0.0
    feature_scale: float = 1.0

    def teacher(self, rng: SeededRng) -> np.ndarray:
        cols = 1 if self.kind == "linear" else self.n_classes
        return rng.normal((self.dim, cols))

    def draw(self, teacher: np.ndarray, n: int, rng: SeededRng, id_start: int = 0) -> Dataset:
        X = self.feature_scale * rng.normal((n, self.dim))
        if self.kind == "linear":
            y = (X @ teacher)[:, 0] / self.feature_scale
            if self.label_noise > 0:
                y = y + self.label_noise * rng.normal(n)
        else:
            y = np.argmax(X @ teacher, axis=1).astype(np.float64)
            for i in range(n):
                if self.label_noise > 0 and rng.random() < self.label_noise:
                    y[i] = rng.randbelow(self.n_classes)
        return Dataset(X, y, np.arange(id_start, id_start + n))

    def make_split(self, n_train: int, n_test: int, rng: SeededRng) -> tuple[Dataset, Dataset]:
        teacher = self.teacher(rng.split(0))
        train = self.draw(teacher, n_train, rng.split(1), id_start=0)
        test = self.draw(teacher, n_test, rng.split(2), id_start=n_train)
        return train, test
