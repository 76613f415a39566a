"""Data-parallel minibatch SGD over simulated cores.

Each step samples ``B * C`` examples, splits them into ``C`` contiguous
shards, computes one shard-mean gradient per core, applies the clipping
policy, sums the clipped gradients in core-index order and takes a plain SGD
step ``w <- w - lr * g``.

Cores are logical. All per-example gradients of a step come from a single
kernel call, and the reduction order is fixed, so results do not depend on
scheduling.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .clipping import ClippingPolicy, PerCoreGradient, apply_policy
from .errors import ConfigError, ContractError, TrainingAbort
from .models import Dataset, Model, example_losses, init_params, mean_of_rows, per_example
from .numerics import SeededRng, _norm_unchecked, axpy

TRAJECTORY_SCHEMA = "clipgrain-trajectory/1"
TRAJECTORY_COLUMNS = ("step", "loss", "min_core_norm", "max_core_norm",
                      "applied_bound", "agg_grad_norm")

# split indices of a run's root stream
STREAM_INIT = 0
STREAM_SAMPLING = 1


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    cores: int
    per_core_batch: int
    learning_rate: float
    policy: ClippingPolicy = field(default_factory=ClippingPolicy.none)
    seed: int = 0
    eval_every: int = 0
    full_batch: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("must be >= 0", "train.iterations")
        if self.cores < 1:
            raise ConfigError("must be >= 1", "train.cores")
        if self.per_core_batch < 1:
            raise ConfigError("must be >= 1", "train.per_core_batch")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("must be a positive finite number", "train.learning_rate")
        if self.eval_every < 0:
            raise ConfigError("must be >= 0", "train.eval_every")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("must fit in 64 unsigned bits", "seed")
        self.policy.validate_for(self.per_core_batch)

    @property
    def minibatch_size(self) -> int:
        return self.per_core_batch * self.cores

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class StepRecord:
    step: int
    core_norms: np.ndarray
    applied_bound: float | None
    agg_grad_norm: float
    loss: float
    sampled_ids: np.ndarray


@dataclass
class TrainTrajectory:
    steps: list
    init_params: np.ndarray
    final_params: np.ndarray
    eval_snapshots: list = field(default_factory=list)
    params_history: list | None = None

    def __len__(self) -> int:
        return len(self.steps)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {TRAJECTORY_SCHEMA}\n")
        buf.write(",".join(TRAJECTORY_COLUMNS) + "\n")
        for r in self.steps:
            bound = "" if r.applied_bound is None else fmt_float(r.applied_bound)
            buf.write(",".join([
                str(r.step), fmt_float(r.loss), fmt_float(float(r.core_norms.min())),
                fmt_float(float(r.core_norms.max())), bound, fmt_float(r.agg_grad_norm),
            ]) + "\n")
        return buf.getvalue()

    def occurrences(self, example_id: int) -> int:
        return int(sum(np.count_nonzero(r.sampled_ids == example_id) for r in self.steps))


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


class CanarySchedule:
    """Placements ``step -> [(slot, row)]`` that override sampled minibatch slots.

    Steps are 1-based like the training loop; ``row`` indexes the dataset
    being trained on.
    """

    def __init__(self, placements: dict | None = None):
        self._by_step: dict[int, list] = {}
        for step, items in (placements or {}).items():
            for slot, row in items:
                self.add(step, slot, row)

    def add(self, step: int, slot: int, row: int) -> None:
        items = self._by_step.setdefault(int(step), [])
        if any(s == slot for s, _ in items):
            raise ContractError(f"slot {slot} at step {step} already taken")
        items.append((int(slot), int(row)))

    def at(self, step: int) -> list:
        return self._by_step.get(step, [])

    def taken(self, step: int, slot: int) -> bool:
        return any(s == slot for s, _ in self._by_step.get(step, ()))

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_step.values())

    def steps(self) -> list:
        return sorted(self._by_step)


def sample_minibatch(dataset: Dataset, B: int, C: int, rng: SeededRng,
                     canary_schedule: CanarySchedule | None = None,
                     step: int | None = None) -> np.ndarray:
    """Row indices of a ``B * C`` minibatch drawn uniformly with replacement.

    Only non-canary rows are drawn; scheduled canaries then overwrite their
    slots for ``step``.
    """
    pool = dataset.regular_rows
    if pool.size == 0:
        raise ContractError("dataset has no regular (non-canary) examples to sample")
    n = B * C
    rows = pool[rng.integers(pool.size, n)]
    if canary_schedule is not None and step is not None:
        for slot, row in canary_schedule.at(step):
            if not 0 <= slot < n:
                raise ContractError(f"canary slot {slot} outside minibatch of {n}")
            rows[slot] = row
    return rows


def shard(minibatch, B: int, C: int) -> list:
    """Split into ``C`` contiguous shards; shard ``c`` holds positions ``[B*c, B*(c+1))``."""
    if len(minibatch) != B * C:
        raise ContractError(f"minibatch has {len(minibatch)} items, expected {B * C}")
    return [minibatch[B * c:B * (c + 1)] for c in range(C)]


def train_step(model: Model, w: np.ndarray, minibatch: Dataset, config: TrainConfig,
               step: int = 0):
    """One SGD step. Returns ``(new_w, StepRecord)``."""
    B, C = config.per_core_batch, config.cores
    if len(minibatch) != B * C:
        raise ContractError(f"minibatch has {len(minibatch)} examples, expected {B * C}")
    losses, G = per_example(model, w, minibatch)
    per_core, sorted_rows = [], []
    for c in range(C):
        lo, hi = B * c, B * (c + 1)
        ids = minibatch.ids[lo:hi]
        g = mean_of_rows(G[lo:hi], ids)
        if not np.isfinite(g).all():
            raise TrainingAbort(
                f"non-finite gradient on core {c} at step {step}", step=step, core=c,
                policy=config.policy.tag)
        per_core.append(PerCoreGradient(c, g, _norm_unchecked(g)))
        if config.policy.needs_per_example:
            sorted_rows.append(G[lo:hi][np.argsort(ids, kind="stable")])
    clipped = apply_policy(config.policy, per_core,
                           sorted_rows if config.policy.needs_per_example else None)
    g_t = kernels.accumulate_rows(np.asarray(clipped.grads), np.arange(C))
    new_w = axpy(-config.learning_rate, g_t, w)
    record = StepRecord(
        step=step,
        core_norms=np.array([g.norm for g in per_core]),
        applied_bound=clipped.applied_bound,
        agg_grad_norm=_norm_unchecked(g_t),
        loss=float(np.mean(losses)),
        sampled_ids=minibatch.ids.copy(),
    )
    return new_w, record


def train(model: Model, dataset: Dataset, config: TrainConfig,
          canary_schedule: CanarySchedule | None = None,
          eval_set: Dataset | None = None, keep_params: bool = False) -> TrainTrajectory:
    """Run ``config.iterations`` steps from fresh parameters.

    The run is a pure function of ``(config, dataset, canary_schedule)``:
    initial weights come from ``split(0)`` of the seed and minibatch sampling
    from ``split(1)``.

    With ``full_batch=True`` every step uses all regular examples in id
    order (``B * C`` must equal their count); this is deterministic gradient
    descent, used for loss-monotonicity checks.
    """
    root = SeededRng(config.seed)
    w = init_params(model, root.split(STREAM_INIT))
    sampler = root.split(STREAM_SAMPLING)
    w0 = w.copy()
    if config.full_batch:
        pool = dataset.regular_rows
        if pool.size != config.minibatch_size:
            raise ConfigError(
                f"full_batch needs per_core_batch*cores == {pool.size}", "train.full_batch")
        full_rows = pool[np.argsort(dataset.ids[pool], kind="stable")]
    history = [w0] if keep_params else None
    steps, snaps = [], []
    for t in range(1, config.iterations + 1):
        if config.full_batch:
            rows = full_rows
        else:
            rows = sample_minibatch(dataset, config.per_core_batch, config.cores, sampler,
                                    canary_schedule, t)
        w, rec = train_step(model, w, dataset.take(rows), config, step=t)
        steps.append(rec)
        if keep_params:
            history.append(w)
        if eval_set is not None and config.eval_every and t % config.eval_every == 0:
            snaps.append((t, float(np.mean(example_losses(model, w, eval_set)))))
    return TrainTrajectory(steps, w0, w, snaps, history)
