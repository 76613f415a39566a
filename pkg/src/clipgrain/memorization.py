"""Secret-Sharer style memorization audit.

Canaries are out-of-distribution examples with random labels. A cohort of
canaries is inserted ``k`` times each at random (step, slot) positions of the
training run. After training, each canary's score (per-example loss) is ranked
against a holdout set drawn from the same canary distribution but never
trained on:

    exposure = log2(N) - log2(rank),  rank = 1 + #{holdout strictly better}

so an unremarkable canary has exposure near ``1 / ln 2`` (about 1.44) and a
canary that beats every holdout example reaches ``log2(N)``.
"""

from __future__ import annotations

import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .clipping import ClippingPolicy
from .errors import ContractError, InvalidInputError, TrainingAbort
from .models import Dataset, Model, example_scores
from .numerics import SeededRng
from .trainer import CanarySchedule, TrainConfig, fmt_float, train

DEFAULT_COHORTS = (1, 2, 4, 8, 16)
DEFAULT_CANARIES_PER_COHORT = 20
DEFAULT_HOLDOUT_SIZE = 1024
DEFAULT_OFFSET = 5.0

# split indices of a seed's root stream (trainer owns 0 and 1)
STREAM_DATA = 2
STREAM_CANARIES = 3
STREAM_HOLDOUT = 4
STREAM_SCHEDULE = 5

REPORT_COLUMNS = ("policy", "cohort_k", "seed", "mean_exposure", "std_exposure",
                  "train_metric", "test_metric", "gap")


# --------------------------------------------------------------------------
# canaries
# --------------------------------------------------------------------------

def feature_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and std of the regular examples (std floored at 1e-12)."""
    X = ds.X[ds.regular_rows]
    return X.mean(axis=0), np.maximum(X.std(axis=0), 1e-12)


def generate_canaries(dim: int, count: int, rng: SeededRng, *, n_classes: int = 2,
                      offset: float = DEFAULT_OFFSET, spread: float = 1.0,
                      center=0.0, scale=1.0, id_start: int = 0,
                      cohort_id: int | None = None, is_canary: bool = True,
                      regression: bool = False) -> Dataset:
    """Draw ``count`` examples at ``center + scale * (offset + spread * z)``.

    ``center``/``scale`` are the training distribution's per-coordinate mean
    and std, so ``offset`` is measured in training standard deviations.
    Labels are uniform over ``n_classes`` (standard normal for regression).
    """
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    center = np.broadcast_to(np.asarray(center, dtype=np.float64), (dim,))
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (dim,))
    z = rng.normal((count, dim))
    X = center + scale * (offset + spread * z)
    if regression:
        y = rng.normal(count)
    else:
        y = rng.integers(n_classes, count).astype(np.float64)
    cohort = np.full(count, -1 if cohort_id is None else cohort_id, dtype=np.int64)
    return Dataset(X, y, np.arange(id_start, id_start + count), np.full(count, is_canary), cohort)


@dataclass
class CanaryCohort:
    cohort_id: int
    insertion_count: int
    canaries: Dataset
    schedule: list = field(default_factory=list)  # per canary: [(step, slot), ...]


def build_schedule(cohorts: Sequence[CanaryCohort], rows: Sequence[Sequence[int]],
                   iterations: int, minibatch_size: int, rng: SeededRng) -> CanarySchedule:
    """Place each canary of each cohort at ``k`` distinct random steps.

    ``rows[i][j]`` is the training-set row of canary ``j`` of cohort ``i``.
    Steps are drawn among those with a free slot and slots are uniform over
    the free ones (collisions are redrawn), so every canary ends up in
    exactly ``k`` minibatches. Fills ``cohort.schedule``.
    """
    sched = CanarySchedule()
    free = {}
    open_steps = list(range(1, iterations + 1))  # steps with at least one free slot
    for cohort, cohort_rows in zip(cohorts, rows):
        k = cohort.insertion_count
        if k > iterations:
            raise ContractError(f"cannot insert a canary {k} times in {iterations} steps")
        cohort.schedule = []
        for row in cohort_rows:
            if k > len(open_steps):
                raise ContractError(f"only {len(open_steps)} steps have room for another canary")
            placements = []
            steps = [open_steps[i] for i in rng.sample_distinct(len(open_steps), k)]
            for step in steps:
                while True:
                    slot = rng.randbelow(minibatch_size)
                    if not sched.taken(step, slot):
                        break
                sched.add(step, slot, row)
                free[step] = free.get(step, minibatch_size) - 1
                placements.append((step, slot))
            for step in steps:
                if free[step] == 0:
                    open_steps.remove(step)
            cohort.schedule.append(placements)
    return sched


# --------------------------------------------------------------------------
# edit-distance metrics
# --------------------------------------------------------------------------

def _encode(a, b) -> tuple[np.ndarray, np.ndarray]:
    vocab: dict = {}
    ea = np.array([vocab.setdefault(t, len(vocab)) for t in a], dtype=np.int64)
    eb = np.array([vocab.setdefault(t, len(vocab)) for t in b], dtype=np.int64)
    return ea, eb


def edit_distance(a, b) -> int:
    """Levenshtein distance between two token sequences (strings count as characters)."""
    ea, eb = _encode(a, b)
    return int(kernels.edit_distance_kernel(ea, eb))


def cer(hypothesis: str, reference: str) -> float:
    if len(reference) == 0:
        raise InvalidInputError("CER is undefined for an empty reference")
    return edit_distance(hypothesis, reference) / len(reference)


def wer(hypothesis: str, reference: str) -> float:
    ref = reference.split()
    if not ref:
        raise InvalidInputError("WER is undefined for an empty reference")
    return edit_distance(hypothesis.split(), ref) / len(ref)


# --------------------------------------------------------------------------
# exposure
# --------------------------------------------------------------------------

def exposures(canary_scores, holdout_scores) -> np.ndarray:
    """Vectorised exposure of many canaries against one holdout set."""
    h = np.sort(np.asarray(holdout_scores, dtype=np.float64))
    N = h.size
    if N < 2:
        raise InvalidInputError("holdout set needs at least 2 scores")
    c = np.atleast_1d(np.asarray(canary_scores, dtype=np.float64))
    ranks = 1 + np.searchsorted(h, c, side="left")
    ranks = np.clip(ranks, 1, N)
    return math.log2(N) - np.log2(ranks)


def exposure(canary_score: float, holdout_scores) -> float:
    return float(exposures([canary_score], holdout_scores)[0])


def generalization_gap(model: Model, w, train_set: Dataset, test_set: Dataset) -> tuple[float, float]:
    """``(mean train score, mean test score - mean train score)``."""
    if len(train_set) == 0 or len(test_set) == 0:
        raise InvalidInputError("both sets must be non-empty")
    tr = float(np.mean(example_scores(model, w, train_set)))
    te = float(np.mean(example_scores(model, w, test_set)))
    return tr, te - tr


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class ExposureRow:
    policy: str
    cohort_k: int
    seed: int
    mean_exposure: float
    std_exposure: float
    train_metric: float
    test_metric: float
    gap: float
    exposures: list = field(default_factory=list, repr=False)


@dataclass
class ExposureReport:
    rows: list
    holdout_size: int
    cohorts: tuple
    policies: tuple

    def cell(self, policy: str, k: int) -> np.ndarray:
        """All canary exposures for (policy, k), pooled over seeds."""
        vals = [e for r in self.rows if r.policy == policy and r.cohort_k == k for e in r.exposures]
        return np.asarray(vals)

    def mean_exposure(self, policy: str, k: int) -> float:
        return float(self.cell(policy, k).mean())

    def summary(self) -> list:
        """One aggregated row per (policy, k), pooling canaries over all seeds."""
        out = []
        for p in self.policies:
            prow = [r for r in self.rows if r.policy == p]
            per_seed = {r.seed: r for r in prow}.values()
            for k in self.cohorts:
                vals = self.cell(p, k)
                out.append(ExposureRow(
                    p, k, -1, float(vals.mean()), float(vals.std()),
                    float(np.mean([r.train_metric for r in per_seed])),
                    float(np.mean([r.test_metric for r in per_seed])),
                    float(np.mean([r.gap for r in per_seed])),
                ))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(REPORT_COLUMNS) + "\n")
        for r in list(self.rows) + self.summary():
            seed = "all" if r.seed < 0 else str(r.seed)
            buf.write(",".join([
                r.policy, str(r.cohort_k), seed, fmt_float(r.mean_exposure),
                fmt_float(r.std_exposure), fmt_float(r.train_metric),
                fmt_float(r.test_metric), fmt_float(r.gap),
            ]) + "\n")
        return buf.getvalue()

    def to_table(self) -> str:
        """Policies as rows, insertion counts as columns, cells ``mean ± std``."""
        head = ["Canary #Insertion"] + [str(k) for k in self.cohorts]
        body = []
        for s in _chunk(self.summary(), len(self.cohorts)):
            body.append([s[0].policy] + [f"{r.mean_exposure:.2f} ± {r.std_exposure:.2f}" for r in s])
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        lines = [" | ".join(c.ljust(w) for c, w in zip(head, widths))]
        lines.append("-+-".join("-" * w for w in widths))
        lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "holdout_size": self.holdout_size,
            "cohorts": list(self.cohorts),
            "policies": list(self.policies),
            "rows": [asdict(r) for r in self.rows],
        }, indent=2, sort_keys=True)


def _chunk(seq, n):
    return [seq[i:i + n] for i in range(0, len(seq), n)]


# --------------------------------------------------------------------------
# harness
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CanarySettings:
    cohorts: tuple = DEFAULT_COHORTS
    canaries_per_cohort: int = DEFAULT_CANARIES_PER_COHORT
    holdout_size: int = DEFAULT_HOLDOUT_SIZE
    offset: float = DEFAULT_OFFSET
    spread: float = 1.0


def _resolve_data(base_dataset, test_set, seed):
    if callable(base_dataset):
        return base_dataset(SeededRng(seed).split(STREAM_DATA))
    return base_dataset, test_set


def _secret_sharer_seed(model: Model, config: TrainConfig, policies, settings: CanarySettings,
                        base_dataset, test_set, seed: int) -> list:
    base, test = _resolve_data(base_dataset, test_set, seed)
    root = SeededRng(seed)
    center, scale = feature_stats(base)
    next_id = int(base.ids.max()) + 1
    can_rng = root.split(STREAM_CANARIES)
    cohorts, parts = [], []
    for ci, k in enumerate(settings.cohorts):
        ds = generate_canaries(
            model.dim, settings.canaries_per_cohort, can_rng, n_classes=model.n_classes,
            offset=settings.offset, spread=settings.spread, center=center, scale=scale,
            id_start=next_id, cohort_id=ci, regression=not model.is_classifier)
        next_id += len(ds)
        cohorts.append(CanaryCohort(ci, int(k), ds))
        parts.append(ds)
    holdout = generate_canaries(
        model.dim, settings.holdout_size, root.split(STREAM_HOLDOUT), n_classes=model.n_classes,
        offset=settings.offset, spread=settings.spread, center=center, scale=scale,
        id_start=next_id, is_canary=False, regression=not model.is_classifier)
    train_ds = Dataset.concat([base] + parts)
    rows, start = [], len(base)
    for ds in parts:
        rows.append(list(range(start, start + len(ds))))
        start += len(ds)
    sched = build_schedule(cohorts, rows, config.iterations, config.minibatch_size,
                           root.split(STREAM_SCHEDULE))
    regular = base.take(base.regular_rows)

    out = []
    for policy in policies:
        cfg = config.with_(policy=policy, seed=seed)
        try:
            traj = train(model, train_ds, cfg, canary_schedule=sched)
        except TrainingAbort as exc:
            raise TrainingAbort(f"policy {policy.tag}: {exc}", exc.step, exc.core, policy.tag) from exc
        w = traj.final_params
        seen = np.concatenate([r.sampled_ids for r in traj.steps]) if traj.steps else np.empty(0, np.int64)
        ids, counts = np.unique(seen, return_counts=True)
        hits = dict(zip(ids.tolist(), counts.tolist()))
        h_scores = example_scores(model, w, holdout)
        tr = float(np.mean(example_scores(model, w, regular)))
        te = float(np.mean(example_scores(model, w, test))) if test is not None else math.nan
        for cohort in cohorts:
            for cid in cohort.canaries.ids.tolist():
                if hits.get(cid, 0) != cohort.insertion_count:
                    raise ContractError(
                        f"canary {cid} seen {hits.get(cid, 0)} times, expected {cohort.insertion_count}")
            e = exposures(example_scores(model, w, cohort.canaries), h_scores)
            out.append(ExposureRow(policy.tag, cohort.insertion_count, seed, float(e.mean()),
                                   float(e.std()), tr, te, te - tr, e.tolist()))
    return out


def run_secret_sharer(base_dataset: Dataset | Callable, model: Model, train_config: TrainConfig,
                      policies: Sequence[ClippingPolicy], seeds: Sequence[int], *,
                      settings: CanarySettings = CanarySettings(), test_set: Dataset | None = None,
                      parallel: int = 1) -> ExposureReport:
    """Insert canary cohorts, train once per policy and seed, and score exposure.

    ``base_dataset`` is either a fixed training set or a callable taking the
    seed's data stream and returning ``(train, test)``; the latter gives each
    seed its own draw. The same canaries, holdout set and schedule are used
    for every policy of a seed so that policies are compared on equal terms.
    """
    if not settings.cohorts:
        raise InvalidInputError("need at least one cohort")
    if not seeds:
        raise InvalidInputError("need at least one seed")
    if settings.holdout_size < 2:
        raise InvalidInputError("holdout_size must be >= 2")
    policies = [ClippingPolicy.from_dict(p) for p in policies]
    args = [(model, train_config, policies, settings, base_dataset, test_set, int(s)) for s in seeds]
    if parallel > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            chunks = list(pool.map(_run_seed_star, args))
    else:
        chunks = [_secret_sharer_seed(*a) for a in args]
    rows = [r for chunk in chunks for r in chunk]
    return ExposureReport(rows, settings.holdout_size, tuple(settings.cohorts),
                          tuple(p.tag for p in policies))


def _run_seed_star(a):
    return _secret_sharer_seed(*a)
