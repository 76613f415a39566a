"""Clipping policies applied to per-core gradients before aggregation.

``none``
    pass-through
``per_core``
    each core's shard-mean gradient is scaled to norm ``min(norm, bound)``
``adaptive``
    the bound for the step is the smallest per-core norm, so every core ends
    up with that norm
``per_example`` / ``micro_batch``
    clip each example (or each run of ``micro_size`` examples) inside a core,
    then average the clipped pieces back into one per-core gradient

Micro-batches never span cores. Inside a core, examples are ordered by id
before they are grouped, so ``per_example`` is exactly ``micro_batch`` with
``micro_size == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError
from .numerics import _norm_unchecked, as_vector, l2_norm

POLICY_KINDS = ("none", "per_core", "adaptive", "per_example", "micro_batch")
_ALIASES = {"pcc": "per_core", "apcc": "adaptive", "adaptive_per_core": "adaptive",
            "pec": "per_example", "baseline": "none", "microbatch": "micro_batch"}


def _short(x: float) -> str:
    text = repr(float(x))
    return text[:-2] if text.endswith(".0") else text


@dataclass(frozen=True)
class ClippingPolicy:
    kind: str = "none"
    bound: float | None = None
    micro_size: int | None = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}", "policy.kind")
        if kind in ("per_core", "per_example", "micro_batch"):
            if self.bound is None or not self.bound > 0:
                raise ConfigError("bound must be a positive number", "policy.bound")
            object.__setattr__(self, "bound", float(self.bound))
        elif self.bound is not None:
            raise ConfigError(f"policy {kind!r} takes no bound", "policy.bound")
        if kind == "micro_batch":
            if self.micro_size is None or int(self.micro_size) < 1:
                raise ConfigError("micro_size must be a positive integer", "policy.micro_size")
            object.__setattr__(self, "micro_size", int(self.micro_size))
        elif self.micro_size is not None:
            raise ConfigError(f"policy {kind!r} takes no micro_size", "policy.micro_size")

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def per_core(cls, bound: float):
        return cls("per_core", bound)

    @classmethod
    def adaptive(cls):
        return cls("adaptive")

    @classmethod
    def per_example(cls, bound: float):
        return cls("per_example", bound)

    @classmethod
    def micro_batch(cls, bound: float, micro_size: int):
        return cls("micro_batch", bound, micro_size)

    @property
    def needs_per_example(self) -> bool:
        return self.kind in ("per_example", "micro_batch")

    @property
    def tag(self) -> str:
        """Short filesystem-safe label, e.g. ``per_core@2.5``."""
        if self.kind in ("none", "adaptive"):
            return self.kind
        tag = f"{self.kind}@{_short(self.bound)}"
        if self.kind == "micro_batch":
            tag += f"x{self.micro_size}"
        return tag

    def validate_for(self, per_core_batch: int) -> None:
        if self.kind == "micro_batch" and per_core_batch % self.micro_size:
            raise ConfigError(
                f"micro_size {self.micro_size} does not divide per-core batch {per_core_batch}",
                "policy.micro_size")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.bound is not None:
            out["bound"] = self.bound
        if self.micro_size is not None:
            out["micro_size"] = self.micro_size
        return out

    @classmethod
    def from_dict(cls, d) -> "ClippingPolicy":
        if isinstance(d, ClippingPolicy):
            return d
        if isinstance(d, str):
            return cls.parse(d)
        extra = set(d) - {"kind", "bound", "micro_size"}
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", "policy")
        return cls(d.get("kind", "none"), d.get("bound"), d.get("micro_size"))

    @classmethod
    def parse(cls, text: str) -> "ClippingPolicy":
        """Parse a tag such as ``none``, ``per_core@2.5`` or ``micro_batch@1x2``."""
        kind, _, rest = text.strip().partition("@")
        if not rest:
            return cls(kind)
        bound, _, micro = rest.partition("x")
        try:
            return cls(kind, float(bound), int(micro) if micro else None)
        except ValueError as exc:
            raise ConfigError(f"cannot parse policy {text!r}", "policy") from exc


@dataclass(frozen=True)
class PerCoreGradient:
    core_index: int
    grad: np.ndarray
    norm: float

    @classmethod
    def of(cls, core_index: int, grad) -> "PerCoreGradient":
        g = as_vector(grad, "grad")
        return cls(core_index, g, _norm_unchecked(g))


@dataclass
class ClippedGradientSet:
    grads: list
    applied_bound: float | None


def clip_to_bound(v, b: float) -> np.ndarray:
    """Scale ``v`` down to norm ``b`` if it is longer; otherwise return it untouched."""
    if not b > 0:
        raise ConfigError("clipping bound must be positive", "policy.bound")
    v = as_vector(v)
    return _clip(v, _norm_unchecked(v), b)


def _clip(v: np.ndarray, norm: float, b: float) -> np.ndarray:
    if norm <= b:
        return v
    return v * (b / norm)


def adaptive_bound(grads: Sequence[PerCoreGradient]) -> float:
    if not grads:
        raise ContractError("adaptive_bound needs at least one core")
    return min(g.norm for g in grads)


def _argmin_core(grads: Sequence[PerCoreGradient]) -> int:
    best = 0
    for i in range(1, len(grads)):
        if grads[i].norm < grads[best].norm:
            best = i
    return best


def _clip_sub_gradients(G: np.ndarray, bound: float, group: int) -> np.ndarray:
    """Clip each contiguous ``group``-row block's mean to ``bound``; average the results."""
    n = G.shape[0]
    if n % group:
        raise ContractError(f"micro-batch size {group} does not divide shard size {n}")
    pieces = np.empty((n // group, G.shape[1]))
    for m in range(n // group):
        block = G[m * group:(m + 1) * group]
        if group == 1:
            sub = block[0]
        else:
            sub = kernels.accumulate_rows(block, np.arange(group)) / group
        pieces[m] = _clip(sub, _norm_unchecked(sub), bound)
    order = np.arange(pieces.shape[0])
    return kernels.accumulate_rows(pieces, order) / pieces.shape[0]


def apply_policy(policy: ClippingPolicy, grads: Sequence[PerCoreGradient],
                 per_example_grads: Sequence[np.ndarray] | None = None) -> ClippedGradientSet:
    """Transform per-core gradients according to ``policy``.

    ``per_example_grads[c]`` holds core ``c``'s per-example gradients as rows,
    already sorted by example id; it is required exactly for the
    ``per_example`` and ``micro_batch`` policies.
    """
    if policy.needs_per_example:
        if per_example_grads is None or len(per_example_grads) != len(grads):
            raise ContractError(f"policy {policy.kind!r} needs per-example gradients for every core")
    elif per_example_grads is not None:
        raise ContractError(f"policy {policy.kind!r} does not take per-example gradients")

    kind = policy.kind
    if kind == "none":
        return ClippedGradientSet([g.grad for g in grads], None)
    if kind == "per_core":
        b = policy.bound
        return ClippedGradientSet([_clip(g.grad, g.norm, b) for g in grads], b)
    if kind == "adaptive":
        bt = adaptive_bound(grads)
        keep = _argmin_core(grads)
        out = []
        for c, g in enumerate(grads):
            if c == keep:
                out.append(g.grad)
            elif g.norm == 0.0 or bt == 0.0:
                out.append(np.zeros_like(g.grad))
            else:
                out.append(g.grad * (bt / g.norm))
        return ClippedGradientSet(out, bt)
    group = 1 if kind == "per_example" else policy.micro_size
    out = [_clip_sub_gradients(np.asarray(G, dtype=np.float64), policy.bound, group)
           for G in per_example_grads]
    return ClippedGradientSet(out, policy.bound)


def cosine_similarity(a, b) -> float:
    na, nb = l2_norm(a), l2_norm(b)
    if na == 0.0 or nb == 0.0:
        return math.nan
    # normalise first: the product of two tiny norms can underflow to zero
    return float(np.dot(np.asarray(a) / na, np.asarray(b) / nb))
