"""Helpers shared by the test modules."""

import numpy as np

from clipgrain.models import Dataset, Model, TeacherTask
from clipgrain.numerics import SeededRng


def assert_same_trajectory(a, b):
    """Bitwise equality of two training runs."""
    assert len(a.steps) == len(b.steps)
    for ra, rb in zip(a.steps, b.steps):
        assert ra.step == rb.step
        np.testing.assert_array_equal(ra.sampled_ids, rb.sampled_ids)
        np.testing.assert_array_equal(ra.core_norms, rb.core_norms)
        assert ra.loss == rb.loss
        assert ra.agg_grad_norm == rb.agg_grad_norm
    np.testing.assert_array_equal(a.init_params, b.init_params)
    np.testing.assert_array_equal(a.final_params, b.final_params)


def rows_of(dataset: Dataset, ids) -> np.ndarray:
    """Dataset rows holding the given example ids, in the order given."""
    where = {int(i): r for r, i in enumerate(dataset.ids)}
    return np.array([where[int(i)] for i in ids])


def toy_data(kind: str, dim: int = 5, n: int = 64, seed: int = 0, n_classes: int = 3) -> Dataset:
    task = TeacherTask(kind, dim, n_classes, 0.1, 1.0)
    train, _ = task.make_split(n, 1, SeededRng(seed))
    return train


def toy_model(kind: str, dim: int = 5, n_classes: int = 3) -> Model:
    return Model(kind, dim, 6 if kind == "mlp" else 0, n_classes)


def _neighbours(s: str, alphabet: str, max_len: int):
    for i in range(len(s)):
        yield s[:i] + s[i + 1:]
        for ch in alphabet:
            if ch != s[i]:
                yield s[:i] + ch + s[i + 1:]
    if len(s) < max_len:
        for i in range(len(s) + 1):
            for ch in alphabet:
                yield s[:i] + ch + s[i:]


def edit_ball(s: str, radius: int, alphabet: str, max_len: int) -> dict:
    """Every string reachable from ``s`` in at most ``radius`` single edits, with its distance."""
    dist = {s: 0}
    frontier = [s]
    for r in range(1, radius + 1):
        nxt = []
        for u in frontier:
            for v in _neighbours(u, alphabet, max_len):
                if v not in dist:
                    dist[v] = r
                    nxt.append(v)
        frontier = nxt
    return dist


def brute_force_distances(alphabet: str, max_len: int) -> dict:
    """All-pairs edit distances by breadth-first search over single edits.

    Intermediate strings never need to be longer than the longer endpoint or
    to use letters outside the alphabet, so the search space is closed, and
    no two strings are more than ``max_len`` edits apart.
    """
    return {s: edit_ball(s, max_len, alphabet, max_len) for s in all_strings(alphabet, max_len)}


def all_strings(alphabet: str, max_len: int) -> list:
    out = [""]
    layer = [""]
    for _ in range(max_len):
        layer = [s + ch for s in layer for ch in alphabet]
        out += layer
    return out
